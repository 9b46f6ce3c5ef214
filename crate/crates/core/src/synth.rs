//! Desk-scale synthetic datasets with known ground truth.
//!
//! Every description `"<action> <object>"` owns a fixed delta vector. A
//! sample starts from a random scene vector and each step adds the delta of
//! its description, so the end state of a step is its start state plus the
//! delta. Topics are fixed step sequences. Ambiguous descriptions share the
//! delta of a description from another topic, so only the rest of the
//! sequence tells them apart.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, EmbeddingStore, Split, StateRef, VttSample};
use crate::error::{Result, VttError};
use crate::rng::stream_rng;

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_topics: usize,
    pub n_categories: usize,
    /// Inclusive `[min, max]` number of steps per topic.
    pub steps_per_topic: [usize; 2],
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub state_dim: usize,
    pub noise_sigma: f64,
    pub ambiguity_rate: f64,
    pub seed: u64,
    /// Standard deviation of each delta component.
    #[serde(default = "default_scale")]
    pub delta_scale: f64,
    /// Standard deviation of each component of a sample's start state.
    #[serde(default = "default_scale")]
    pub scene_scale: f64,
    /// Probability that a sample presents its topic's steps in a random order.
    #[serde(default)]
    pub permute_rate: f64,
}

const ACTIONS: [&str; 8] = ["pour", "cut", "stir", "add", "remove", "wash", "fold", "heat"];
const OBJECTS: [&str; 10] = [
    "the fresh egg",
    "the orange juice",
    "the green pepper",
    "the rice noodles",
    "the red sauce",
    "the small towel",
    "the metal lid",
    "the brown bread",
    "the cold milk",
    "the paper box",
];

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_topics: 4,
            n_categories: 2,
            steps_per_topic: [3, 3],
            actions: ACTIONS.iter().map(|s| s.to_string()).collect(),
            objects: OBJECTS.iter().map(|s| s.to_string()).collect(),
            state_dim: 16,
            noise_sigma: 0.0,
            ambiguity_rate: 0.0,
            seed: 0,
            delta_scale: 1.0,
            scene_scale: 1.0,
            permute_rate: 0.0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(VttError::Config(m));
        let [lo, hi] = self.steps_per_topic;
        if self.n_topics == 0 || self.n_categories == 0 || self.n_categories > self.n_topics {
            return cfg(format!(
                "need 1 <= n_categories <= n_topics, got {} categories for {} topics",
                self.n_categories, self.n_topics
            ));
        }
        if lo == 0 || lo > hi {
            return cfg(format!("invalid steps_per_topic [{lo}, {hi}]"));
        }
        if self.state_dim == 0 {
            return cfg("state_dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return cfg("noise_sigma must be a non-negative number".into());
        }
        for (name, r) in [("ambiguity_rate", self.ambiguity_rate), ("permute_rate", self.permute_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return cfg(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if self.actions.is_empty() || self.objects.is_empty() {
            return cfg("actions and objects must be non-empty".into());
        }
        let combos = self.actions.len() * self.objects.len();
        if combos < self.n_topics * hi {
            return cfg(format!(
                "vocabulary too small: {combos} action-object descriptions cannot cover {} topics of up to {hi} steps",
                self.n_topics
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicPlan {
    pub category: usize,
    /// Indices into [`SyntheticWorld::descriptions`].
    pub steps: Vec<usize>,
}

/// Everything a spec determines before any sample is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub descriptions: Vec<String>,
    pub deltas: Vec<Vec<f64>>,
    pub topics: Vec<TopicPlan>,
    /// Description pairs, from different topics, sharing one delta.
    pub ambiguous_pairs: Vec<(usize, usize)>,
}

impl SyntheticWorld {
    pub fn topic_label(t: usize) -> String {
        format!("topic-{t:02}")
    }

    pub fn category_label(c: usize) -> String {
        format!("category-{c:02}")
    }

    pub fn is_ambiguous(&self, desc: usize) -> bool {
        self.ambiguous_pairs.iter().any(|&(a, b)| a == desc || b == desc)
    }

    /// Topic index of the description at `desc`.
    pub fn topic_of(&self, desc: usize) -> usize {
        self.topics.iter().position(|t| t.steps.contains(&desc)).expect("description belongs to a topic")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn build_world(spec: &SyntheticTaskSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, "synth/world");
    let [lo, hi] = spec.steps_per_topic;
    let lengths: Vec<usize> = (0..spec.n_topics).map(|_| rng.random_range(lo..=hi)).collect();

    let mut combos: Vec<String> = spec
        .actions
        .iter()
        .flat_map(|a| spec.objects.iter().map(move |o| format!("{a} {o}")))
        .collect();
    combos.shuffle(&mut rng);
    let total: usize = lengths.iter().sum();
    combos.truncate(total);

    let mut deltas: Vec<Vec<f64>> = (0..total).map(|_| gaussian(&mut rng, spec.state_dim, spec.delta_scale)).collect();
    let mut next = 0;
    let topics: Vec<TopicPlan> = lengths
        .iter()
        .enumerate()
        .map(|(t, &len)| {
            let steps = (next..next + len).collect();
            next += len;
            TopicPlan {
                category: t % spec.n_categories,
                steps,
            }
        })
        .collect();

    // Pair descriptions across topics, keeping at least one unambiguous step
    // in every topic so the full sequence always identifies the topic.
    let mut ambiguous_pairs = Vec::new();
    let wanted = ((spec.ambiguity_rate * total as f64).round() as usize) / 2;
    if wanted > 0 {
        let topic_of: Vec<usize> = topics
            .iter()
            .enumerate()
            .flat_map(|(t, p)| p.steps.iter().map(move |_| t))
            .collect();
        let mut free_left: Vec<usize> = lengths.clone();
        let mut paired = vec![false; total];
        let mut slots: Vec<usize> = (0..total).collect();
        slots.shuffle(&mut rng);
        for (i, &a) in slots.iter().enumerate() {
            if ambiguous_pairs.len() == wanted {
                break;
            }
            if paired[a] || free_left[topic_of[a]] <= 1 {
                continue;
            }
            let partner = slots[i + 1..]
                .iter()
                .copied()
                .find(|&b| !paired[b] && topic_of[b] != topic_of[a] && free_left[topic_of[b]] > 1);
            if let Some(b) = partner {
                paired[a] = true;
                paired[b] = true;
                free_left[topic_of[a]] -= 1;
                free_left[topic_of[b]] -= 1;
                deltas[a] = deltas[b].clone();
                ambiguous_pairs.push((a.min(b), a.max(b)));
            }
        }
    }

    Ok(SyntheticWorld {
        descriptions: combos,
        deltas,
        topics,
        ambiguous_pairs,
    })
}

/// Draw `n_samples` samples. Sample `k` belongs to topic `k mod n_topics`
/// and draws from its own random stream, so the first samples do not depend
/// on how many are requested. All samples are tagged `train`.
pub fn generate(spec: &SyntheticTaskSpec, n_samples: usize) -> Result<(DatasetManifest, EmbeddingStore)> {
    if n_samples == 0 {
        return Err(VttError::Config("n_samples must be at least 1".into()));
    }
    let world = build_world(spec)?;
    let mut store = EmbeddingStore::new(spec.state_dim)?;
    let mut samples = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let t = k % spec.n_topics;
        let plan = &world.topics[t];
        let mut rng = stream_rng(spec.seed, &format!("synth/sample/{k}"));
        let mut steps = plan.steps.clone();
        if spec.permute_rate > 0.0 && rng.random::<f64>() < spec.permute_rate {
            steps.shuffle(&mut rng);
        }
        let mut state = gaussian(&mut rng, spec.state_dim, spec.scene_scale);
        let mut clean = vec![state.clone()];
        for &d in &steps {
            for (x, dx) in state.iter_mut().zip(&world.deltas[d]) {
                *x += dx;
            }
            clean.push(state.clone());
        }
        let sample_id = format!("syn-{k:05}");
        let mut refs = Vec::with_capacity(clean.len());
        for (j, v) in clean.iter().enumerate() {
            let state_id = format!("{sample_id}/s{j}");
            let observed: Vec<f32> = if spec.noise_sigma > 0.0 {
                v.iter()
                    .map(|x| (x + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            } else {
                v.iter().map(|&x| x as f32).collect()
            };
            store.insert(state_id.clone(), observed)?;
            refs.push(StateRef {
                state_id,
                source: "synthetic".into(),
                timestamp_sec: None,
            });
        }
        samples.push(VttSample {
            sample_id,
            category: SyntheticWorld::category_label(plan.category),
            topic: SyntheticWorld::topic_label(t),
            split: Split::Train,
            states: refs,
            transformations: steps.iter().map(|&d| world.descriptions[d].clone()).collect(),
        });
    }
    Ok((DatasetManifest::new(samples), store))
}

fn observed_deltas(states: &[Vec<f32>], spec: &SyntheticTaskSpec) -> Result<Vec<Vec<f64>>> {
    if states.len() < 2 {
        return Err(VttError::Shape("need at least two states".into()));
    }
    if let Some(v) = states.iter().find(|v| v.len() != spec.state_dim) {
        return Err(VttError::Shape(format!("state has {} components, spec says {}", v.len(), spec.state_dim)));
    }
    Ok(states
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(&b, &a)| b as f64 - a as f64).collect())
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(delta: &[f64], candidates: &[usize], world: &SyntheticWorld) -> (usize, f64) {
    candidates
        .iter()
        .map(|&c| (c, sq_dist(delta, &world.deltas[c])))
        .fold((usize::MAX, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Most likely description sequence given the whole state sequence. Every
/// topic hypothesis is scored by summed nearest-step distances; the best
/// topic (lowest index on ties) then names each step. Topics whose length
/// matches the sample are preferred.
pub fn oracle_describe(states: &[Vec<f32>], spec: &SyntheticTaskSpec) -> Result<Vec<String>> {
    let world = build_world(spec)?;
    let deltas = observed_deltas(states, spec)?;
    let n = deltas.len();
    let mut hypotheses: Vec<usize> = (0..world.topics.len()).filter(|&t| world.topics[t].steps.len() == n).collect();
    if hypotheses.is_empty() {
        hypotheses = (0..world.topics.len()).collect();
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for t in hypotheses {
        let cost: f64 = deltas.iter().map(|d| nearest(d, &world.topics[t].steps, &world).1).sum();
        if cost < best.1 {
            best = (t, cost);
        }
    }
    let steps = &world.topics[best.0].steps;
    Ok(deltas
        .iter()
        .map(|d| world.descriptions[nearest(d, steps, &world).0].clone())
        .collect())
}

/// Per-pair nearest description, ignoring the rest of the sequence.
pub fn oracle_describe_pairs(states: &[Vec<f32>], spec: &SyntheticTaskSpec) -> Result<Vec<String>> {
    let world = build_world(spec)?;
    let all: Vec<usize> = (0..world.descriptions.len()).collect();
    Ok(observed_deltas(states, spec)?
        .iter()
        .map(|d| world.descriptions[nearest(d, &all, &world).0].clone())
        .collect())
}

/// State vectors of a sample as stored.
pub fn sample_states(sample: &VttSample, store: &EmbeddingStore) -> Result<Vec<Vec<f32>>> {
    sample.states.iter().map(|s| store.get(&s.state_id).map(<[f32]>::to_vec)).collect()
}
