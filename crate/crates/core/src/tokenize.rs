//! The single word tokenization rule shared by dataset statistics, the
//! vocabulary and the metrics: lowercase, split on whitespace, drop ASCII
//! punctuation, discard tokens that end up empty.

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Lowercased, whitespace-collapsed form of a description. Used as the
/// identity of a transformation when counting unique transformations and
/// transformation combinations.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_case_and_punctuation() {
        assert_eq!(tokenize("Pour the Egg, into  the bowl."), ["pour", "the", "egg", "into", "the", "bowl"]);
        assert_eq!(tokenize(" -- "), Vec::<String>::new());
        assert_eq!(tokenize("don't"), ["dont"]);
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize("  Cut   the\tMango "), "cut the mango");
    }
}
