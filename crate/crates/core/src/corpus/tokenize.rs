//! Shared text normalizer. Corpus building and keyword matching both go
//! through [`normalize_tokenize`], so their notions of a token agree.

use std::sync::OnceLock;

use regex::Regex;

fn phi_mask() -> &'static Regex {
    static MASK: OnceLock<Regex> = OnceLock::new();
    MASK.get_or_init(|| Regex::new(r"\[\*\*.*?\*\*\]").expect("valid regex"))
}

/// True for integers, decimals and digit groups such as `120/80`, `1,000`
/// or `12:30`.
pub fn is_numeric_token(token: &str) -> bool {
    let punct_digits = token.chars().any(|c| c.is_ascii_digit())
        && token.chars().all(|c| c.is_ascii_digit() || ".,/-:+%".contains(c));
    punct_digits || token.parse::<f64>().is_ok_and(f64::is_finite)
}

/// Lowercases, removes de-identification masks (`[**...**]`), splits on
/// whitespace, trims punctuation at both ends of each token and drops empty
/// and numeric tokens.
pub fn normalize_tokenize(text: &str) -> Vec<String> {
    let unmasked = phi_mask().replace_all(text, " ");
    unmasked
        .split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty() && !is_numeric_token(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clinical_snippet() {
        assert_eq!(normalize_tokenize("Mild Headache, BP 120/80."), vec!["mild", "headache", "bp"]);
        assert!(normalize_tokenize("").is_empty());
        assert_eq!(normalize_tokenize("aneurysm"), vec!["aneurysm"]);
    }

    #[test]
    fn masks_removed_as_unit() {
        assert_eq!(
            normalize_tokenize("On arrival to [**Hospital Name 123**] a CT"),
            vec!["on", "arrival", "to", "a", "ct"]
        );
    }

    #[test]
    fn numbers_dropped() {
        assert_eq!(normalize_tokenize("3.5 -2 1e5 x2 day3 (10)"), vec!["x2", "day3"]);
    }

    proptest! {
        #[test]
        fn no_number_survives(text in "[ -~]{0,80}") {
            for t in normalize_tokenize(&text) {
                prop_assert!(!t.is_empty());
                prop_assert!(t.parse::<f64>().map(|v| !v.is_finite()).unwrap_or(true));
                prop_assert_eq!(t.to_lowercase(), t.clone());
            }
        }
    }
}
