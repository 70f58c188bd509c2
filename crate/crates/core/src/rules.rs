//! The three Tajweed rules and their fixed output order. Every component that
//! indexes a label or logit column goes through this table.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rule {
    /// Column name in the labels file.
    pub column: &'static str,
    pub name: &'static str,
    /// Short key used in metrics headers.
    pub short: &'static str,
    pub description: &'static str,
}

pub const N_RULES: usize = 3;

pub const RULES: [Rule; N_RULES] = [
    Rule {
        column: "separate_stretching",
        name: "Al Mad",
        short: "mad",
        description: "Separate stretching: the vowel before a hamza in the next word is \
                      elongated across the word boundary.",
    },
    Rule {
        column: "tight_noon",
        name: "Ghunnah",
        short: "ghunnah",
        description: "Tight noon: a doubled noon or meem is nasalised for two counts.",
    },
    Rule {
        column: "hide",
        name: "Ikhfaa",
        short: "ikhfaa",
        description: "Hide: a noon sakinah before certain consonants is partially \
                      concealed with nasalisation.",
    },
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_metadata() {
        let cols: Vec<_> = RULES.iter().map(|r| r.column).collect();
        assert_eq!(cols, ["separate_stretching", "tight_noon", "hide"]);
        assert!(RULES.iter().all(|r| !r.description.is_empty()));
    }
}
