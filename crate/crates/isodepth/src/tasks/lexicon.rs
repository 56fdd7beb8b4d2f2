//! Shared closed-world lexicon. Every generator draws from these lists so
//! a single vocabulary covers the pretraining corpus and all tasks.

use super::Vocabulary;

pub const LEXICON_VERSION: &str = "lex-v1";

/// (singular, plural)
pub const ANIMATE_NOUNS: &[(&str, &str)] = &[
    ("hedgehog", "hedgehogs"),
    ("walrus", "walruses"),
    ("zebra", "zebras"),
    ("vulture", "vultures"),
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("monkey", "monkeys"),
    ("bear", "bears"),
    ("donkey", "donkeys"),
    ("fox", "foxes"),
    ("rabbit", "rabbits"),
    ("lion", "lions"),
    ("tiger", "tigers"),
    ("panda", "pandas"),
    ("otter", "otters"),
    ("ferret", "ferrets"),
    ("falcon", "falcons"),
    ("crow", "crows"),
    ("beagle", "beagles"),
    ("turtle", "turtles"),
    ("badger", "badgers"),
    ("weasel", "weasels"),
    ("heron", "herons"),
];

/// (singular, plural) — also used as locations inside prepositional phrases.
pub const INANIMATE_NOUNS: &[(&str, &str)] = &[
    ("cake", "cakes"),
    ("bed", "beds"),
    ("box", "boxes"),
    ("table", "tables"),
    ("chair", "chairs"),
    ("rock", "rocks"),
    ("tree", "trees"),
    ("house", "houses"),
    ("boat", "boats"),
    ("drum", "drums"),
    ("bell", "bells"),
    ("book", "books"),
];

/// (lemma, third-singular, past, participle)
pub const TRANSITIVE_VERBS: &[(&str, &str, &str, &str)] = &[
    ("admire", "admires", "admired", "admired"),
    ("chase", "chases", "chased", "chased"),
    ("eat", "eats", "ate", "eaten"),
    ("see", "sees", "saw", "seen"),
    ("find", "finds", "found", "found"),
    ("help", "helps", "helped", "helped"),
    ("call", "calls", "called", "called"),
    ("push", "pushes", "pushed", "pushed"),
    ("draw", "draws", "drew", "drawn"),
    ("hold", "holds", "held", "held"),
    ("lift", "lifts", "lifted", "lifted"),
    ("watch", "watches", "watched", "watched"),
];

/// (lemma, third-singular, past)
pub const INTRANSITIVE_VERBS: &[(&str, &str, &str)] = &[
    ("run", "runs", "ran"),
    ("sleep", "sleeps", "slept"),
    ("jump", "jumps", "jumped"),
    ("smile", "smiles", "smiled"),
    ("fall", "falls", "fell"),
    ("dance", "dances", "danced"),
    ("sneeze", "sneezes", "sneezed"),
    ("laugh", "laughs", "laughed"),
];

/// Determiners usable with either number.
pub const DETERMINERS_BOTH: &[&str] = &["the", "some", "her", "our", "my", "your"];
/// Determiners restricted to singular nouns.
pub const DETERMINERS_SG: &[&str] = &["a", "each"];

pub const PREPOSITIONS: &[&str] = &["on", "above", "under", "near", "beside", "behind"];

pub const FUNCTION_WORDS: &[&str] = &["that", "was", "were", "by", "."];

/// Tokens used only in semantic-form targets.
pub const TARGET_SYMBOLS: &[&str] = &[
    "(", ")", "=", ",", "*", ";", "AND", "x", "_", "nmod", "agent", "theme",
];

/// Largest source position expressible in variable-style targets.
pub const MAX_POSITION_TOKENS: usize = 64;

#[derive(Debug, Clone)]
pub struct Lexicon;

impl Lexicon {
    /// The full vocabulary shared by the corpus and all task generators.
    pub fn vocabulary() -> Vocabulary {
        let mut tokens: Vec<String> = Vec::new();
        for (sg, pl) in ANIMATE_NOUNS.iter().chain(INANIMATE_NOUNS) {
            tokens.push(sg.to_string());
            tokens.push(pl.to_string());
        }
        for (lemma, third, past, part) in TRANSITIVE_VERBS {
            for f in [lemma, third, past, part] {
                if !tokens.iter().any(|t| t == f) {
                    tokens.push(f.to_string());
                }
            }
        }
        for (lemma, third, past) in INTRANSITIVE_VERBS {
            for f in [lemma, third, past] {
                if !tokens.iter().any(|t| t == f) {
                    tokens.push(f.to_string());
                }
            }
        }
        for w in DETERMINERS_BOTH
            .iter()
            .chain(DETERMINERS_SG)
            .chain(PREPOSITIONS)
            .chain(FUNCTION_WORDS)
            .chain(TARGET_SYMBOLS)
        {
            tokens.push(w.to_string());
        }
        for i in 0..MAX_POSITION_TOKENS {
            tokens.push(i.to_string());
        }
        Vocabulary::new(tokens).expect("static lexicon has no duplicates")
    }

    pub fn animate_noun(idx: usize, plural: bool) -> &'static str {
        let (sg, pl) = ANIMATE_NOUNS[idx % ANIMATE_NOUNS.len()];
        if plural {
            pl
        } else {
            sg
        }
    }

    pub fn inanimate_noun(idx: usize, plural: bool) -> &'static str {
        let (sg, pl) = INANIMATE_NOUNS[idx % INANIMATE_NOUNS.len()];
        if plural {
            pl
        } else {
            sg
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_builds_and_covers_paper_examples() {
        let v = Lexicon::vocabulary();
        // Words from the passivization and semantic-parsing examples.
        for w in [
            "our", "vultures", "admired", "her", "walrus", "above", "some", "zebra", ".", "was",
            "by", "hedgehog", "ate", "the", "cake", "eat", "(", "agent", "=", "*", ")",
        ] {
            assert!(v.id(w).is_some(), "missing {w}");
        }
        assert!(v.len() < 512, "vocabulary unexpectedly large: {}", v.len());
    }

    #[test]
    fn all_singular_plural_forms_distinct() {
        for (sg, pl) in ANIMATE_NOUNS.iter().chain(INANIMATE_NOUNS) {
            assert_ne!(sg, pl);
        }
    }
}
