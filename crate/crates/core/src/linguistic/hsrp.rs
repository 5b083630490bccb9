//! Rule-based semantic-role parsing into (subject, action, object) spans.
//!
//! The first verb found is the action; everything left of it is the
//! subject and everything right of it the object. Verbs come from a closed
//! lexicon of base forms, irregular past forms, and `-s`/`-ed`/`-ing`
//! inflections of the base forms. Questions without a verb map every role to
//! the whole question.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::tokenize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTuple {
    pub subject: Range<usize>,
    pub action: Range<usize>,
    pub object: Range<usize>,
}

impl RelationTuple {
    pub fn whole(len: usize) -> Self {
        Self {
            subject: 0..len,
            action: 0..len,
            object: 0..len,
        }
    }
}

/// Pluggable role parser over a tokenised question.
pub trait RoleParser {
    fn parse(&self, tokens: &[String]) -> RelationTuple;
}

const BASE_VERBS: &[&str] = &[
    "accelerate", "appear", "approach", "arrive", "avoid", "block", "brake", "break", "bump",
    "carry", "catch", "change", "chase", "climb", "close", "collide", "crash", "cross", "cut",
    "damage", "drive", "drop", "enter", "exit", "fall", "flip", "follow", "hit", "hold", "honk",
    "jump", "kick", "leave", "load", "make", "merge", "move", "open", "overtake", "park", "pass",
    "pick", "play", "pull", "push", "put", "reach", "reverse", "ride", "roll", "run", "scratch",
    "see", "skid", "slide", "slow", "smash", "speed", "spin", "stop", "strike", "swerve", "take",
    "throw", "touch", "turn", "wait", "walk", "watch", "yield",
];

const IRREGULAR: &[&str] = &[
    "broke", "broken", "caught", "drove", "driven", "fell", "fallen", "held", "left", "made",
    "overtook", "overtaken", "ran", "rode", "ridden", "saw", "seen", "slid", "sped", "spun",
    "struck", "stricken", "threw", "thrown", "took", "taken",
];

fn is_base(word: &str) -> bool {
    BASE_VERBS.binary_search(&word).is_ok()
}

/// Lexicon membership with simple inflection stripping.
pub fn is_verb(word: &str) -> bool {
    if is_base(word) || IRREGULAR.contains(&word) {
        return true;
    }
    let stem_matches = |stem: &str| {
        if stem.len() < 2 {
            return false;
        }
        if is_base(stem) || is_base(&format!("{stem}e")) {
            return true;
        }
        // doubled final consonant: stopped -> stop, running -> run
        let b = stem.as_bytes();
        b.len() >= 3 && b[b.len() - 1] == b[b.len() - 2] && is_base(&stem[..stem.len() - 1])
    };
    for suffix in ["ing", "ed", "es", "s", "d"] {
        if let Some(stem) = word.strip_suffix(suffix) {
            if stem_matches(stem) {
                return true;
            }
        }
    }
    false
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RuleParser;

impl RoleParser for RuleParser {
    fn parse(&self, tokens: &[String]) -> RelationTuple {
        match tokens.iter().position(|t| is_verb(t)) {
            Some(v) => RelationTuple {
                subject: 0..v,
                action: v..v + 1,
                object: v + 1..tokens.len(),
            },
            None => RelationTuple::whole(tokens.len()),
        }
    }
}

/// Tokenises `question` and parses it with the rule parser.
pub fn parse_hsrp(question: &str) -> RelationTuple {
    RuleParser.parse(&tokenize(question))
}
