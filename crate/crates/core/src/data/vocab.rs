//! Closed token vocabulary shared by every generated corpus.
//!
//! ```text
//!  0  EOS          1  BOS
//!  2..6   instruction words
//!  6  AND
//!  7..10  counts (one, two, three)
//! 10..14  attributes      14..17 states
//! 17..20  actions         20..23 relations
//! 23..32  unused
//! 32..    objects
//! ```

use crate::types::TokenId;

pub const EOS: TokenId = 0;
pub const BOS: TokenId = 1;
pub const INSTRUCTION_WORDS: [&str; 4] = ["describe", "what", "image", "scene"];
pub const INSTRUCTION_BASE: TokenId = 2;
pub const AND: TokenId = 6;
pub const COUNT_BASE: TokenId = 7;
pub const COUNTS: [&str; 3] = ["one", "two", "three"];
pub const ATTR_BASE: TokenId = 10;
pub const ATTRS: [&str; 4] = ["red", "blue", "green", "white"];
pub const STATE_BASE: TokenId = 14;
pub const STATES: [&str; 3] = ["small", "large", "old"];
pub const ACTION_BASE: TokenId = 17;
pub const ACTIONS: [&str; 3] = ["standing", "lying", "moving"];
pub const RELATION_BASE: TokenId = 20;
pub const RELATIONS: [&str; 3] = ["near", "left-of", "on"];
pub const OBJECT_BASE: TokenId = 32;

/// Instruction templates as token pairs.
pub const TEMPLATES: [[TokenId; 2]; 4] = [[2, 4], [3, 5], [2, 5], [3, 4]];

/// Token layout for a world with a given object list.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    objects: Vec<String>,
}

impl Vocab {
    pub fn new(objects: Vec<String>) -> Self {
        Vocab { objects }
    }

    pub fn size(&self) -> u32 {
        OBJECT_BASE + self.objects.len() as u32
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn object_token(&self, index: usize) -> TokenId {
        OBJECT_BASE + index as TokenId
    }

    /// Object index for a token, if it is an object token.
    pub fn object_of(&self, token: TokenId) -> Option<usize> {
        let i = token.checked_sub(OBJECT_BASE)? as usize;
        (i < self.objects.len()).then_some(i)
    }

    pub fn object_name(&self, index: usize) -> &str {
        &self.objects[index]
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn is_object_token(&self, token: TokenId) -> bool {
        self.object_of(token).is_some()
    }

    /// Human-readable rendering of a token sequence.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn word(&self, t: TokenId) -> String {
        let within = |base: TokenId, words: &[&str]| {
            t.checked_sub(base)
                .and_then(|i| words.get(i as usize))
                .map(|w| w.to_string())
        };
        match t {
            EOS => ".".into(),
            BOS => "<bos>".into(),
            AND => "and".into(),
            _ => within(INSTRUCTION_BASE, &INSTRUCTION_WORDS)
                .or_else(|| within(COUNT_BASE, &COUNTS))
                .or_else(|| within(ATTR_BASE, &ATTRS))
                .or_else(|| within(STATE_BASE, &STATES))
                .or_else(|| within(ACTION_BASE, &ACTIONS))
                .or_else(|| within(RELATION_BASE, &RELATIONS))
                .or_else(|| self.object_of(t).map(|i| self.objects[i].clone()))
                .unwrap_or_else(|| format!("<{t}>")),
        }
    }
}
