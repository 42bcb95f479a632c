//! Prompt vocabulary, tokenization, and embedding lookup.
//!
//! Prompts follow a fixed four-word grammar — `color texture arrow pose` —
//! plus a reserved null token at id 0 for the unconditional embedding. The
//! embedding table itself lives with the denoiser weights and is trained
//! jointly.

use super::{Color, Pose, SceneSpec, Texture};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Token vocabulary in id order. Index 0 is the reserved null token.
pub const VOCAB: [&str; 14] = [
    "<null>", "red", "green", "blue", "yellow", "magenta", "cyan", "solid", "striped", "arrow",
    "up", "right", "down", "left",
];

pub const NULL_ID: usize = 0;

fn word_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&w| w == word)
}

/// Four content-token ids: `[color, texture, shape-marker, pose]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: [usize; 4],
}

impl PromptTokens {
    pub fn from_scene(s: &SceneSpec) -> Self {
        Self {
            ids: [
                word_id(s.color.word()).unwrap(),
                word_id(s.texture.word()).unwrap(),
                word_id("arrow").unwrap(),
                word_id(s.pose.word()).unwrap(),
            ],
        }
    }

    /// All-null tokens; embedding these gives the unconditional `c_u`.
    pub fn null() -> Self {
        Self { ids: [NULL_ID; 4] }
    }

    /// Parse the fixed `color texture arrow pose` grammar. Unknown words are
    /// errors, not guesses.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() != 4 {
            return Err(Error::Prompt(format!(
                "expected 4 words 'color texture arrow pose', got {} in {text:?}",
                words.len()
            )));
        }
        let color = Color::all()
            .into_iter()
            .find(|c| c.word() == words[0])
            .ok_or_else(|| Error::Prompt(format!("unknown color '{}'", words[0])))?;
        let texture = Texture::all()
            .into_iter()
            .find(|t| t.word() == words[1])
            .ok_or_else(|| Error::Prompt(format!("unknown texture '{}'", words[1])))?;
        if words[2] != "arrow" {
            return Err(Error::Prompt(format!("expected 'arrow', got '{}'", words[2])));
        }
        let pose = Pose::all()
            .into_iter()
            .find(|p| p.word() == words[3])
            .ok_or_else(|| Error::Prompt(format!("unknown pose '{}'", words[3])))?;
        Ok(Self {
            ids: [
                word_id(color.word()).unwrap(),
                word_id(texture.word()).unwrap(),
                word_id("arrow").unwrap(),
                word_id(pose.word()).unwrap(),
            ],
        })
    }

    pub fn words(&self) -> Result<String> {
        let mut out = Vec::with_capacity(4);
        for &id in &self.ids {
            let w = VOCAB
                .get(id)
                .ok_or_else(|| Error::Range(format!("token id {id} outside vocab")))?;
            out.push(*w);
        }
        Ok(out.join(" "))
    }

    /// Embedding row order: `[null, color, texture, shape, pose]`.
    pub fn embed_ids(&self) -> [usize; 5] {
        [NULL_ID, self.ids[0], self.ids[1], self.ids[2], self.ids[3]]
    }
}

/// Table lookup producing the `[5 × d_text]` prompt embedding.
pub fn embed_prompt<T: Real>(table: &Tensor<T>, tokens: &PromptTokens) -> Result<Tensor<T>> {
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let ids = tokens.embed_ids();
    let mut data = Vec::with_capacity(5 * d);
    for id in ids {
        if id >= vocab {
            return Err(Error::Range(format!("token id {id} outside vocab of {vocab}")));
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![5, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn table() -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..14 * 32).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![14, 32], data).unwrap()
    }

    #[test]
    fn null_prompt_embeds_to_five_identical_null_rows() {
        let t = table();
        let e = embed_prompt(&t, &PromptTokens::null()).unwrap();
        assert_eq!(e.shape(), &[5, 32]);
        let null_row = &t.data()[0..32];
        for r in 0..5 {
            assert_eq!(&e.data()[r * 32..(r + 1) * 32], null_row);
        }
    }

    #[test]
    fn prompts_differing_in_pose_differ_only_in_pose_row() {
        let t = table();
        let a = PromptTokens::parse("red striped arrow up").unwrap();
        let b = PromptTokens::parse("red striped arrow down").unwrap();
        let ea = embed_prompt(&t, &a).unwrap();
        let eb = embed_prompt(&t, &b).unwrap();
        for r in 0..4 {
            assert_eq!(&ea.data()[r * 32..(r + 1) * 32], &eb.data()[r * 32..(r + 1) * 32]);
        }
        assert_ne!(&ea.data()[4 * 32..], &eb.data()[4 * 32..]);
    }

    #[test]
    fn lookup_matches_direct_indexing() {
        let t = table();
        let p = PromptTokens::parse("cyan solid arrow left").unwrap();
        let e = embed_prompt(&t, &p).unwrap();
        for (r, id) in p.embed_ids().into_iter().enumerate() {
            assert_eq!(&e.data()[r * 32..(r + 1) * 32], &t.data()[id * 32..(id + 1) * 32]);
        }
    }

    #[test]
    fn out_of_vocab_id_is_a_range_error() {
        let t = table();
        let bad = PromptTokens { ids: [99, 7, 9, 10] };
        assert!(matches!(embed_prompt(&t, &bad), Err(Error::Range(_))));
    }

    #[test]
    fn parse_rejects_unknown_words_and_bad_arity() {
        assert!(PromptTokens::parse("red striped arrow up").is_ok());
        assert!(matches!(PromptTokens::parse("crimson striped arrow up"), Err(Error::Prompt(_))));
        assert!(matches!(PromptTokens::parse("red fuzzy arrow up"), Err(Error::Prompt(_))));
        assert!(matches!(PromptTokens::parse("red striped circle up"), Err(Error::Prompt(_))));
        assert!(matches!(PromptTokens::parse("red striped arrow diagonal"), Err(Error::Prompt(_))));
        assert!(matches!(PromptTokens::parse("red striped arrow"), Err(Error::Prompt(_))));
    }

    #[test]
    fn scene_roundtrips_through_words() {
        let s = super::super::sample_scene(3);
        let p = PromptTokens::from_scene(&s);
        let p2 = PromptTokens::parse(&p.words().unwrap()).unwrap();
        assert_eq!(p, p2);
    }
}
