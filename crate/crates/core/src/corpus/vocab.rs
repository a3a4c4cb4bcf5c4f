//! Token vocabulary shared by source and target sides.
//!
//! Ids are dense from zero. The reserved specials occupy the lowest ids in
//! this fixed order: PAD, EOS, UNK, MASK, LANG_SRC, LANG_TGT, then the K
//! expert start-of-sentence tokens `<sos0>..<sosK-1>`. Content tokens follow.

use super::{CorpusError, MergeTable};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const MASK: u32 = 3;
pub const LANG_SRC: u32 = 4;
pub const LANG_TGT: u32 = 5;
/// Id of `<sos0>`; expert z uses id `FIRST_SOS + z`.
pub const FIRST_SOS: u32 = 6;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    expert_count: usize,
    merges: MergeTable,
}

/// On-disk form; specials are reconstructed, not stored.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    expert_count: usize,
    content_tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

impl Vocabulary {
    /// Build from content tokens (deduplicated, order-preserving).
    pub fn new(
        content_tokens: impl IntoIterator<Item = String>,
        expert_count: usize,
        merges: MergeTable,
    ) -> Self {
        assert!(expert_count >= 1, "need at least one expert token");
        let mut tokens: Vec<String> = vec![
            "<pad>".into(),
            "<eos>".into(),
            "<unk>".into(),
            "<mask>".into(),
            "<src>".into(),
            "<tgt>".into(),
        ];
        for z in 0..expert_count {
            tokens.push(format!("<sos{z}>"));
        }
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for t in content_tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), tokens.len() as u32);
                tokens.push(t);
            }
        }
        Self {
            tokens,
            index,
            expert_count,
            merges,
        }
    }

    /// Synthetic vocabulary of `content_words` tokens named `w000`, `w001`, …
    pub fn synthetic(content_words: usize, expert_count: usize) -> Self {
        Self::new(
            (0..content_words).map(|i| format!("w{i:03}")),
            expert_count,
            MergeTable::default(),
        )
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn expert_count(&self) -> usize {
        self.expert_count
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn sos_id(&self, expert: usize) -> Option<u32> {
        (expert < self.expert_count).then_some(FIRST_SOS + expert as u32)
    }

    pub fn is_sos(&self, id: u32) -> bool {
        (FIRST_SOS..FIRST_SOS + self.expert_count as u32).contains(&id)
    }

    /// First content id (everything below is a reserved special).
    pub fn content_start(&self) -> u32 {
        FIRST_SOS + self.expert_count as u32
    }

    pub fn content_size(&self) -> usize {
        self.size() - self.content_start() as usize
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < self.content_start()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Map one word to ids: a word that is itself in the vocabulary stays
    /// whole; anything else is segmented with the merge table and looked up
    /// subword by subword (UNK for misses).
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(id) = self.id_of(word) {
            return vec![id];
        }
        super::segment(word, &self.merges)
            .into_iter()
            .map(|sub| self.id_of(&sub).unwrap_or(UNK))
            .collect()
    }

    /// Encode a sentence of words into subword ids plus, per subword, the
    /// index of its parent word.
    pub fn encode_words(&self, words: &[String]) -> (Vec<u32>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut alignment = Vec::new();
        for (w, word) in words.iter().enumerate() {
            for id in self.encode_word(word) {
                ids.push(id);
                alignment.push(w);
            }
        }
        (ids, alignment)
    }

    /// FNV-1a over the ordered token list; checkpoints store this to refuse
    /// loading weights against a different vocabulary.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for t in &self.tokens {
            eat(t.as_bytes());
            eat(&[0x1f]);
        }
        for (a, b) in &self.merges.rules {
            eat(a.as_bytes());
            eat(&[0x1e]);
            eat(b.as_bytes());
            eat(&[0x1f]);
        }
        h
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CorpusError> {
        let file = VocabFile {
            expert_count: self.expert_count,
            content_tokens: self.tokens[self.content_start() as usize..].to_vec(),
            merges: self.merges.rules.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| CorpusError::VocabFile(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|e| CorpusError::VocabFile(e.to_string()))?;
        Ok(Self::new(
            file.content_tokens,
            file.expert_count,
            MergeTable { rules: file.merges },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_occupy_lowest_ids_in_order() {
        let v = Vocabulary::synthetic(10, 3);
        assert_eq!(v.id_of("<pad>"), Some(PAD));
        assert_eq!(v.id_of("<eos>"), Some(EOS));
        assert_eq!(v.id_of("<unk>"), Some(UNK));
        assert_eq!(v.id_of("<mask>"), Some(MASK));
        assert_eq!(v.id_of("<src>"), Some(LANG_SRC));
        assert_eq!(v.id_of("<tgt>"), Some(LANG_TGT));
        assert_eq!(v.id_of("<sos0>"), Some(6));
        assert_eq!(v.id_of("<sos2>"), Some(8));
        assert_eq!(v.content_start(), 9);
        assert_eq!(v.size(), 19);
    }

    #[test]
    fn decode_encode_round_trip() {
        let v = Vocabulary::synthetic(20, 2);
        for id in 0..v.size() as u32 {
            let tok = v.token(id).to_string();
            assert_eq!(v.id_of(&tok), Some(id));
        }
    }

    #[test]
    fn sos_bounds() {
        let v = Vocabulary::synthetic(5, 2);
        assert_eq!(v.sos_id(0), Some(6));
        assert_eq!(v.sos_id(1), Some(7));
        assert_eq!(v.sos_id(2), None);
    }

    #[test]
    fn fingerprint_changes_with_content() {
        let a = Vocabulary::synthetic(5, 2);
        let b = Vocabulary::synthetic(6, 2);
        let c = Vocabulary::synthetic(5, 3);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), Vocabulary::synthetic(5, 2).fingerprint());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocabulary::new(
            ["alpha".to_string(), "beta".to_string()],
            2,
            MergeTable {
                rules: vec![("a".into(), "l".into())],
            },
        );
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.fingerprint(), v.fingerprint());
        assert_eq!(loaded.id_of("alpha"), v.id_of("alpha"));
    }
}
