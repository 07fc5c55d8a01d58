use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmotionDictionary;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Ordered token list: the four specials at ids 0..4, then words sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary")]
pub struct Vocabulary {
    tokens: Vec<String>,
    emotion: Vec<bool>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawVocabulary {
    tokens: Vec<String>,
    emotion: Vec<bool>,
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = Error;

    fn try_from(raw: RawVocabulary) -> Result<Self> {
        if raw.tokens.len() != raw.emotion.len() {
            return Err(Error::data("vocabulary flags do not match its tokens"));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if raw.tokens.get(i).map(String::as_str) != Some(*s)
                || raw.tokens.iter().filter(|t| t.as_str() == *s).count() != 1
            {
                return Err(Error::data(format!("vocabulary must hold {s} once at id {i}")));
            }
        }
        let v = Vocabulary::assemble(raw.tokens, raw.emotion);
        if v.index.len() != v.tokens.len() {
            return Err(Error::data("vocabulary has duplicate tokens"));
        }
        Ok(v)
    }
}

impl Vocabulary {
    /// Builds from every word of the given token streams. Words that are in
    /// `dictionary` are flagged as emotional.
    pub fn build<I, S>(words: I, dictionary: &EmotionDictionary) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()) && !w.is_empty())
            .collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        let emotion = tokens.iter().map(|t| dictionary.contains(t)).collect();
        Self::assemble(tokens, emotion)
    }

    fn assemble(tokens: Vec<String>, emotion: Vec<bool>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, emotion, index }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::data(format!("vocabulary: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn unk(&self) -> usize {
        3
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn is_emotion(&self, id: usize) -> bool {
        self.emotion[id]
    }

    pub fn emotion_flags(&self) -> &[bool] {
        &self.emotion
    }

    /// Maps tokens to ids; unknown words become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(self.unk())).collect()
    }

    /// Maps ids back to words, stopping at `<eos>` and dropping specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != self.eos())
            .filter(|&&i| !self.is_special(i))
            .map(|&i| self.tokens[i].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingTable;

    fn dict() -> EmotionDictionary {
        EmotionDictionary::new(&["happy", "sad"], &EmbeddingTable::deterministic(4, 0)).unwrap()
    }

    #[test]
    fn specials_first_and_flags_follow_dictionary() {
        let v = Vocabulary::build(["the", "happy", "dog", "<eos>", "the"], &dict());
        assert_eq!(&v.tokens()[..4], &["<pad>", "<bos>", "<eos>", "<unk>"]);
        assert_eq!(v.len(), 7);
        for s in SPECIALS {
            assert_eq!(v.tokens().iter().filter(|t| t.as_str() == s).count(), 1);
        }
        assert!(v.is_emotion(v.id("happy").unwrap()));
        assert!(!v.is_emotion(v.id("dog").unwrap()));
        assert_eq!(v.encode(&["dog", "cat"]), vec![v.id("dog").unwrap(), v.unk()]);
        let ids = vec![v.bos(), v.id("the").unwrap(), v.id("dog").unwrap(), v.eos(), v.id("happy").unwrap()];
        assert_eq!(v.decode(&ids), vec!["the", "dog"]);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let v = Vocabulary::build(["a", "sad", "b"], &dict());
        assert_eq!(Vocabulary::from_json(&v.to_json()).unwrap(), v);
        let bad = r#"{"tokens":["<bos>","<pad>","<eos>","<unk>"],"emotion":[false,false,false,false]}"#;
        assert!(Vocabulary::from_json(bad).is_err());
    }
}
