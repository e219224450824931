use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// String to id map. Ids 0, 1, 2 are start, end and unknown markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub const BOS_ID: usize = 0;
    pub const EOS_ID: usize = 1;
    pub const UNK_ID: usize = 2;

    pub fn new() -> Self {
        let mut v = Vocab {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for s in [BOS, EOS, UNK] {
            v.add(s);
        }
        v
    }

    /// Returns the id of `symbol`, adding it if new.
    pub fn add(&mut self, symbol: &str) -> usize {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        let id = self.symbols.len();
        self.symbols.push(symbol.to_string());
        self.index.insert(symbol.to_string(), id);
        id
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.get(symbol).unwrap_or(Self::UNK_ID)
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    fn from_symbols(symbols: Vec<String>) -> Result<Self, String> {
        if symbols.len() < 3 || symbols[..3] != [BOS, EOS, UNK] {
            return Err("vocabulary must start with <s>, </s>, <unk>".into());
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary symbol {s:?}"));
            }
        }
        Ok(Vocab { symbols, index })
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.symbols.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let symbols = Vec::<String>::deserialize(d)?;
        Vocab::from_symbols(symbols).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_first_and_unknowns_fall_back() {
        let mut v = Vocab::new();
        let a = v.add("play");
        assert_eq!(a, 3);
        assert_eq!(v.add("play"), 3);
        assert_eq!(v.encode("play zzz <s>"), vec![3, Vocab::UNK_ID, Vocab::BOS_ID]);
    }

    #[test]
    fn serde_round_trip_and_rejects_duplicates() {
        let mut v = Vocab::new();
        v.add("x");
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["<s>","</s>","<unk>","a","a"]"#).is_err());
    }
}
