use std::collections::HashMap;

use super::BOS;

/// Whitespace word splitter with a growable vocabulary. Id 0 is `<bos>`;
/// once `capacity` ids are taken, unseen words share the last id.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    capacity: usize,
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl WhitespaceTokenizer {
    pub const BOS_TOKEN: &'static str = "<bos>";

    pub fn new(capacity: usize) -> Self {
        let mut ids = HashMap::new();
        ids.insert(Self::BOS_TOKEN.to_string(), BOS);
        WhitespaceTokenizer {
            capacity: capacity.max(2),
            words: vec![Self::BOS_TOKEN.to_string()],
            ids,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.capacity
    }

    pub fn count(text: &str) -> usize {
        text.split_whitespace().count()
    }

    pub fn encode(&mut self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    fn id_of(&mut self, word: &str) -> usize {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        if self.words.len() < self.capacity {
            let id = self.words.len();
            self.words.push(word.to_string());
            self.ids.insert(word.to_string(), id);
            id
        } else {
            self.capacity - 1
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.words.get(id).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overflow() {
        let mut tok = WhitespaceTokenizer::new(4);
        let ids = tok.encode("a b  a\tc d");
        assert_eq!(ids, vec![1, 2, 1, 3, 3]);
        assert_eq!(tok.decode(&[0, 1, 2]), "<bos> a b");
        assert_eq!(WhitespaceTokenizer::count(" one two\nthree "), 3);
    }
}
