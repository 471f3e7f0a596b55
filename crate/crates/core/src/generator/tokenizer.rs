use std::collections::HashMap;

use super::GeneratorError;

/// Special tokens, in id order after the 256 byte tokens.
pub const SPECIAL_TOKENS: [&str; 6] = ["<|eos|>", "<|strategy|>", "<|definition|>", "<|seeker|>", "<|caregiver|>", "<|response|>"];

pub const EOS: usize = 256;
pub const STRATEGY: usize = 257;
pub const DEFINITION: usize = 258;
pub const SEEKER: usize = 259;
pub const CAREGIVER: usize = 260;
pub const RESPONSE: usize = 261;

const FIRST_MERGE: usize = 256 + SPECIAL_TOKENS.len();
const FORMAT_HEADER: &str = "counsel-bpe 1";

/// Byte-level byte-pair encoding. Ids `0..256` are raw bytes, then the
/// special tokens, then one id per learned merge. Every byte sequence is
/// encodable, so there is no unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(usize, usize)>,
    ranks: HashMap<(usize, usize), usize>,
    pieces: Vec<Vec<u8>>,
}

/// Splits text into words that each keep their leading whitespace.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_space = true;
    for (i, c) in text.char_indices() {
        let space = c.is_whitespace();
        if space && !prev_space && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_space = space;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Tokenizer {
    fn from_merges(merges: Vec<(usize, usize)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(SPECIAL_TOKENS.iter().map(|s| s.as_bytes().to_vec()));
        let mut ranks = HashMap::new();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let mut p = pieces[a].clone();
            p.extend_from_slice(&pieces[b]);
            pieces.push(p);
            ranks.insert((a, b), i);
        }
        Self { merges, ranks, pieces }
    }

    /// Learns merges until the vocabulary reaches `vocab_size` or no pair
    /// occurs twice. Ties go to the smallest pair of ids.
    pub fn train<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Self, GeneratorError> {
        if vocab_size < FIRST_MERGE {
            return Err(GeneratorError::Config(format!(
                "vocabulary size {vocab_size} is below the {FIRST_MERGE} base tokens"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in pre_tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<usize>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(usize::from).collect(), c))
            .collect();
        words.sort();
        let mut merges = Vec::new();
        while FIRST_MERGE + merges.len() < vocab_size {
            let mut pairs: HashMap<(usize, usize), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let Some((&best, &n)) = pairs.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                break;
            };
            if n < 2 {
                break;
            }
            let id = FIRST_MERGE + merges.len();
            merges.push(best);
            for (w, _) in words.iter_mut() {
                *w = merge_pair(w, best, id);
            }
        }
        Ok(Self::from_merges(merges))
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_MERGE + self.merges.len()
    }

    /// Encodes plain text; special-token strings are not recognized here.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in pre_tokenize(text) {
            let mut ids: Vec<usize> = w.bytes().map(usize::from).collect();
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                    .min();
                match best {
                    Some((r, pair)) => ids = merge_pair(&ids, pair, FIRST_MERGE + r),
                    None => break,
                }
            }
            out.extend(ids);
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &i in ids {
            if let Some(p) = self.pieces.get(i) {
                bytes.extend_from_slice(p);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Line-based serialization: a header, then one `a b` merge per line.
    pub fn serialize(&self) -> String {
        let mut s = format!("{FORMAT_HEADER}\n");
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s
    }

    pub fn deserialize(s: &str) -> Result<Self, GeneratorError> {
        let mut lines = s.lines();
        if lines.next() != Some(FORMAT_HEADER) {
            return Err(GeneratorError::Config("unrecognized tokenizer format".into()));
        }
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let parse = |x: Option<&str>| -> Result<usize, GeneratorError> {
                x.and_then(|v| v.parse().ok())
                    .ok_or_else(|| GeneratorError::Config(format!("bad merge on line {}", n + 2)))
            };
            let mut it = line.split(' ');
            let (a, b) = (parse(it.next())?, parse(it.next())?);
            let next = FIRST_MERGE + merges.len();
            if a >= next || b >= next || (256..FIRST_MERGE).contains(&a) || (256..FIRST_MERGE).contains(&b) {
                return Err(GeneratorError::Config(format!("merge on line {} refers to an unknown id", n + 2)));
            }
            merges.push((a, b));
        }
        Ok(Self::from_merges(merges))
    }
}

fn merge_pair(ids: &[usize], pair: (usize, usize), id: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_any_text_and_compresses_training_text() {
        let corpus = ["it sounds like you feel alone.", "can you tell me more about it?"];
        let tok = Tokenizer::train(corpus.iter().copied().cycle().take(20), 300).unwrap();
        assert!(tok.vocab_size() > FIRST_MERGE);
        for t in corpus.iter().chain(&["ñandú ☃ unseen", ""]) {
            assert_eq!(tok.decode(&tok.encode(t)), *t);
        }
        assert!(tok.encode(corpus[0]).len() < corpus[0].len());
        assert_eq!(tok.decode(&[EOS]), "<|eos|>");
    }

    #[test]
    fn serialization_round_trips() {
        let tok = Tokenizer::train(["a b a b a b abab"], 270).unwrap();
        let back = Tokenizer::deserialize(&tok.serialize()).unwrap();
        assert_eq!(tok, back);
        assert!(Tokenizer::deserialize("nope").is_err());
        assert!(Tokenizer::train(["x"], 10).is_err());
    }
}
