//! Byte-level BPE tokenizer.
//!
//! The base alphabet is all 256 bytes, so every string encodes. Text is cut
//! into chunks before training and encoding: a chunk starts at every
//! whitespace byte and runs through the following non-whitespace bytes.
//! Merges never cross chunk boundaries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<eos>", "<mask>"];
pub const BYTE_OFFSET: u32 = SPECIALS.len() as u32;
pub const MIN_VOCAB: usize = SPECIALS.len() + 256;
pub const DEFAULT_VOCAB: usize = 4096;

/// Printable rendering of a byte. ASCII graphic characters other than `<`
/// and `>` map to themselves; every other byte maps to a code point from
/// U+0100 upward, so rendered subwords never contain angle brackets.
fn byte_char(b: u8) -> char {
    static TABLE: std::sync::OnceLock<[char; 256]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = ['\0'; 256];
        let mut next = 0x100u32;
        for b in 0..=255u8 {
            t[b as usize] = if b.is_ascii_graphic() && b != b'<' && b != b'>' {
                b as char
            } else {
                let c = char::from_u32(next).expect("valid code point");
                next += 1;
                c
            };
        }
        t
    })[b as usize]
}

fn char_byte(c: char) -> Option<u8> {
    (0..=255u8).find(|&b| byte_char(b) == c)
}

pub fn render_bytes(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_char(b)).collect()
}

pub fn parse_rendered(s: &str) -> Option<Vec<u8>> {
    s.chars().map(char_byte).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    specials: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordTokenizer {
    /// Byte string of every non-special id.
    pieces: Vec<Vec<u8>>,
    /// Merge rules in rank order, as id pairs.
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
    lookup: HashMap<Vec<u8>, u32>,
}

fn chunks(s: &[u8]) -> Vec<&[u8]> {
    let mut out = vec![];
    let mut start = 0;
    for i in 1..s.len() {
        if s[i].is_ascii_whitespace() {
            out.push(&s[start..i]);
            start = i;
        }
    }
    if !s.is_empty() {
        out.push(&s[start..]);
    }
    out
}

impl SubwordTokenizer {
    fn from_parts(pieces: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        let mut lookup = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            if lookup.insert(p.clone(), i as u32 + BYTE_OFFSET).is_some() {
                return Err(Error::Format {
                    path: "tokenizer".into(),
                    reason: format!("duplicate piece {:?}", render_bytes(p)),
                });
            }
        }
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut joined = pieces[(a - BYTE_OFFSET) as usize].clone();
            joined.extend_from_slice(&pieces[(b - BYTE_OFFSET) as usize]);
            let id = *lookup.get(&joined).ok_or_else(|| Error::Format {
                path: "tokenizer".into(),
                reason: format!("merge result {:?} missing from vocab", render_bytes(&joined)),
            })?;
            ranks.insert((a, b), (rank, id));
        }
        Ok(Self {
            pieces,
            merges,
            ranks,
            lookup,
        })
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.pieces.len()
    }

    pub fn merges(&self) -> usize {
        self.merges.len()
    }

    /// Display string of an id: the special's name or the rendered piece.
    pub fn token(&self, id: u32) -> Result<String> {
        if (id as usize) < SPECIALS.len() {
            return Ok(SPECIALS[id as usize].to_string());
        }
        self.pieces
            .get((id - BYTE_OFFSET) as usize)
            .map(|p| render_bytes(p))
            .ok_or(Error::UnknownId(id))
    }

    /// Inverse of [`token`](Self::token).
    pub fn token_id(&self, s: &str) -> Option<u32> {
        if let Some(i) = SPECIALS.iter().position(|&x| x == s) {
            return Some(i as u32);
        }
        self.lookup.get(&parse_rendered(s)?).copied()
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut seq: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
        while seq.len() > 1 {
            let best = seq
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, i, id)))
                .min();
            let Some((rank, _, id)) = best else { break };
            let pair = self.merges[rank];
            let mut next = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
                    next.push(id);
                    i += 2;
                } else {
                    next.push(seq[i]);
                    i += 1;
                }
            }
            seq = next;
        }
        out.extend(seq);
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        let mut out = vec![];
        for c in chunks(s.as_bytes()) {
            self.encode_chunk(c, &mut out);
        }
        out
    }

    /// Concatenates piece bytes; specials decode to nothing. Invalid UTF-8
    /// (only possible from hand-made id lists) is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = vec![];
        for &id in ids {
            if (id as usize) < SPECIALS.len() {
                continue;
            }
            let p = self.pieces.get((id - BYTE_OFFSET) as usize).ok_or(Error::UnknownId(id))?;
            bytes.extend_from_slice(p);
        }
        Ok(String::from_utf8(bytes).unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            vocab: (0..self.vocab_size() as u32).map(|i| self.token(i)).collect::<Result<_>>()?,
            merges: self
                .merges
                .iter()
                .map(|&(a, b)| Ok((self.token(a)?, self.token(b)?)))
                .collect::<Result<_>>()?,
            specials: SPECIALS.iter().enumerate().map(|(i, s)| (s.to_string(), i as u32)).collect(),
        };
        store::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TokenizerFile = store::read_json(path)?;
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        for (i, s) in SPECIALS.iter().enumerate() {
            if file.vocab.get(i).map(String::as_str) != Some(*s) || file.specials.get(*s) != Some(&(i as u32)) {
                return Err(bad(format!("special {s} not at id {i}")));
            }
        }
        let pieces: Vec<Vec<u8>> = file.vocab[SPECIALS.len()..]
            .iter()
            .map(|s| parse_rendered(s).ok_or_else(|| bad(format!("unrenderable piece {s:?}"))))
            .collect::<Result<_>>()?;
        let index: HashMap<&[u8], u32> =
            pieces.iter().enumerate().map(|(i, p)| (p.as_slice(), i as u32 + BYTE_OFFSET)).collect();
        let id_of = |s: &str| {
            parse_rendered(s)
                .and_then(|b| index.get(b.as_slice()).copied())
                .ok_or_else(|| bad(format!("merge operand {s:?} not in vocab")))
        };
        let merges = file
            .merges
            .iter()
            .map(|(a, b)| Ok((id_of(a)?, id_of(b)?)))
            .collect::<Result<_>>()?;
        Self::from_parts(pieces, merges)
    }
}

/// Learns merges until the vocabulary holds `vocab_size` entries (or no
/// adjacent pair is left). Pairs are ranked by frequency, ties broken by
/// the lexicographically smallest `(left bytes, right bytes)`.
pub fn train_subword(corpus: &[String], vocab_size: usize) -> Result<SubwordTokenizer> {
    if vocab_size < MIN_VOCAB {
        return Err(Error::VocabTooSmall {
            requested: vocab_size,
            minimum: MIN_VOCAB,
        });
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    for doc in corpus {
        for c in chunks(doc.as_bytes()) {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(c, n)| (c.iter().map(|&b| b as u32 + BYTE_OFFSET).collect(), n))
        .collect();
    let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = vec![];
    while SPECIALS.len() + pieces.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += n;
            }
        }
        let piece = |id: u32| &pieces[(id - BYTE_OFFSET) as usize];
        let Some((&best, _)) = pairs.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb)
                .then_with(|| (piece(pb.0), piece(pb.1)).cmp(&(piece(pa.0), piece(pa.1))))
        }) else {
            break;
        };
        let mut joined = piece(best.0).clone();
        joined.extend_from_slice(piece(best.1));
        let id = (SPECIALS.len() + pieces.len()) as u32;
        pieces.push(joined);
        merges.push(best);
        for (w, _) in words.iter_mut() {
            let mut i = 0;
            let mut next = Vec::with_capacity(w.len());
            while i < w.len() {
                if i + 1 < w.len() && (w[i], w[i + 1]) == best {
                    next.push(id);
                    i += 2;
                } else {
                    next.push(w[i]);
                    i += 1;
                }
            }
            *w = next;
        }
    }
    SubwordTokenizer::from_parts(pieces, merges)
}
