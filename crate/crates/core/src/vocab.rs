//! Unified token space: text, audio and the four motion-part codebooks laid
//! out contiguously, followed by start/end boundary tokens per modality.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::Part;
use crate::store;
use crate::text::SubwordTokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Face,
    Hands,
    Upper,
    Lower,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Text,
        Modality::Audio,
        Modality::Face,
        Modality::Hands,
        Modality::Upper,
        Modality::Lower,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Prefix used in rendered tokens, e.g. `<hand_3>`.
    pub fn token_prefix(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Face => "face",
            Modality::Hands => "hand",
            Modality::Upper => "upper",
            Modality::Lower => "lower",
        }
    }

    fn letter(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Audio => 'a',
            Modality::Face => 'f',
            Modality::Hands => 'h',
            Modality::Upper => 'u',
            Modality::Lower => 'l',
        }
    }

    pub fn part(self) -> Option<Part> {
        match self {
            Modality::Face => Some(Part::Face),
            Modality::Hands => Some(Part::Hands),
            Modality::Upper => Some(Part::Upper),
            Modality::Lower => Some(Part::Lower),
            _ => None,
        }
    }

    pub fn is_motion(self) -> bool {
        self.part().is_some()
    }
}

impl From<Part> for Modality {
    fn from(p: Part) -> Self {
        match p {
            Part::Face => Modality::Face,
            Part::Hands => Modality::Hands,
            Part::Upper => Modality::Upper,
            Part::Lower => Modality::Lower,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializable");
        f.write_str(s.as_str().expect("string"))
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
            .map_err(|_| Error::InvalidConfig(format!("unknown modality {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: Modality,
    pub offset: u32,
    pub size: u32,
}

/// What a unified id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Local(Modality, u32),
    Start(Modality),
    End(Modality),
}

pub const SPECIAL_COUNT: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    segments: Vec<Segment>,
    total_size: u32,
    /// Rendered text pieces, when built from a tokenizer.
    text_tokens: Option<Vec<String>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    segments: &'a [Segment],
    specials: Vec<String>,
    total_size: u32,
    text_tokens: &'a Option<Vec<String>>,
    hash: String,
}

impl UnifiedVocab {
    /// Layout in the order text, audio, face, hands, upper, lower, then the
    /// start/end pair of each modality in the same order.
    pub fn build(sizes: [usize; 6]) -> Result<Self> {
        let mut segments = Vec::with_capacity(6);
        let mut offset = 0u32;
        for (m, &size) in Modality::ALL.iter().zip(&sizes) {
            if size == 0 {
                return Err(Error::InvalidConfig(format!("{m} segment must be non-empty")));
            }
            segments.push(Segment {
                modality: *m,
                offset,
                size: size as u32,
            });
            offset += size as u32;
        }
        Ok(Self {
            segments,
            total_size: offset + SPECIAL_COUNT as u32,
            text_tokens: None,
        })
    }

    /// Text segment taken from a trained tokenizer, so text ids render as
    /// their subword strings.
    pub fn with_tokenizer(tok: &SubwordTokenizer, sizes: [usize; 5]) -> Result<Self> {
        let mut all = [tok.vocab_size(); 6];
        all[1..].copy_from_slice(&sizes);
        let mut v = Self::build(all)?;
        v.text_tokens = Some((0..tok.vocab_size() as u32).map(|i| tok.token(i)).collect::<Result<_>>()?);
        Ok(v)
    }

    pub fn total_size(&self) -> usize {
        self.total_size as usize
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, m: Modality) -> Segment {
        self.segments[m.index()]
    }

    pub fn specials_offset(&self) -> u32 {
        self.total_size - SPECIAL_COUNT as u32
    }

    pub fn start(&self, m: Modality) -> u32 {
        self.specials_offset() + 2 * m.index() as u32
    }

    pub fn end(&self, m: Modality) -> u32 {
        self.start(m) + 1
    }

    pub fn id(&self, m: Modality, local: u32) -> Result<u32> {
        let s = self.segment(m);
        if local >= s.size {
            return Err(Error::IndexOutOfRange {
                index: local as usize,
                size: s.size as usize,
            });
        }
        Ok(s.offset + local)
    }

    pub fn token(&self, id: u32) -> Result<Token> {
        if id >= self.total_size {
            return Err(Error::UnknownId(id));
        }
        let sp = self.specials_offset();
        if id >= sp {
            let k = (id - sp) as usize;
            let m = Modality::ALL[k / 2];
            return Ok(if k % 2 == 0 { Token::Start(m) } else { Token::End(m) });
        }
        let seg = self
            .segments
            .iter()
            .rfind(|s| s.offset <= id)
            .expect("text segment starts at 0");
        Ok(Token::Local(seg.modality, id - seg.offset))
    }

    pub fn modality_of(&self, id: u32) -> Option<Modality> {
        match self.token(id) {
            Ok(Token::Local(m, _)) => Some(m),
            _ => None,
        }
    }

    pub fn is_boundary(&self, id: u32) -> bool {
        id >= self.specials_offset() && id < self.total_size
    }

    /// Ids of the four motion-part segments.
    pub fn motion_ids(&self) -> impl Iterator<Item = u32> + '_ {
        Modality::ALL
            .iter()
            .filter(|m| m.is_motion())
            .flat_map(|&m| {
                let s = self.segment(m);
                s.offset..s.offset + s.size
            })
    }

    fn special_name(&self, m: Modality, start: bool) -> String {
        format!("</{}o{}>", if start { 's' } else { 'e' }, m.letter())
    }

    pub fn render(&self, id: u32) -> Result<String> {
        Ok(match self.token(id)? {
            Token::Start(m) => self.special_name(m, true),
            Token::End(m) => self.special_name(m, false),
            Token::Local(Modality::Text, k) => match &self.text_tokens {
                Some(t) => t[k as usize].clone(),
                None => format!("<text_{k}>"),
            },
            Token::Local(m, k) => format!("<{}_{k}>", m.token_prefix()),
        })
    }

    pub fn parse(&self, s: &str) -> Result<u32> {
        if let Some(t) = &self.text_tokens {
            if let Some(k) = t.iter().position(|x| x == s) {
                return Ok(k as u32);
            }
        }
        for m in Modality::ALL {
            for start in [true, false] {
                if s == self.special_name(m, start) {
                    return Ok(if start { self.start(m) } else { self.end(m) });
                }
            }
        }
        let Some(inner) = s.strip_prefix('<') else {
            return Err(Error::UnknownToken(s.to_string()));
        };
        let inner = inner
            .strip_suffix('>')
            .ok_or_else(|| Error::MalformedTokenString(s.to_string()))?;
        let (prefix, digits) = inner
            .rsplit_once('_')
            .ok_or_else(|| Error::UnknownToken(s.to_string()))?;
        let m = Modality::ALL
            .into_iter()
            .find(|m| m.token_prefix() == prefix)
            .filter(|m| *m != Modality::Text || self.text_tokens.is_none())
            .ok_or_else(|| Error::UnknownToken(s.to_string()))?;
        let canonical = !digits.is_empty()
            && digits.bytes().all(|b| b.is_ascii_digit())
            && (digits == "0" || !digits.starts_with('0'));
        let k: u32 = digits
            .parse()
            .ok()
            .filter(|_| canonical)
            .ok_or_else(|| Error::MalformedTokenString(s.to_string()))?;
        self.id(m, k)
            .map_err(|_| Error::MalformedTokenString(s.to_string()))
    }

    /// `[start] + mapped ids + [end]`.
    pub fn wrap(&self, m: Modality, local: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(local.len() + 2);
        out.push(self.start(m));
        for &k in local {
            out.push(self.id(m, k)?);
        }
        out.push(self.end(m));
        Ok(out)
    }

    pub fn unwrap(&self, m: Modality, ids: &[u32]) -> Result<Vec<u32>> {
        let malformed = || Error::MalformedTokenString(format!("{m} stream without boundaries"));
        let inner = ids
            .strip_prefix(&[self.start(m)])
            .and_then(|r| r.strip_suffix(&[self.end(m)]))
            .ok_or_else(malformed)?;
        inner
            .iter()
            .map(|&id| match self.token(id)? {
                Token::Local(mm, k) if mm == m => Ok(k),
                _ => Err(malformed()),
            })
            .collect()
    }

    /// Every `[start(m)] … [end(m)]` block in `ids`, unwrapped, in order.
    /// Tokens of other modalities inside a block are dropped; an unclosed
    /// final block is kept.
    pub fn extract(&self, m: Modality, ids: &[u32]) -> Vec<Vec<u32>> {
        let mut out = vec![];
        let mut cur: Option<Vec<u32>> = None;
        for &id in ids {
            if id == self.start(m) {
                if let Some(c) = cur.take() {
                    out.push(c);
                }
                cur = Some(vec![]);
            } else if id == self.end(m) {
                if let Some(c) = cur.take() {
                    out.push(c);
                }
            } else if let (Some(c), Ok(Token::Local(mm, k))) = (cur.as_mut(), self.token(id)) {
                if mm == m {
                    c.push(k);
                }
            }
        }
        out.extend(cur);
        out
    }

    pub fn special_names(&self) -> Vec<String> {
        (self.specials_offset()..self.total_size)
            .map(|id| self.render(id).expect("in range"))
            .collect()
    }

    /// SHA-256 over the canonical JSON layout.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(&(&self.segments, self.total_size, &self.text_tokens)).expect("serializable");
        hex::encode(Sha256::digest(body))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(
            path,
            &Manifest {
                segments: &self.segments,
                specials: self.special_names(),
                total_size: self.total_size,
                text_tokens: &self.text_tokens,
                hash: self.hash(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            segments: Vec<Segment>,
            total_size: u32,
            text_tokens: Option<Vec<String>>,
            hash: String,
        }
        let raw: Raw = store::read_json(path)?;
        let mut sizes = [0usize; 6];
        for (i, s) in raw.segments.iter().enumerate().take(6) {
            sizes[i] = s.size as usize;
        }
        let mut v = Self::build(sizes)?;
        v.text_tokens = raw.text_tokens;
        if v.segments != raw.segments || v.total_size != raw.total_size {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "segment table is not in canonical layout".into(),
            });
        }
        store::check_vocab_hash(&v.hash(), Some(&raw.hash))?;
        Ok(v)
    }
}
