//! Parallel corpus loading, tokenization, vocabularies and batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub pair_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub pairs: Vec<SentencePair>,
}

impl CorpusSplit {
    /// Builds a split from raw sentence pairs; pair ids are positions.
    pub fn from_raw<S: AsRef<str>>(name: SplitName, pairs: &[(S, S)]) -> Result<Self> {
        let mut out = Vec::with_capacity(pairs.len());
        for (i, (s, t)) in pairs.iter().enumerate() {
            let source_tokens = tokenize(s.as_ref());
            let target_tokens = tokenize(t.as_ref());
            if source_tokens.is_empty() || target_tokens.is_empty() {
                return Err(Error::HalfBlankPair { line: i + 1 });
            }
            out.push(SentencePair {
                source_tokens,
                target_tokens,
                pair_id: i,
            });
        }
        Ok(Self { name, pairs: out })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Splits on whitespace, lowercases, and peels leading and trailing
/// non-alphanumeric characters off each chunk as single-character tokens.
/// Interior punctuation (`u.n`, `t-shirt`, `don't`) stays attached.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in raw.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric());
        let Some(start) = start else {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).unwrap() + 1;
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        out.push(chars[start..end].iter().collect());
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut segments: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    for (i, seg) in segments.into_iter().enumerate() {
        let seg = seg.strip_suffix(b"\r").unwrap_or(seg);
        let line = std::str::from_utf8(seg).map_err(|_| Error::InvalidUtf8 {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

/// Reads two line-aligned files into a split. Pair ids are zero-based line
/// numbers; lines blank on both sides are dropped.
pub fn load_parallel_corpus(
    source_path: impl AsRef<Path>,
    target_path: impl AsRef<Path>,
    name: SplitName,
) -> Result<CorpusSplit> {
    let src = read_lines(source_path.as_ref())?;
    let tgt = read_lines(target_path.as_ref())?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let source_tokens = tokenize(s);
        let target_tokens = tokenize(t);
        match (source_tokens.is_empty(), target_tokens.is_empty()) {
            (true, true) => continue,
            (false, false) => pairs.push(SentencePair {
                source_tokens,
                target_tokens,
                pair_id: i,
            }),
            _ => return Err(Error::HalfBlankPair { line: i + 1 }),
        }
    }
    Ok(CorpusSplit { name, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    /// Builds a vocabulary from token frequencies: tokens seen at least
    /// `min_freq` times get ids from 4 upward by descending frequency, ties
    /// broken lexicographically.
    pub fn build(split: &CorpusSplit, side: Side, min_freq: usize) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::EmptySplit);
        }
        if min_freq == 0 {
            return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in &split.pairs {
            let tokens = match side {
                Side::Source => &p.source_tokens,
                Side::Target => &p.target_tokens,
            };
            for t in tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !RESERVED_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut vocab = Self::with_reserved();
        for (t, _) in ranked {
            vocab.push(t.to_string());
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String], add_bos_eos: bool) -> Vec<u32> {
        encode_tokens(tokens, self, add_bos_eos)
    }

    /// Maps ids back to tokens, skipping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    /// `token<TAB>id` lines in id order, reserved entries included.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            s.push_str(t);
            s.push('\t');
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut vocab = Self::with_reserved();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("vocab line {}: no tab", i + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("vocab line {}: bad id", i + 1)))?;
            if id < NUM_RESERVED {
                if RESERVED_TOKENS[id] != tok {
                    return Err(Error::InvalidArgument(format!(
                        "vocab line {}: reserved id {id} must be {}",
                        i + 1,
                        RESERVED_TOKENS[id]
                    )));
                }
                continue;
            }
            if id != vocab.len() || vocab.token_to_id.contains_key(tok) {
                return Err(Error::InvalidArgument(format!(
                    "vocab line {}: ids must be dense and tokens unique",
                    i + 1
                )));
            }
            vocab.push(tok.to_string());
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

pub fn build_vocabulary(split: &CorpusSplit, side: Side, min_freq: usize) -> Result<Vocabulary> {
    Vocabulary::build(split, side, min_freq)
}

pub fn encode_tokens(tokens: &[String], vocab: &Vocabulary, add_bos_eos: bool) -> Vec<u32> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    if add_bos_eos {
        ids.push(BOS);
    }
    ids.extend(tokens.iter().map(|t| vocab.id(t).unwrap_or(UNK)));
    if add_bos_eos {
        ids.push(EOS);
    }
    ids
}

/// A split converted to ids: sources plain, targets wrapped in BOS/EOS.
#[derive(Debug, Clone)]
pub struct EncodedSplit {
    pub pair_ids: Vec<usize>,
    pub sources: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl EncodedSplit {
    pub fn new(split: &CorpusSplit, src: &Vocabulary, tgt: &Vocabulary) -> Self {
        Self {
            pair_ids: split.pairs.iter().map(|p| p.pair_id).collect(),
            sources: split
                .pairs
                .iter()
                .map(|p| src.encode(&p.source_tokens, false))
                .collect(),
            targets: split
                .pairs
                .iter()
                .map(|p| tgt.encode(&p.target_tokens, true))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }
}

/// One mini-batch, padded with PAD to the longest sentence per side.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Positions into the originating [`EncodedSplit`].
    pub indices: Vec<usize>,
    pub pair_ids: Vec<usize>,
    pub source: Vec<Vec<u32>>,
    pub target: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `true` where the id is not PAD.
    pub fn mask(rows: &[Vec<u32>]) -> Vec<Vec<bool>> {
        rows.iter()
            .map(|r| r.iter().map(|&id| id != PAD).collect())
            .collect()
    }
}

fn pad_rows(rows: Vec<&[u32]>) -> Vec<Vec<u32>> {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    rows.into_iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(width, PAD);
            v
        })
        .collect()
}

/// Shuffles the split with a ChaCha8 stream seeded by `seed` and yields
/// padded batches; every pair appears exactly once.
pub fn batch_iterator(
    split: &EncodedSplit,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| Batch {
        pair_ids: indices.iter().map(|&i| split.pair_ids[i]).collect(),
        source: pad_rows(indices.iter().map(|&i| split.sources[i].as_slice()).collect()),
        target: pad_rows(indices.iter().map(|&i| split.targets[i].as_slice()).collect()),
        indices,
    }))
}

/// Strips trailing PAD ids.
pub fn unpad(ids: &[u32]) -> &[u32] {
    let end = ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
    &ids[..end]
}
