//! Pre-tokenized corpora and their on-disk format.
//!
//! A corpus file is a 16-byte little-endian header
//!
//! ```text
//! offset 0   b"TCRP"
//! offset 4   u32 format version (1)
//! offset 8   u32 vocab_size
//! offset 12  u32 token count N
//! ```
//!
//! followed by `N` little-endian `u32` token ids. The file carries one flat
//! token stream; loading cuts it into consecutive windows of the requested
//! sequence length and drops the remainder.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CORPUS_MAGIC: &[u8; 4] = b"TCRP";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCorpus {
    seq_len: usize,
    vocab_size: usize,
    sequences: Vec<Vec<u32>>,
}

impl TokenCorpus {
    pub fn new(seq_len: usize, vocab_size: usize, sequences: Vec<Vec<u32>>) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::InvalidArgument(
                "sequence length must be positive".into(),
            ));
        }
        for (i, s) in sequences.iter().enumerate() {
            if s.len() != seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence {i} has {} tokens, expected {seq_len}",
                    s.len()
                )));
            }
            if let Some((position, &id)) = s
                .iter()
                .enumerate()
                .find(|(_, &id)| id as usize >= vocab_size)
            {
                return Err(Error::TokenOutOfRange {
                    id,
                    position: i * seq_len + position,
                    vocab_size,
                });
            }
        }
        Ok(Self {
            seq_len,
            vocab_size,
            sequences,
        })
    }

    /// Consecutive non-overlapping windows of `seq_len` over `stream`; a
    /// trailing remainder shorter than `seq_len` is discarded.
    pub fn from_stream(stream: &[u32], seq_len: usize, vocab_size: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::InvalidArgument(
                "sequence length must be positive".into(),
            ));
        }
        let sequences = stream.chunks_exact(seq_len).map(<[u32]>::to_vec).collect();
        Self::new(seq_len, vocab_size, sequences)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn stream(&self) -> Vec<u32> {
        self.sequences.concat()
    }

    /// Sub-corpus of the given sequence indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> TokenCorpus {
        TokenCorpus {
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}

pub fn encode_stream(stream: &[u32], vocab_size: usize) -> Result<Vec<u8>> {
    if let Some((position, &id)) = stream
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size,
        });
    }
    let vocab = u32::try_from(vocab_size)
        .map_err(|_| Error::InvalidArgument(format!("vocab_size {vocab_size} exceeds u32")))?;
    let count = u32::try_from(stream.len())
        .map_err(|_| Error::InvalidArgument("token stream exceeds u32 length".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * stream.len());
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&vocab.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for &id in stream {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

/// Parses a corpus file image into `(vocab_size, token stream)`.
pub fn decode_stream(bytes: &[u8], path: &Path) -> Result<(usize, Vec<u32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != CORPUS_MAGIC {
        return Err(Error::format(path, "bad magic, expected TCRP"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CORPUS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let vocab_size = word(8) as usize;
    let count = word(12) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * count {
        return Err(Error::format(
            path,
            format!(
                "header declares {count} tokens but body holds {} bytes",
                body.len()
            ),
        ));
    }
    let mut stream = Vec::with_capacity(count);
    for (position, chunk) in body.chunks_exact(4).enumerate() {
        let id = u32::from_le_bytes(chunk.try_into().unwrap());
        if id as usize >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab_size,
            });
        }
        stream.push(id);
    }
    Ok((vocab_size, stream))
}

pub fn save_corpus(corpus: &TokenCorpus, path: &Path) -> Result<()> {
    let bytes = encode_stream(&corpus.stream(), corpus.vocab_size())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path, seq_len: usize) -> Result<TokenCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (vocab_size, stream) = decode_stream(&bytes, path)?;
    TokenCorpus::from_stream(&stream, seq_len, vocab_size)
}

/// Picks `n` sequences uniformly without replacement, returned in ascending
/// index order. Fully determined by `seed`.
pub fn sample_calibration(corpus: &TokenCorpus, n: usize, seed: u64) -> Result<TokenCorpus> {
    if n == 0 || n > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} calibration sequences from {}",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    Ok(corpus.select(&picked))
}
