//! Plain-text corpus handling: vocabulary, encoding, client sharding and
//! BPTT batching.

pub mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;

/// Whitespace tokenization; every line end becomes [`EOS`].
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in text.lines() {
        let before = out.len();
        out.extend(line.split_whitespace());
        if out.len() > before {
            out.push(EOS);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent tokens (ties by first
    /// appearance) alongside [`UNK`] and [`EOS`].
    pub fn build<S: AsRef<str>>(tokens: &[S], max_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot build a vocabulary from empty text".into()));
        }
        if max_size < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary size {max_size} leaves no room for <unk>/<eos>")));
        }
        // (count, first position) per token.
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, tok) in tokens.iter().enumerate() {
            let tok = tok.as_ref();
            if tok == UNK || tok == EOS {
                continue;
            }
            stats.entry(tok).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> = stats.into_iter().map(|(t, (c, p))| (t, c, p)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 2);

        let mut id_to_token = vec![UNK.to_string(), EOS.to_string()];
        id_to_token.extend(ranked.into_iter().map(|(t, _, _)| t.to_string()));
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], split: Split) -> TokenStream {
        TokenStream { ids: tokens.iter().map(|t| self.id(t.as_ref())).collect(), split }
    }

    pub fn encode_text(&self, text: &str, split: Split) -> TokenStream {
        self.encode(&tokenize(text), split)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<TokenId>,
    pub split: Split,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Train/valid/test streams encoded against the training vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: TokenStream,
    pub valid: TokenStream,
    pub test: TokenStream,
}

impl Corpus {
    pub fn from_texts(train: &str, valid: &str, test: &str, max_vocab: usize) -> Result<Self> {
        let train_tokens = tokenize(train);
        let vocab = Vocabulary::build(&train_tokens, max_vocab)?;
        Ok(Corpus {
            train: vocab.encode(&train_tokens, Split::Train),
            valid: vocab.encode_text(valid, Split::Valid),
            test: vocab.encode_text(test, Split::Test),
            vocab,
        })
    }

    pub fn load(train: &Path, valid: &Path, test: &Path, max_vocab: usize) -> Result<Self> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
        Self::from_texts(&read(train)?, &read(valid)?, &read(test)?, max_vocab)
    }

    pub fn stream(&self, split: Split) -> &TokenStream {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Training stream dealt into per-client shards of whole blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<TokenId>>,
    /// Block indices (into the source stream) owned by each shard, in order.
    pub blocks: Vec<Vec<usize>>,
    pub block_len: usize,
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }
}

/// Cuts `stream` into `block_len` blocks, shuffles them and deals them
/// round-robin to `k` shards. A tail shorter than one block is dropped.
pub fn partition_iid(stream: &TokenStream, k: usize, block_len: usize, rng: &mut SeededRng) -> Result<Partition> {
    if k == 0 || block_len == 0 {
        return Err(Error::InvalidArgument("partition needs k >= 1 and block_len >= 1".into()));
    }
    let required = k * block_len;
    if stream.len() < required {
        return Err(Error::InsufficientData {
            what: format!("partition into {k} shards of {block_len}-token blocks"),
            required,
            actual: stream.len(),
        });
    }
    let n_blocks = stream.len() / block_len;
    let mut order: Vec<usize> = (0..n_blocks).collect();
    rng.shuffle(&mut order);

    let mut blocks = vec![Vec::new(); k];
    for (i, b) in order.into_iter().enumerate() {
        blocks[i % k].push(b);
    }
    let shards = blocks
        .iter()
        .map(|owned| owned.iter().flat_map(|&b| stream.ids[b * block_len..(b + 1) * block_len].iter().copied()).collect())
        .collect();
    Ok(Partition { shards, blocks, block_len, seed: rng.seed() })
}

/// One BPTT window: `batch_size` rows of `seq_len` tokens, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

impl Batch {
    pub fn input(&self, b: usize, t: usize) -> TokenId {
        self.inputs[b * self.seq_len + t]
    }

    pub fn target(&self, b: usize, t: usize) -> TokenId {
        self.targets[b * self.seq_len + t]
    }
}

/// Lays the shard out as `batch_size` contiguous rows and slices
/// consecutive `bptt_len` windows; targets are inputs shifted by one.
pub fn batchify(shard: &[TokenId], batch_size: usize, bptt_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || bptt_len == 0 {
        return Err(Error::InvalidArgument("batch size and bptt length must be positive".into()));
    }
    let required = batch_size * (bptt_len + 1);
    if shard.len() < required {
        return Err(Error::InsufficientData {
            what: format!("{batch_size} rows of {bptt_len}-token windows"),
            required,
            actual: shard.len(),
        });
    }
    let row_len = shard.len() / batch_size;
    let n_batches = (row_len - 1) / bptt_len;
    let batches = (0..n_batches)
        .map(|i| {
            let start = i * bptt_len;
            let mut inputs = Vec::with_capacity(batch_size * bptt_len);
            let mut targets = Vec::with_capacity(batch_size * bptt_len);
            for b in 0..batch_size {
                let row = &shard[b * row_len..(b + 1) * row_len];
                inputs.extend_from_slice(&row[start..start + bptt_len]);
                targets.extend_from_slice(&row[start + 1..start + bptt_len + 1]);
            }
            Batch { batch_size, seq_len: bptt_len, inputs, targets }
        })
        .collect();
    Ok(batches)
}
