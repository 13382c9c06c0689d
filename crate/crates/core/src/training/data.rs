//! Byte-level corpus: tokenization, a labelled synthetic multi-domain
//! generator, and deterministic train/valid batching.

use std::fs;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::config::DataConfig;
use crate::error::{LabError, Result};
use crate::model::TokenBatch;

pub const BYTE_VOCAB: usize = 256;

/// Byte `b` becomes token `b`.
pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| usize::from(b)).collect()
}

pub fn decode_tokens(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| u8::try_from(i).map_err(|_| LabError::Input(format!("token {i} is not a byte"))))
        .collect()
}

/// One labelled stream of bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub label: String,
    pub bytes: Vec<u8>,
}

pub const SYNTHETIC_DOMAINS: [&str; 4] = ["prose", "arithmetic", "code", "genome"];

fn lexicon(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "th", "w", "st",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ea"];
    (0..size)
        .map(|_| {
            let syllables = rng.random_range(1..=3);
            (0..syllables)
                .map(|_| {
                    let mut s = String::from(ONSETS[rng.random_range(0..ONSETS.len())]);
                    s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
                    s
                })
                .collect()
        })
        .collect()
}

fn prose(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let words = lexicon(rng, 400);
    let zipf = Zipf::new(words.len() as f64, 1.1).expect("valid zipf");
    let mut out = String::with_capacity(n + 64);
    while out.len() < n {
        let len = rng.random_range(4..12);
        for i in 0..len {
            let w = &words[zipf.sample(rng) as usize - 1];
            if i == 0 {
                let mut c = w.chars();
                out.extend(c.next().map(|f| f.to_ascii_uppercase()));
                out.push_str(c.as_str());
            } else {
                out.push(' ');
                out.push_str(w);
            }
        }
        out.push_str(if rng.random_bool(0.2) { ", and " } else { ". " });
    }
    out.truncate(n);
    out.into_bytes()
}

fn arithmetic(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut out = String::with_capacity(n + 32);
    while out.len() < n {
        let a = rng.random_range(0..500u32);
        let b = rng.random_range(0..500u32);
        let line = match rng.random_range(0..3) {
            0 => format!("{a}+{b}={}\n", a + b),
            1 => format!("{}-{b}={a}\n", a + b),
            _ => format!("{}*{}={}\n", a % 20, b % 20, (a % 20) * (b % 20)),
        };
        out.push_str(&line);
    }
    out.truncate(n);
    out.into_bytes()
}

fn code(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut out = String::with_capacity(n + 64);
    while out.len() < n {
        let f = rng.random_range(0..40);
        let (x, y, c) = (rng.random_range(0..8), rng.random_range(0..8), rng.random_range(1..10));
        let line = match rng.random_range(0..4) {
            0 => format!("fn f{f}(v{x}) {{\n    return v{x} * {c};\n}}\n"),
            1 => format!("let v{x} = v{y} + {c};\n"),
            2 => format!("if (v{x} > {c}) {{ v{y} = v{x}; }}\n"),
            _ => format!("for i in 0..{c} {{ v{x} += f{f}(i); }}\n"),
        };
        out.push_str(&line);
    }
    out.truncate(n);
    out.into_bytes()
}

fn genome(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    const BASES: [u8; 4] = *b"ACGT";
    let motifs: Vec<Vec<u8>> = (0..6)
        .map(|_| {
            (0..rng.random_range(4..9))
                .map(|_| BASES[rng.random_range(0..4)])
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n + 64);
    let mut id = 0u32;
    while out.len() < n {
        out.extend_from_slice(format!("<seq id={id}>").as_bytes());
        for _ in 0..rng.random_range(3..8) {
            if rng.random_bool(0.5) {
                out.extend_from_slice(&motifs[rng.random_range(0..motifs.len())]);
            } else {
                out.extend((0..rng.random_range(2..6)).map(|_| BASES[rng.random_range(0..4)]));
            }
        }
        out.extend_from_slice(b"</seq>\n");
        id += 1;
    }
    out.truncate(n);
    out
}

/// Four labelled synthetic domains of `bytes_per_domain` bytes each.
pub fn synthetic_corpus(bytes_per_domain: usize, seed: u64) -> Vec<Source> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let gens: [fn(&mut ChaCha8Rng, usize) -> Vec<u8>; 4] = [prose, arithmetic, code, genome];
    SYNTHETIC_DOMAINS
        .iter()
        .zip(gens)
        .map(|(label, g)| Source {
            label: label.to_string(),
            bytes: g(&mut rng, bytes_per_domain),
        })
        .collect()
}

/// Next-token batch: inputs, aligned targets and the domain of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
    pub domains: Vec<usize>,
}

/// Takes one item from each group in turn until all are exhausted.
fn round_robin<T: Copy>(groups: &[Vec<T>]) -> Vec<T> {
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|r| groups.iter().filter_map(move |g| g.get(r).copied()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Chunk {
    source: usize,
    start: usize,
}

/// Non-overlapping `context_len + 1` byte windows split per source into
/// disjoint train and valid sets, both shuffled from the seed.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    sources: Vec<Source>,
    context_len: usize,
    train: Vec<Chunk>,
    valid: Vec<Chunk>,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    balanced: bool,
}

impl CorpusStream {
    pub fn new(sources: Vec<Source>, context_len: usize, valid_fraction: f64, seed: u64) -> Result<Self> {
        if context_len == 0 {
            return Err(LabError::config("model.context_len", "must be positive"));
        }
        let window = context_len + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut valid) = (Vec::new(), Vec::with_capacity(sources.len()));
        for (s, src) in sources.iter().enumerate() {
            let mut chunks: Vec<Chunk> = (0..src.bytes.len() / window)
                .map(|i| Chunk {
                    source: s,
                    start: i * window,
                })
                .collect();
            if chunks.len() < 2 {
                return Err(LabError::Input(format!(
                    "source {:?} has {} bytes, need at least {}",
                    src.label,
                    src.bytes.len(),
                    2 * window
                )));
            }
            chunks.shuffle(&mut rng);
            let n_valid = ((chunks.len() as f64 * valid_fraction).ceil() as usize).clamp(1, chunks.len() - 1);
            valid.push(chunks[..n_valid].to_vec());
            train.extend_from_slice(&chunks[n_valid..]);
        }
        let mut stream = Self {
            sources,
            context_len,
            train,
            // Mixed domains, so every validation batch covers all of them.
            valid: round_robin(&valid),
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            balanced: false,
        };
        stream.reshuffle();
        Ok(stream)
    }

    /// Synthetic corpus or the configured files.
    pub fn from_config(cfg: &DataConfig, context_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sources = if cfg.sources.is_empty() {
            synthetic_corpus(cfg.synthetic_bytes, seed)
        } else {
            cfg.sources
                .iter()
                .map(|p| {
                    Ok(Source {
                        label: p
                            .file_stem()
                            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into()),
                        bytes: fs::read(p).map_err(|e| LabError::io(p, e))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self::new(sources, context_len, cfg.valid_fraction, seed)?.with_balanced(cfg.balanced))
    }

    /// Interleave domains round-robin within each epoch so every batch
    /// carries a near-equal domain mix.
    pub fn with_balanced(mut self, balanced: bool) -> Self {
        self.balanced = balanced;
        self.epoch = 0;
        self.reshuffle();
        self
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x7261_6e64).wrapping_add(self.epoch));
        self.order = (0..self.train.len()).collect();
        self.order.shuffle(&mut rng);
        if self.balanced {
            let mut per: Vec<Vec<usize>> = vec![Vec::new(); self.sources.len()];
            for &i in &self.order {
                per[self.train[i].source].push(i);
            }
            self.order = round_robin(&per);
        }
        self.cursor = 0;
    }

    pub fn domain_labels(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.label.as_str()).collect()
    }

    pub fn train_chunks(&self) -> usize {
        self.train.len()
    }

    pub fn valid_chunks(&self) -> usize {
        self.valid.len()
    }

    fn batch_of(&self, chunks: &[Chunk]) -> Result<Batch> {
        let mut ids = Vec::with_capacity(chunks.len() * self.context_len);
        let mut targets = Vec::with_capacity(ids.capacity());
        for c in chunks {
            let w = &self.sources[c.source].bytes[c.start..c.start + self.context_len + 1];
            ids.extend(tokenize_bytes(&w[..self.context_len]));
            targets.extend(tokenize_bytes(&w[1..]));
        }
        Ok(Batch {
            inputs: TokenBatch::new(chunks.len(), self.context_len, ids)?,
            targets,
            domains: chunks.iter().map(|c| c.source).collect(),
        })
    }

    /// Next training batch; starts a freshly shuffled epoch when exhausted.
    pub fn next_train(&mut self, batch_size: usize) -> Result<Batch> {
        let mut picked = Vec::with_capacity(batch_size);
        while picked.len() < batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            picked.push(self.train[self.order[self.cursor]]);
            self.cursor += 1;
        }
        self.batch_of(&picked)
    }

    /// Up to `count` validation batches in a fixed order; the first is the
    /// calibration batch.
    pub fn valid_batches(&self, batch_size: usize, count: usize) -> Result<Vec<Batch>> {
        self.valid
            .chunks(batch_size)
            .filter(|c| c.len() == batch_size)
            .take(count)
            .map(|c| self.batch_of(c))
            .collect()
    }

    /// Validation batches restricted to one domain.
    pub fn valid_batches_for(&self, domain: usize, batch_size: usize, count: usize) -> Result<Vec<Batch>> {
        let chunks: Vec<Chunk> = self.valid.iter().copied().filter(|c| c.source == domain).collect();
        chunks
            .chunks(batch_size)
            .filter(|c| c.len() == batch_size)
            .take(count)
            .map(|c| self.batch_of(c))
            .collect()
    }

    #[cfg(test)]
    fn spans(&self) -> (Vec<Chunk>, Vec<Chunk>) {
        (self.train.clone(), self.valid.clone())
    }
}
