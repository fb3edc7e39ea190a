use std::path::Path;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mixture::MixtureSchedule;
use crate::error::{Error, Result};
use crate::model::BYTE_VOCAB;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

const _: () = assert!(PAD as usize + 1 == BYTE_VOCAB);

/// Wraps a document as `BOS bytes EOS`.
pub fn encode(doc: &[u8]) -> Vec<u32> {
    let mut out = Vec::with_capacity(doc.len() + 2);
    out.push(BOS);
    out.extend(doc.iter().map(|&b| b as u32));
    out.push(EOS);
    out
}

/// Reads a raw byte corpus with one document per line, skipping empty lines.
pub fn read_documents(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path)?;
    let docs: Vec<Vec<u8>> = bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(<[u8]>::to_vec)
        .collect();
    if docs.is_empty() {
        return Err(Error::Input(format!("{} has no documents", path.display())));
    }
    Ok(docs)
}

/// Concatenated token stream of one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSource {
    stream: Vec<u32>,
}

impl TokenSource {
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Result<Self> {
        let stream: Vec<u32> = docs.iter().flat_map(|d| encode(d.as_ref())).collect();
        if stream.is_empty() {
            return Err(Error::Input("corpus has no documents".into()));
        }
        Ok(Self { stream })
    }

    /// Raw byte file, one document per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_documents(&read_documents(path)?)
    }

    pub fn len(&self) -> usize {
        self.stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.stream
    }

    /// `len + 1` consecutive tokens from a random offset, wrapping around.
    pub fn window<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<u32> {
        let start = rng.random_range(0..self.stream.len());
        (0..=len)
            .map(|i| self.stream[(start + i) % self.stream.len()])
            .collect()
    }
}

/// Counter-based sequence stream: sequence `i` always draws from the same
/// random stream, so the data order does not depend on the batch size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceStream {
    pub seed: u64,
    pub next_index: u64,
}

impl SequenceStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, next_index: 0 }
    }

    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    /// Dataset id of every sequence.
    pub provenance: Vec<String>,
    pub stage: usize,
}

impl Batch {
    pub fn n_tokens(&self) -> usize {
        self.inputs.iter().map(Vec::len).sum()
    }
}

/// Draws `n_seqs` sequences under the stage active at `tokens_seen`.
pub fn sample_batch(
    mixture: &MixtureSchedule,
    tokens_seen: f64,
    stream: &mut SequenceStream,
    sources: &IndexMap<String, TokenSource>,
    n_seqs: usize,
    seq_len: usize,
) -> Result<Batch> {
    if n_seqs == 0 || seq_len == 0 {
        return Err(Error::Config("batch needs at least one sequence of length ≥ 1".into()));
    }
    let stage = mixture.stage_index(tokens_seen);
    let weighted: Vec<(&String, f64)> = mixture.stages[stage]
        .weights
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, w)| (k, *w))
        .collect();
    let mut picked = Vec::with_capacity(weighted.len());
    for (id, _) in &weighted {
        let src = sources.get(*id).ok_or_else(|| {
            Error::Config(format!("dataset {id} has weight in stage {stage} but no source"))
        })?;
        picked.push(src);
    }
    let dist = WeightedIndex::new(weighted.iter().map(|(_, w)| *w))
        .map_err(|e| Error::Config(format!("stage {stage} weights: {e}")))?;
    let mut batch = Batch {
        inputs: Vec::with_capacity(n_seqs),
        targets: Vec::with_capacity(n_seqs),
        provenance: Vec::with_capacity(n_seqs),
        stage,
    };
    for _ in 0..n_seqs {
        let mut rng = stream.rng_for(stream.next_index);
        stream.next_index += 1;
        let d = dist.sample(&mut rng);
        let window = picked[d].window(&mut rng, seq_len);
        batch.inputs.push(window[..seq_len].to_vec());
        batch.targets.push(window[1..].to_vec());
        batch.provenance.push(weighted[d].0.clone());
    }
    Ok(batch)
}

const SUBJECTS: &[&str] = &["the cat", "a dog", "the bird", "my friend", "the old man", "a child"];
const VERBS: &[&str] = &["sees", "likes", "finds", "follows", "helps", "calls"];
const OBJECTS: &[&str] = &["the ball", "a tree", "the river", "some bread", "the red box", "a song"];
const ENDINGS: &[&str] = &["today", "at night", "in the park", "again", "near the house", "slowly"];

/// Deterministic toy English: short templated sentences over a small
/// lexicon, so a small model can learn most of the structure quickly.
pub fn toy_corpus(seed: u64, n_docs: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|_| {
            let n_sent = rng.random_range(1..=3);
            let mut doc = String::new();
            for s in 0..n_sent {
                if s > 0 {
                    doc.push(' ');
                }
                let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
                doc.push_str(pick(&mut rng, SUBJECTS));
                doc.push(' ');
                doc.push_str(pick(&mut rng, VERBS));
                doc.push(' ');
                doc.push_str(pick(&mut rng, OBJECTS));
                doc.push(' ');
                doc.push_str(pick(&mut rng, ENDINGS));
                doc.push('.');
            }
            doc.into_bytes()
        })
        .collect()
}

/// Toy corpus re-encoded into a private 27-symbol alphabet, one per
/// language index. Languages with different indices share no bytes.
pub fn synthetic_language(language: usize, seed: u64, n_docs: usize) -> Result<Vec<Vec<u8>>> {
    const ALPHABET: usize = 27;
    if language >= 256 / ALPHABET {
        return Err(Error::Config(format!(
            "language index {language} exceeds the {} available alphabets",
            256 / ALPHABET
        )));
    }
    let base = (language * ALPHABET) as u8;
    let map = |b: u8| match b {
        b'a'..=b'z' => base + (b - b'a'),
        _ => base + 26,
    };
    Ok(toy_corpus(seed, n_docs)
        .into_iter()
        .map(|d| d.into_iter().map(map).collect())
        .collect())
}
