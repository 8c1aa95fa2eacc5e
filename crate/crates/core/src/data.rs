//! Corpus ingestion: tokenization, vocabulary, pretrained vectors, batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<oov>";
pub const PAD_ID: u32 = 0;
pub const OOV_ID: u32 = 1;

/// Lowercase and split into alphanumeric runs; every other non-whitespace
/// character becomes its own token ("water." -> ["water", "."]).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() {
            run.push(ch);
        } else {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !run.is_empty() {
        out.push(run);
    }
    out
}

/// One sentence pair with a class index into [`Dataset::label_names`].
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: u32,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<LabeledPair>,
    pub label_names: Vec<String>,
    /// Lines kept / dropped during loading (dropped = unlabeled rows).
    pub kept: usize,
    pub dropped: usize,
}

pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];
pub const PARAPHRASE_LABELS: [&str; 2] = ["not_duplicate", "duplicate"];

#[derive(Deserialize)]
struct NliRow {
    gold_label: String,
    sentence1: String,
    sentence2: String,
}

/// Load a JSONL inference corpus. Rows whose gold label is "-" (annotators
/// disagreed) are dropped and counted; any other unknown label is an error.
pub fn load_nli_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| open_err(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: NliRow = serde_json::from_str(&line)
            .map_err(|e| parse_err(path, lineno, &e.to_string()))?;
        if row.gold_label == "-" {
            dropped += 1;
            continue;
        }
        let label = NLI_LABELS
            .iter()
            .position(|&l| l == row.gold_label)
            .ok_or_else(|| parse_err(path, lineno, &format!("unknown label {:?}", row.gold_label)))?;
        pairs.push(build_pair(path, lineno, &row.sentence1, &row.sentence2, label as u32)?);
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable pairs",
            path.display()
        )));
    }
    Ok(Dataset {
        kept: pairs.len(),
        pairs,
        label_names: NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        dropped,
    })
}

/// Load a tab-separated paraphrase corpus:
/// `id  qid1  qid2  question1  question2  is_duplicate` (header optional).
pub fn load_paraphrase_tsv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| open_err(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if lineno == 1 && cols.last() == Some(&"is_duplicate") {
            continue; // header
        }
        if cols.len() != 6 {
            return Err(parse_err(
                path,
                lineno,
                &format!("expected 6 tab-separated columns, got {}", cols.len()),
            ));
        }
        let label: u32 = match cols[5].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    path,
                    lineno,
                    &format!("is_duplicate must be 0 or 1, got {other:?}"),
                ))
            }
        };
        pairs.push(build_pair(path, lineno, cols[3], cols[4], label)?);
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: no usable pairs", path.display())));
    }
    Ok(Dataset {
        kept: pairs.len(),
        pairs,
        label_names: PARAPHRASE_LABELS.iter().map(|s| s.to_string()).collect(),
        dropped: 0,
    })
}

/// Pick a loader from the file extension (.jsonl -> NLI, .tsv -> paraphrase).
pub fn load_pairs(path: &Path) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => load_nli_jsonl(path),
        Some("tsv") => load_paraphrase_tsv(path),
        other => Err(Error::Data(format!(
            "{}: cannot infer corpus format from extension {other:?} (expected .jsonl or .tsv)",
            path.display()
        ))),
    }
}

fn build_pair(
    path: &Path,
    lineno: usize,
    premise: &str,
    hypothesis: &str,
    label: u32,
) -> Result<LabeledPair> {
    let premise = tokenize(premise);
    let hypothesis = tokenize(hypothesis);
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(parse_err(path, lineno, "sentence has no tokens"));
    }
    Ok(LabeledPair {
        premise,
        hypothesis,
        label,
    })
}

fn open_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

// ── Vocabulary ──────────────────────────────────────────────────────────

/// Token table with two reserved slots: id 0 pads, id 1 catches unknowns.
/// Corpus tokens are sorted so the table is independent of pair order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from training pairs, keeping tokens seen at least `min_freq` times.
    pub fn build(pairs: &[LabeledPair], min_freq: usize) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in pairs {
            for tok in p.premise.iter().chain(p.hypothesis.iter()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<&str> = counts
            .iter()
            .filter(|(_, &c)| c >= min_freq)
            .map(|(&t, _)| t)
            .collect();
        kept.sort_unstable();
        let mut tokens = Vec::with_capacity(kept.len() + 2);
        tokens.push(PAD_TOKEN.to_string());
        tokens.push(OOV_TOKEN.to_string());
        tokens.extend(kept.into_iter().map(str::to_string));
        Vocab::from_tokens_unchecked(tokens)
    }

    /// Rebuild from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != OOV_TOKEN {
            return Err(Error::Checkpoint(
                "vocabulary must start with the pad and oov tokens".into(),
            ));
        }
        Ok(Vocab::from_tokens_unchecked(tokens))
    }

    fn from_tokens_unchecked(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds pad + oov
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

// ── Pretrained vectors ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingStats {
    pub found: usize,
    pub missing: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Gaussian(0, 0.1) row seeded by the token text, so a token's fallback
/// vector doesn't depend on vocabulary order.
fn seeded_row<T: Scalar>(token: &str, dim: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ seed);
    let normal = rand_distr::Normal::new(0.0f64, 0.1).expect("valid std");
    (0..dim)
        .map(|_| T::from_f64(rand_distr::Distribution::sample(&normal, &mut rng)))
        .collect()
}

/// Build the `V x dim` embedding matrix: row 0 (padding) is zero, every
/// other row starts as a seeded Gaussian draw, and rows whose token appears
/// in the vectors file are overwritten with the file's values parsed at
/// full precision. Returns the matrix and found/missing counts over the
/// non-pad vocabulary.
pub fn init_embedding<T: Scalar>(
    vocab: &Vocab,
    dim: usize,
    vectors: Option<&Path>,
    seed: u64,
) -> Result<(Vec<T>, EmbeddingStats)> {
    if dim == 0 {
        return Err(Error::Config("embedding dim must be positive".into()));
    }
    let v = vocab.len();
    let mut matrix = vec![T::zero(); v * dim];
    for (i, tok) in vocab.tokens().iter().enumerate().skip(1) {
        matrix[i * dim..(i + 1) * dim].copy_from_slice(&seeded_row(tok, dim, seed));
    }
    let mut found_rows = vec![false; v];
    if let Some(path) = vectors {
        let file = File::open(path).map_err(|e| open_err(path, e))?;
        let reader = BufReader::new(file);
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| parse_err(path, lineno, "blank vector line"))?;
            let Some(&id) = vocab.index.get(token) else {
                continue; // token outside our vocabulary
            };
            let id = id as usize;
            let mut count = 0;
            for (j, val) in parts.enumerate() {
                if j >= dim {
                    count = j + 1;
                    break;
                }
                matrix[id * dim + j] = val.parse::<T>().map_err(|_| {
                    parse_err(path, lineno, &format!("bad float {val:?}"))
                })?;
                count = j + 1;
            }
            if count != dim {
                return Err(parse_err(
                    path,
                    lineno,
                    &format!("expected {dim} values, got {count}"),
                ));
            }
            found_rows[id] = true;
        }
    }
    let found = found_rows.iter().filter(|&&f| f).count();
    Ok((
        matrix,
        EmbeddingStats {
            found,
            missing: v - 1 - found,
        },
    ))
}

// ── Batching ────────────────────────────────────────────────────────────

/// One side of a batch, padded to the batch-local max length.
#[derive(Debug, Clone)]
pub struct PaddedSeqs {
    indices: Vec<u32>,
    lengths: Vec<usize>,
    rows: usize,
    width: usize,
}

impl PaddedSeqs {
    fn build(seqs: &[Vec<u32>]) -> PaddedSeqs {
        let rows = seqs.len();
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut indices = vec![PAD_ID; rows * width];
        let mut lengths = Vec::with_capacity(rows);
        for (b, s) in seqs.iter().enumerate() {
            indices[b * width..b * width + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        PaddedSeqs {
            indices,
            lengths,
            rows,
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self, b: usize) -> &[u32] {
        &self.indices[b * self.width..(b + 1) * self.width]
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.lengths[b]
    }

    pub fn mask_of(&self, b: usize) -> Vec<bool> {
        (0..self.width).map(|t| t < self.lengths[b]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub premise: PaddedSeqs,
    pub hypothesis: PaddedSeqs,
    pub labels: Vec<u32>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Encode raw pairs into a single batch (no shuffling, no size cap).
    pub fn from_pairs(pairs: &[LabeledPair], vocab: &Vocab, max_len: Option<usize>) -> Result<SequenceBatch> {
        if pairs.is_empty() {
            return Err(Error::Contract("batch: no pairs".into()));
        }
        let cap = |mut ids: Vec<u32>| -> Vec<u32> {
            if let Some(m) = max_len {
                ids.truncate(m);
            }
            ids
        };
        let prem: Vec<Vec<u32>> = pairs.iter().map(|p| cap(vocab.encode(&p.premise))).collect();
        let hyp: Vec<Vec<u32>> = pairs
            .iter()
            .map(|p| cap(vocab.encode(&p.hypothesis)))
            .collect();
        Ok(SequenceBatch {
            premise: PaddedSeqs::build(&prem),
            hypothesis: PaddedSeqs::build(&hyp),
            labels: pairs.iter().map(|p| p.label).collect(),
        })
    }
}

/// Shuffle (when a seed is given) and split into size-`batch_size` batches;
/// the trailing batch keeps the remainder. 300 pairs at size 128 give
/// batches of 128, 128 and 44.
pub fn make_batches(
    pairs: &[LabeledPair],
    vocab: &Vocab,
    batch_size: usize,
    max_len: Option<usize>,
    shuffle_seed: Option<u64>,
) -> Result<Vec<SequenceBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(0) = max_len {
        return Err(Error::Config("max length must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Contract("make_batches: no pairs".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let subset: Vec<LabeledPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            SequenceBatch::from_pairs(&subset, vocab, max_len)
        })
        .collect()
}

// ── Synthetic corpus ────────────────────────────────────────────────────

/// Deterministic, linearly separable three-class toy corpus over a ~40 word
/// vocabulary. Entailment pairs share a marker token, contradiction pairs
/// hold an opposing marker pair, neutral hypotheses carry no marker.
pub fn synthetic_pairs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: Vec<String> = (0..25).map(|i| format!("f{i}")).collect();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 3) as u32;
        let k = rng.gen_range(0..5u32);
        let mut premise = sample_fillers(&fillers, &mut rng);
        let mut hypothesis = sample_fillers(&fillers, &mut rng);
        match label {
            0 => {
                let tok = format!("same{k}");
                insert_at_random(&mut premise, tok.clone(), &mut rng);
                insert_at_random(&mut hypothesis, tok, &mut rng);
            }
            1 => {
                // No marker anywhere: the pair is merely unrelated.
            }
            _ => {
                insert_at_random(&mut premise, format!("pos{k}"), &mut rng);
                insert_at_random(&mut hypothesis, format!("neg{k}"), &mut rng);
            }
        }
        pairs.push(LabeledPair {
            premise,
            hypothesis,
            label,
        });
    }
    Dataset {
        kept: pairs.len(),
        pairs,
        label_names: NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        dropped: 0,
    }
}

fn sample_fillers(fillers: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(3..=6);
    (0..len)
        .map(|_| fillers[rng.gen_range(0..fillers.len())].clone())
        .collect()
}

fn insert_at_random(tokens: &mut Vec<String>, tok: String, rng: &mut ChaCha8Rng) {
    let pos = rng.gen_range(0..=tokens.len());
    tokens.insert(pos, tok);
}

/// Render a dataset as the JSONL corpus format (testing aid for the CLI).
pub fn to_jsonl(ds: &Dataset) -> String {
    let mut out = String::new();
    for p in &ds.pairs {
        let _ = writeln!(
            out,
            r#"{{"gold_label":"{}","sentence1":"{}","sentence2":"{}"}}"#,
            ds.label_names[p.label as usize],
            p.premise.join(" "),
            p.hypothesis.join(" ")
        );
    }
    out
}
