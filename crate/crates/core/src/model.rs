//! Sentence-pair classifier built around cross-sentence alignment.
//!
//! Pipeline per pair: embed both sentences, run the sequence encoder
//! ([`Variant`] picks plain or attention-boosted), score every premise step
//! against every hypothesis step (the similarity matrix), soft-align each
//! side against the other, enhance with differences and products, project,
//! re-encode, pool, classify.
//!
//! Sentences are processed at their true length: padded positions in a
//! batch are sliced off before the first op, so batch padding can never
//! leak into outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceBatch, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::layers::{affine, encode, EncoderParams, EncoderVars};
use crate::param::{Param, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Esim,
    Aesim,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esim" => Ok(Variant::Esim),
            "aesim" => Ok(Variant::Aesim),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected esim or aesim)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Esim => "esim",
            Variant::Aesim => "aesim",
        })
    }
}

/// Which axis of the exported alignment matrix is normalized to sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignDirection {
    PremiseRows,
    HypothesisCols,
}

impl std::str::FromStr for AlignDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "premise_rows" => Ok(AlignDirection::PremiseRows),
            "hypothesis_cols" => Ok(AlignDirection::HypothesisCols),
            other => Err(Error::Config(format!(
                "unknown direction {other:?} (expected premise_rows or hypothesis_cols)"
            ))),
        }
    }
}

impl AlignDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignDirection::PremiseRows => "premise_rows",
            AlignDirection::HypothesisCols => "hypothesis_cols",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the per-word attention projection (boosted variant only).
    pub attention_dim: usize,
    pub dropout: f64,
    pub label_names: Vec<String>,
}

impl ModelConfig {
    pub fn new(variant: Variant, embed_dim: usize, hidden_dim: usize, label_names: Vec<String>) -> Self {
        ModelConfig {
            variant,
            embed_dim,
            hidden_dim,
            attention_dim: hidden_dim,
            dropout: 0.2,
            label_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(Error::Config(
                "embedding, hidden and attention dims must be positive".into(),
            ));
        }
        if self.label_names.len() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// The classifier: embedding table, two encoders, the projection between
/// them and the output MLP. Cheap to clone (buffers are shared).
#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    embedding: Param<T>,
    encoder1: EncoderParams<T>,
    project_w: Param<T>,
    project_b: Param<T>,
    encoder2: EncoderParams<T>,
    classify_w1: Param<T>,
    classify_b1: Param<T>,
    classify_w2: Param<T>,
    classify_b2: Param<T>,
}

/// Tape handles for one forward pass.
pub struct BoundModel {
    reg: ParamRegistry,
    embedding: Var,
    enc1: EncoderVars,
    project_w: Var,
    project_b: Var,
    enc2: EncoderVars,
    classify_w1: Var,
    classify_b1: Var,
    classify_w2: Var,
    classify_b2: Var,
}

impl BoundModel {
    pub fn registry(&self) -> &ParamRegistry {
        &self.reg
    }
}

impl<T: Scalar> Model<T> {
    /// Build with fresh parameters. `embedding` is the `V x embed_dim`
    /// matrix from [`crate::data::init_embedding`] (row 0 must be the
    /// all-zero padding row).
    pub fn new(config: ModelConfig, vocab: Vocab, embedding: Vec<T>, seed: u64) -> Result<Model<T>> {
        config.validate()?;
        if embedding.len() != vocab.len() * config.embed_dim {
            return Err(Error::Config(format!(
                "embedding matrix has {} values, expected {} x {}",
                embedding.len(),
                vocab.len(),
                config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_h = config.hidden_dim;
        let d_a = config.attention_dim;
        let enc = |d_in: usize, rng: &mut ChaCha8Rng| match config.variant {
            Variant::Esim => EncoderParams::bilstm(d_in, d_h, rng),
            Variant::Aesim => EncoderParams::bialstm(d_in, d_h, d_a, rng),
        };
        let encoder1 = enc(config.embed_dim, &mut rng);
        let encoder2 = enc(d_h, &mut rng);
        let classes = config.num_classes();
        let model = Model {
            embedding: Param::new(embedding, vocab.len(), config.embed_dim),
            encoder1,
            project_w: Param::xavier(8 * d_h, d_h, &mut rng),
            project_b: Param::zeros(1, d_h),
            encoder2,
            classify_w1: Param::xavier(8 * d_h, d_h, &mut rng),
            classify_b1: Param::zeros(1, d_h),
            classify_w2: Param::xavier(d_h, classes, &mut rng),
            classify_b2: Param::zeros(1, classes),
            config,
            vocab,
        };
        Ok(model)
    }

    /// Rebuild from stored parts (checkpoint loading); shapes are trusted
    /// to have been validated by the caller.
    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        mut take: impl FnMut(&str, usize, usize) -> Result<Param<T>>,
    ) -> Result<Model<T>> {
        config.validate()?;
        let d_h = config.hidden_dim;
        let d_a = config.attention_dim;
        let classes = config.num_classes();
        // Zero-shaped skeleton, then overwrite every named field.
        let skel_enc = |d_in: usize| match config.variant {
            Variant::Esim => EncoderParams::Bilstm {
                fwd: crate::layers::LstmParams::zeros(d_in, d_h),
                bwd: crate::layers::LstmParams::zeros(d_in, d_h),
            },
            Variant::Aesim => {
                EncoderParams::Bialstm(crate::layers::BiaLstmParams::zeros(d_in, d_h, d_a))
            }
        };
        let mut model = Model {
            embedding: Param::zeros(vocab.len(), config.embed_dim),
            encoder1: skel_enc(config.embed_dim),
            project_w: Param::zeros(8 * d_h, d_h),
            project_b: Param::zeros(1, d_h),
            encoder2: skel_enc(d_h),
            classify_w1: Param::zeros(8 * d_h, d_h),
            classify_b1: Param::zeros(1, d_h),
            classify_w2: Param::zeros(d_h, classes),
            classify_b2: Param::zeros(1, classes),
            config,
            vocab,
        };
        for (name, p) in model.named_mut() {
            *p = take(&name, p.rows(), p.cols())?;
        }
        Ok(model)
    }

    pub fn named(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        out.extend(self.encoder1.named("enc1"));
        out.push(("project.w".into(), &self.project_w));
        out.push(("project.b".into(), &self.project_b));
        out.extend(self.encoder2.named("enc2"));
        out.push(("classify.w1".into(), &self.classify_w1));
        out.push(("classify.b1".into(), &self.classify_b1));
        out.push(("classify.w2".into(), &self.classify_w2));
        out.push(("classify.b2".into(), &self.classify_b2));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        out.extend(self.encoder1.named_mut("enc1"));
        out.push(("project.w".into(), &mut self.project_w));
        out.push(("project.b".into(), &mut self.project_b));
        out.extend(self.encoder2.named_mut("enc2"));
        out.push(("classify.w1".into(), &mut self.classify_w1));
        out.push(("classify.b1".into(), &mut self.classify_b1));
        out.push(("classify.w2".into(), &mut self.classify_w2));
        out.push(("classify.b2".into(), &mut self.classify_b2));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let mut reg = ParamRegistry::new();
        let embedding = self.embedding.bind(tape);
        reg.register("embedding", embedding);
        let enc1 = self.encoder1.bind(tape, "enc1", &mut reg);
        let project_w = self.project_w.bind(tape);
        reg.register("project.w", project_w);
        let project_b = self.project_b.bind(tape);
        reg.register("project.b", project_b);
        let enc2 = self.encoder2.bind(tape, "enc2", &mut reg);
        let classify_w1 = self.classify_w1.bind(tape);
        reg.register("classify.w1", classify_w1);
        let classify_b1 = self.classify_b1.bind(tape);
        reg.register("classify.b1", classify_b1);
        let classify_w2 = self.classify_w2.bind(tape);
        reg.register("classify.w2", classify_w2);
        let classify_b2 = self.classify_b2.bind(tape);
        reg.register("classify.b2", classify_b2);
        BoundModel {
            reg,
            embedding,
            enc1,
            project_w,
            project_b,
            enc2,
            classify_w1,
            classify_b1,
            classify_w2,
            classify_b2,
        }
    }

    // ── Stages ──────────────────────────────────────────────────────────

    /// Embed the first `len` ids of a padded row; padding never enters.
    fn embed_sentence(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        ids: &[u32],
        len: usize,
    ) -> Result<Var> {
        if len == 0 || len > ids.len() {
            return Err(Error::Contract(format!(
                "sentence length {len} out of range for a row of {}",
                ids.len()
            )));
        }
        tape.gather(bound.embedding, &ids[..len])
    }

    /// Both sentences through the first encoder: `len x 2*d_h` each.
    pub fn encode_inputs(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        premise: (&[u32], usize),
        hypothesis: (&[u32], usize),
    ) -> Result<(Var, Var)> {
        let p_emb = self.embed_sentence(tape, bound, premise.0, premise.1)?;
        let h_emb = self.embed_sentence(tape, bound, hypothesis.0, hypothesis.1)?;
        let p_enc = encode(tape, &bound.enc1, p_emb, premise.1)?;
        let q_enc = encode(tape, &bound.enc1, h_emb, hypothesis.1)?;
        Ok((p_enc, q_enc))
    }

    /// Dot product of every premise step with every hypothesis step.
    pub fn similarity_matrix(tape: &mut Tape<T>, p_enc: Var, q_enc: Var) -> Result<Var> {
        let q_t = tape.transpose(q_enc)?;
        tape.matmul(p_enc, q_t)
    }

    fn enhance(tape: &mut Tape<T>, x: Var, aligned: Var) -> Result<Var> {
        let diff = tape.sub(x, aligned)?;
        let prod = tape.mul(x, aligned)?;
        tape.concat(&[x, aligned, diff, prod], 1)
    }

    fn compose<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        enhanced: Var,
        len: usize,
        rng: &mut Option<&mut R>,
    ) -> Result<Var> {
        let proj = affine(tape, enhanced, bound.project_w, bound.project_b)?;
        let act = tape.selu(proj)?;
        let act = self.maybe_dropout(tape, act, rng)?;
        encode(tape, &bound.enc2, act, len)
    }

    fn maybe_dropout<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        rng: &mut Option<&mut R>,
    ) -> Result<Var> {
        match rng {
            Some(r) => tape.dropout(x, self.config.dropout, true, r),
            None => Ok(x),
        }
    }

    /// Class scores for one sentence pair. Pass a dropout RNG while
    /// training; `None` runs deterministically for inference.
    pub fn forward_logits<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        premise: (&[u32], usize),
        hypothesis: (&[u32], usize),
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let (p_enc, q_enc) = self.encode_inputs(tape, bound, premise, hypothesis)?;
        let m = Self::similarity_matrix(tape, p_enc, q_enc)?;
        let p_mask = vec![true; premise.1];
        let q_mask = vec![true; hypothesis.1];
        let (p_aligned, q_aligned) = soft_align(tape, m, p_enc, q_enc, &p_mask, &q_mask)?;

        let p_enh = Self::enhance(tape, p_enc, p_aligned)?;
        let q_enh = Self::enhance(tape, q_enc, q_aligned)?;

        let vp = self.compose(tape, bound, p_enh, premise.1, &mut rng)?;
        let vq = self.compose(tape, bound, q_enh, hypothesis.1, &mut rng)?;

        let p_avg = tape.mean_rows(vp)?;
        let p_max = tape.max_rows(vp)?;
        let q_avg = tape.mean_rows(vq)?;
        let q_max = tape.max_rows(vq)?;
        let pooled = tape.concat(&[p_avg, p_max, q_avg, q_max], 1)?;

        let pooled = self.maybe_dropout(tape, pooled, &mut rng)?;
        let hidden = affine(tape, pooled, bound.classify_w1, bound.classify_b1)?;
        let hidden = tape.selu(hidden)?;
        let hidden = self.maybe_dropout(tape, hidden, &mut rng)?;
        affine(tape, hidden, bound.classify_w2, bound.classify_b2)
    }

    /// Eval-mode logits for every pair in a batch.
    pub fn forward_batch(&self, batch: &SequenceBatch) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let logits = self.forward_logits::<ChaCha8Rng>(
                &mut tape,
                &bound,
                (batch.premise.indices(b), batch.premise.len_of(b)),
                (batch.hypothesis.indices(b), batch.hypothesis.len_of(b)),
                None,
            )?;
            out.push(tape.data(logits).to_vec());
        }
        Ok(out)
    }

    /// Eval-mode class index per pair.
    pub fn predict_batch(&self, batch: &SequenceBatch) -> Result<Vec<u32>> {
        Ok(self
            .forward_batch(batch)?
            .into_iter()
            .map(|row| argmax(&row) as u32)
            .collect())
    }

    /// Alignment matrix between two raw sentences, normalized along the
    /// requested direction, with the tokens it scores.
    pub fn export_alignment(
        &self,
        premise: &str,
        hypothesis: &str,
        direction: AlignDirection,
    ) -> Result<AlignmentExport> {
        let p_toks = crate::data::tokenize(premise);
        let h_toks = crate::data::tokenize(hypothesis);
        if p_toks.is_empty() || h_toks.is_empty() {
            return Err(Error::Data("cannot align an empty sentence".into()));
        }
        let p_ids = self.vocab.encode(&p_toks);
        let h_ids = self.vocab.encode(&h_toks);

        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (p_enc, q_enc) = self.encode_inputs(
            &mut tape,
            &bound,
            (&p_ids, p_ids.len()),
            (&h_ids, h_ids.len()),
        )?;
        let m = Self::similarity_matrix(&mut tape, p_enc, q_enc)?;

        let normalized = match direction {
            AlignDirection::PremiseRows => {
                let mask = vec![true; h_toks.len()];
                tape.masked_softmax_rows(m, &mask)?
            }
            AlignDirection::HypothesisCols => {
                let mt = tape.transpose(m)?;
                let mask = vec![true; p_toks.len()];
                let sm = tape.masked_softmax_rows(mt, &mask)?;
                tape.transpose(sm)?
            }
        };
        let (rows, cols) = tape.dims(normalized);
        let data = tape.data(normalized);
        let weights = (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| data[i * cols + j].to_f64())
                    .collect::<Vec<f64>>()
            })
            .collect();
        Ok(AlignmentExport {
            premise: p_toks,
            hypothesis: h_toks,
            weights,
            direction: direction.as_str().to_string(),
        })
    }
}

/// Align each side against the other through the shared similarity matrix:
/// row-wise attention over unmasked counterpart steps, then a weighted sum
/// of the counterpart's encodings.
pub fn soft_align<T: Scalar>(
    tape: &mut Tape<T>,
    m: Var,
    p_enc: Var,
    q_enc: Var,
    p_mask: &[bool],
    q_mask: &[bool],
) -> Result<(Var, Var)> {
    let p_weights = tape.masked_softmax_rows(m, q_mask)?;
    let p_aligned = tape.matmul(p_weights, q_enc)?;
    let m_t = tape.transpose(m)?;
    let q_weights = tape.masked_softmax_rows(m_t, p_mask)?;
    let q_aligned = tape.matmul(q_weights, p_enc)?;
    Ok((p_aligned, q_aligned))
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlignmentExport {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub direction: String,
}

/// Compare analytic parameter gradients against central differences on one
/// pair, per parameter tensor. `corrupt` scales a matching parameter's
/// analytic gradient to prove the check can fail. f64 only.
pub fn grad_check_model(
    model: &Model<f64>,
    pairs: &[(Vec<u32>, Vec<u32>, usize)],
    eps: f64,
    corrupt: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    if pairs.is_empty() {
        return Err(Error::Contract("grad check needs at least one pair".into()));
    }
    // Loss is the SUM of per-pair cross-entropies. A single pair can leave
    // individual gradient entries near-cancelled (1e-8 and below), where the
    // central difference is pure float noise; summing varied pairs keeps every
    // participating entry well above that floor.
    let summed_loss = |m: &Model<f64>, tape: &mut Tape<f64>| -> Result<(BoundModel, Var)> {
        let bound = m.bind(tape);
        let mut total: Option<Var> = None;
        for (p, h, target) in pairs {
            let logits =
                m.forward_logits::<ChaCha8Rng>(tape, &bound, (p, p.len()), (h, h.len()), None)?;
            let loss = tape.cross_entropy(logits, *target)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        Ok((bound, total.expect("pairs nonempty")))
    };
    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = summed_loss(m, &mut tape)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic gradients, one backward pass.
    let mut tape = Tape::new();
    let (bound, loss) = summed_loss(model, &mut tape)?;
    tape.backward(loss)?;
    let mut analytic: Vec<(String, Vec<f64>)> = bound
        .registry()
        .entries()
        .iter()
        .map(|(name, var)| {
            let g = tape
                .grad(*var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.tensor(*var).numel()]);
            (name.clone(), g)
        })
        .collect();
    if let Some(pat) = corrupt {
        for (name, g) in analytic.iter_mut() {
            if name.contains(pat) {
                for v in g.iter_mut() {
                    *v = *v * 1.5 + 1e-3;
                }
            }
        }
    }

    // Numeric gradients by perturbing a cloned model in place.
    let mut probe = model.clone();
    let mut report = Vec::with_capacity(analytic.len());
    for (name, ag) in &analytic {
        let numel = ag.len();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = {
                let p = probe.param_mut(name).expect("param exists");
                let v = p.values()[i];
                p.values_mut()[i] = v + eps;
                v
            };
            let up = loss_of(&probe)?;
            probe.param_mut(name).unwrap().values_mut()[i] = orig - eps;
            let down = loss_of(&probe)?;
            probe.param_mut(name).unwrap().values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = crate::check::rel_error(ag[i], numeric);
            if err > worst {
                worst = err;
            }
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}

/// True when the embedding row for [`PAD_ID`] is all zero. The trainer
/// keeps it that way by zeroing its gradient before every step.
pub fn pad_is_zero_row<T: Scalar>(model: &Model<T>) -> bool {
    let d = model.config.embed_dim;
    let start = PAD_ID as usize * d;
    model.embedding.values()[start..start + d]
        .iter()
        .all(|v| *v == T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_embedding, synthetic_pairs, SequenceBatch, Vocab, NLI_LABELS};

    fn toy_model(variant: Variant, seed: u64) -> Model<f64> {
        let ds = synthetic_pairs(12, 5);
        let vocab = Vocab::build(&ds.pairs, 1);
        let mut config = ModelConfig::new(variant, 6, 4, ds.label_names.clone());
        config.dropout = 0.2;
        let (emb, _) = init_embedding::<f64>(&vocab, 6, None, seed).unwrap();
        Model::new(config, vocab, emb, seed).unwrap()
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let labels = vec!["a".into(), "b".into()];
        let mut c = ModelConfig::new(Variant::Esim, 4, 4, labels.clone());
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(Variant::Esim, 4, 4, vec!["only".into()]);
        assert!(c.validate().is_err());
        c = ModelConfig::new(Variant::Esim, 4, 4, labels);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_emits_one_logit_per_class() {
        for variant in [Variant::Esim, Variant::Aesim] {
            let model = toy_model(variant, 1);
            let ds = synthetic_pairs(4, 6);
            let batch = SequenceBatch::from_pairs(&ds.pairs, &model.vocab, None).unwrap();
            let logits = model.forward_batch(&batch).unwrap();
            assert_eq!(logits.len(), 4);
            assert!(logits.iter().all(|row| row.len() == 3));
            assert!(logits.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn same_seed_same_logits() {
        let a = toy_model(Variant::Aesim, 7);
        let b = toy_model(Variant::Aesim, 7);
        let ds = synthetic_pairs(2, 8);
        let batch = SequenceBatch::from_pairs(&ds.pairs, &a.vocab, None).unwrap();
        assert_eq!(a.forward_batch(&batch).unwrap(), b.forward_batch(&batch).unwrap());
    }

    #[test]
    fn similarity_matrix_is_pairwise_dot_products() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(vec![1.0, 2.0, 0.5, -1.0], 2, 2, false);
        let q = tape.leaf(vec![3.0, 0.0, 1.0, 1.0, -2.0, 4.0], 3, 2, false);
        let m = Model::<f64>::similarity_matrix(&mut tape, p, q).unwrap();
        assert_eq!(tape.dims(m), (2, 3));
        let d = tape.data(m);
        // Hand-computed dot products of each (premise, hypothesis) step pair.
        assert_eq!(d, &[3.0, 3.0, 6.0, 1.5, -0.5, -5.0]);
    }

    #[test]
    fn soft_align_matches_brute_force_loops() {
        use rand::{Rng as _, SeedableRng as _};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (tp, tq, d) = (4, 3, 5);
        let pd: Vec<f64> = (0..tp * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let qd: Vec<f64> = (0..tq * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p_mask = [true, true, true, false];
        let q_mask = [true, true, false];

        let mut tape = Tape::new();
        let p = tape.leaf(pd.clone(), tp, d, false);
        let q = tape.leaf(qd.clone(), tq, d, false);
        let m = Model::<f64>::similarity_matrix(&mut tape, p, q).unwrap();
        let (pa, qa) = soft_align(&mut tape, m, p, q, &p_mask, &q_mask).unwrap();

        // Brute force: explicit softmax over unmasked counterpart steps,
        // then the weighted sum, all in straight loops.
        let dot = |i: usize, j: usize| -> f64 {
            (0..d).map(|k| pd[i * d + k] * qd[j * d + k]).sum()
        };
        for i in 0..tp {
            let mx = (0..tq)
                .filter(|&j| q_mask[j])
                .map(|j| dot(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..tq)
                .filter(|&j| q_mask[j])
                .map(|j| (dot(i, j) - mx).exp())
                .sum();
            for k in 0..d {
                let want: f64 = (0..tq)
                    .filter(|&j| q_mask[j])
                    .map(|j| (dot(i, j) - mx).exp() / z * qd[j * d + k])
                    .sum();
                let got = tape.data(pa)[i * d + k];
                assert!((got - want).abs() < 1e-12, "premise align [{i},{k}]");
            }
        }
        for j in 0..tq {
            let mx = (0..tp)
                .filter(|&i| p_mask[i])
                .map(|i| dot(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..tp)
                .filter(|&i| p_mask[i])
                .map(|i| (dot(i, j) - mx).exp())
                .sum();
            for k in 0..d {
                let want: f64 = (0..tp)
                    .filter(|&i| p_mask[i])
                    .map(|i| (dot(i, j) - mx).exp() / z * pd[i * d + k])
                    .sum();
                let got = tape.data(qa)[j * d + k];
                assert!((got - want).abs() < 1e-12, "hypothesis align [{j},{k}]");
            }
        }
    }

    #[test]
    fn enhancement_concatenates_value_aligned_diff_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2.0, 3.0], 1, 2, false);
        let a = tape.leaf(vec![0.5, -1.0], 1, 2, false);
        let e = Model::<f64>::enhance(&mut tape, x, a).unwrap();
        assert_eq!(tape.data(e), &[2.0, 3.0, 0.5, -1.0, 1.5, 4.0, 1.0, -3.0]);
    }

    #[test]
    fn batch_padding_cannot_change_outputs() {
        for variant in [Variant::Esim, Variant::Aesim] {
            let model = toy_model(variant, 3);
            let ds = synthetic_pairs(6, 11);
            // Pair 0 alone vs pair 0 padded to the width of longer pairs.
            let solo = SequenceBatch::from_pairs(&ds.pairs[..1], &model.vocab, None).unwrap();
            let padded = SequenceBatch::from_pairs(&ds.pairs, &model.vocab, None).unwrap();
            let solo_logits = &model.forward_batch(&solo).unwrap()[0];
            let padded_logits = &model.forward_batch(&padded).unwrap()[0];
            assert_eq!(solo_logits, padded_logits, "{variant} changed under padding");
        }
    }

    #[test]
    fn attention_boost_surplus_matches_closed_form_at_small_dims() {
        let esim = toy_model(Variant::Esim, 2);
        let aesim = toy_model(Variant::Aesim, 2);
        let (d_h, d_a) = (4usize, 4usize);
        // Per encoder: two attention heads + two fusion affine maps.
        let per_encoder = 2 * (d_h * d_a + 2 * d_a) + 2 * (d_h * d_h + d_h);
        assert_eq!(
            aesim.parameter_count() - esim.parameter_count(),
            2 * per_encoder
        );
    }

    #[test]
    fn export_alignment_normalizes_the_requested_axis() {
        let model = toy_model(Variant::Aesim, 4);
        let export = model
            .export_alignment("f1 f2 f3 same0", "f4 same0", AlignDirection::PremiseRows)
            .unwrap();
        assert_eq!(export.premise.len(), 4);
        assert_eq!(export.hypothesis.len(), 2);
        assert_eq!(export.weights.len(), 4);
        for row in &export.weights {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let export = model
            .export_alignment("f1 f2 f3 same0", "f4 same0", AlignDirection::HypothesisCols)
            .unwrap();
        for j in 0..2 {
            let s: f64 = export.weights.iter().map(|r| r[j]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(export.direction, "hypothesis_cols");
    }

    /// Varied lengths and all three targets so every parameter sees a
    /// healthy summed gradient (single pairs leave near-cancelled entries
    /// below the central-difference noise floor).
    fn grad_check_pairs() -> Vec<(Vec<u32>, Vec<u32>, usize)> {
        vec![
            (vec![4, 7, 2], vec![3, 5], 1),
            (vec![2, 3], vec![6, 4, 8], 0),
            (vec![5, 8, 6], vec![2, 7, 3], 2),
            (vec![7], vec![5, 2], 0),
        ]
    }

    /// Tiny model evaluated at a generic point: weights tripled away from
    /// the symmetric init. At init the attention softmax is near uniform and
    /// several gradient tensors sit at ~1e-7, where eps-scale central
    /// differences are pure float noise; the spread-out point keeps every
    /// tensor's gradient well above that floor. Verified kink-free: the
    /// finite-difference error scales as eps^2 above eps=3e-5 and 1/eps
    /// below, with no eps-independent component.
    fn grad_check_model_at_generic_point(variant: Variant, seed: u64) -> Model<f64> {
        let tokens: Vec<String> = ["<pad>", "<oov>", "a", "b", "c", "d", "e", "f", "g", "h"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let labels: Vec<String> = NLI_LABELS.iter().map(|s| s.to_string()).collect();
        let vocab = Vocab::from_tokens(tokens).unwrap();
        let config = ModelConfig::new(variant, 4, 4, labels);
        let (emb, _) = init_embedding::<f64>(&vocab, 4, None, seed).unwrap();
        let mut model = Model::new(config, vocab, emb, seed).unwrap();
        let names: Vec<String> = model.named().iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            if name != "embedding" {
                for v in model.param_mut(name).unwrap().values_mut() {
                    *v *= 3.0;
                }
            }
        }
        model
    }

    #[test]
    fn gradient_check_smoke_on_tiny_models() {
        for variant in [Variant::Esim, Variant::Aesim] {
            let model = grad_check_model_at_generic_point(variant, 1);
            let pairs = grad_check_pairs();
            let report = grad_check_model(&model, &pairs, 1e-5, None).unwrap();
            let worst = report.iter().map(|(_, e)| *e).fold(0.0, f64::max);
            assert!(worst < 1e-4, "{variant}: worst rel error {worst}");
        }
    }

    #[test]
    fn gradient_check_catches_injected_corruption() {
        let model = grad_check_model_at_generic_point(Variant::Esim, 1);
        let pairs = grad_check_pairs();
        let report = grad_check_model(&model, &pairs, 1e-5, Some("classify.w2")).unwrap();
        let bad = report
            .iter()
            .find(|(n, _)| n == "classify.w2")
            .map(|(_, e)| *e)
            .unwrap();
        assert!(bad > 1e-3, "corruption not detected: {bad}");
    }

    #[test]
    fn pad_row_starts_zero() {
        assert!(pad_is_zero_row(&toy_model(Variant::Esim, 1)));
    }
}
