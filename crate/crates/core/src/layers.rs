//! Recurrent encoder layers.
//!
//! Two interchangeable sequence encoders map a `T x d_in` sequence to a
//! `T x 2*d_h` representation:
//!
//! * [`EncoderParams::bilstm`]: plain bidirectional LSTM, forward and
//!   backward hidden states concatenated per step.
//! * [`EncoderParams::bialstm`]: the attention-boosted variant. Each
//!   direction's hidden states are rescaled by per-word attention weights,
//!   then the two directions are mixed by a gated linear fusion instead of
//!   raw concatenation.
//!
//! Rows at padded steps (t >= len) are exactly zero in both encoders, which
//! is what makes model outputs independent of how far a batch is padded.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{Param, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// x . w + b with b broadcast over rows.
pub fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

// ── LSTM cell ───────────────────────────────────────────────────────────

/// Gate weights for one direction: input/forget/output/candidate kernels
/// over the input (`w_*`, d_in x d_h) and the recurrent state (`u_*`,
/// d_h x d_h), plus bias rows.
#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    pub w_i: Param<T>,
    pub w_f: Param<T>,
    pub w_o: Param<T>,
    pub w_c: Param<T>,
    pub u_i: Param<T>,
    pub u_f: Param<T>,
    pub u_o: Param<T>,
    pub u_c: Param<T>,
    pub b_i: Param<T>,
    pub b_f: Param<T>,
    pub b_o: Param<T>,
    pub b_c: Param<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    w_i: Var,
    w_f: Var,
    w_o: Var,
    w_c: Var,
    u_i: Var,
    u_f: Var,
    u_o: Var,
    u_c: Var,
    b_i: Var,
    b_f: Var,
    b_o: Var,
    b_c: Var,
}

impl<T: Scalar> LstmParams<T> {
    pub fn xavier<R: Rng>(d_in: usize, d_h: usize, rng: &mut R) -> Self {
        LstmParams {
            w_i: Param::xavier(d_in, d_h, rng),
            w_f: Param::xavier(d_in, d_h, rng),
            w_o: Param::xavier(d_in, d_h, rng),
            w_c: Param::xavier(d_in, d_h, rng),
            u_i: Param::xavier(d_h, d_h, rng),
            u_f: Param::xavier(d_h, d_h, rng),
            u_o: Param::xavier(d_h, d_h, rng),
            u_c: Param::xavier(d_h, d_h, rng),
            b_i: Param::zeros(1, d_h),
            // Forget gate starts open so early training doesn't wipe state.
            b_f: Param::full(1, d_h, 1.0),
            b_o: Param::zeros(1, d_h),
            b_c: Param::zeros(1, d_h),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmParams {
            w_i: Param::zeros(d_in, d_h),
            w_f: Param::zeros(d_in, d_h),
            w_o: Param::zeros(d_in, d_h),
            w_c: Param::zeros(d_in, d_h),
            u_i: Param::zeros(d_h, d_h),
            u_f: Param::zeros(d_h, d_h),
            u_o: Param::zeros(d_h, d_h),
            u_c: Param::zeros(d_h, d_h),
            b_i: Param::zeros(1, d_h),
            b_f: Param::zeros(1, d_h),
            b_o: Param::zeros(1, d_h),
            b_c: Param::zeros(1, d_h),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_i.rows()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        FIELD_NAMES
            .iter()
            .zip(self.field_refs())
            .map(|(n, p)| (format!("{prefix}.{n}"), p))
            .collect()
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        let names: Vec<String> = FIELD_NAMES
            .iter()
            .map(|n| format!("{prefix}.{n}"))
            .collect();
        names.into_iter().zip(self.field_refs_mut()).collect()
    }

    fn field_refs(&self) -> Vec<&Param<T>> {
        vec![
            &self.w_i, &self.w_f, &self.w_o, &self.w_c, &self.u_i, &self.u_f, &self.u_o,
            &self.u_c, &self.b_i, &self.b_f, &self.b_o, &self.b_c,
        ]
    }

    fn field_refs_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.w_c,
            &mut self.u_i,
            &mut self.u_f,
            &mut self.u_o,
            &mut self.u_c,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_c,
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str, reg: &mut ParamRegistry) -> LstmVars {
        let vars: Vec<Var> = self
            .named(prefix)
            .into_iter()
            .map(|(name, p)| {
                let v = p.bind(tape);
                reg.register(name, v);
                v
            })
            .collect();
        LstmVars {
            w_i: vars[0],
            w_f: vars[1],
            w_o: vars[2],
            w_c: vars[3],
            u_i: vars[4],
            u_f: vars[5],
            u_o: vars[6],
            u_c: vars[7],
            b_i: vars[8],
            b_f: vars[9],
            b_o: vars[10],
            b_c: vars[11],
        }
    }
}

const FIELD_NAMES: [&str; 12] = [
    "w_i", "w_f", "w_o", "w_c", "u_i", "u_f", "u_o", "u_c", "b_i", "b_f", "b_o", "b_c",
];

/// One LSTM step on a `1 x d_in` input. Returns (h_t, c_t).
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LstmVars,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let gate = |tape: &mut Tape<T>, w, u, b| -> Result<Var> {
        let xw = tape.matmul(x_t, w)?;
        let hu = tape.matmul(h_prev, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_bias(s, b)
    };
    let pre_i = gate(tape, p.w_i, p.u_i, p.b_i)?;
    let pre_f = gate(tape, p.w_f, p.u_f, p.b_f)?;
    let pre_o = gate(tape, p.w_o, p.u_o, p.b_o)?;
    let pre_c = gate(tape, p.w_c, p.u_c, p.b_c)?;
    let i = tape.sigmoid(pre_i)?;
    let f = tape.sigmoid(pre_f)?;
    let o = tape.sigmoid(pre_o)?;
    let c_tilde = tape.tanh(pre_c)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, c_tilde)?;
    let c_t = tape.add(keep, write)?;
    let c_act = tape.tanh(c_t)?;
    let h_t = tape.mul(o, c_act)?;
    Ok((h_t, c_t))
}

/// Scan the first `len` rows of `x`, forward or reverse. The returned
/// states are indexed by original time step regardless of direction.
fn lstm_scan<T: Scalar>(
    tape: &mut Tape<T>,
    p: &LstmVars,
    x: Var,
    len: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let d_h = tape.dims(p.u_i).0;
    let mut h = tape.zeros(1, d_h);
    let mut c = tape.zeros(1, d_h);
    let mut by_time: Vec<Option<Var>> = vec![None; len];
    let steps: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in steps {
        let x_t = tape.slice_rows(x, t, 1)?;
        let (nh, nc) = lstm_step(tape, p, x_t, h, c)?;
        h = nh;
        c = nc;
        by_time[t] = Some(h);
    }
    Ok(by_time.into_iter().map(|v| v.expect("step visited")).collect())
}

fn check_seq<T: Scalar>(tape: &Tape<T>, op: &str, x: Var, len: usize) -> Result<usize> {
    let (t_total, _) = tape.dims(x);
    if len == 0 {
        return Err(Error::Contract(format!("{op}: empty sequence")));
    }
    if len > t_total {
        return Err(Error::Contract(format!(
            "{op}: length {len} exceeds {t_total} rows"
        )));
    }
    Ok(t_total)
}

/// Stack per-step rows into a matrix, zero-padding up to `t_total` rows.
fn stack_rows<T: Scalar>(
    tape: &mut Tape<T>,
    rows: &[Var],
    t_total: usize,
    width: usize,
) -> Result<Var> {
    let mut parts = rows.to_vec();
    if t_total > parts.len() {
        let pad = tape.zeros(1, width);
        parts.resize(t_total, pad);
    }
    tape.concat(&parts, 0)
}

/// Bidirectional LSTM: per step, forward and backward hidden states side
/// by side. Output is `t_total x 2*d_h` with zero rows past `len`.
pub fn bilstm<T: Scalar>(
    tape: &mut Tape<T>,
    fwd: &LstmVars,
    bwd: &LstmVars,
    x: Var,
    len: usize,
) -> Result<Var> {
    let t_total = check_seq(tape, "bilstm", x, len)?;
    let d_h = tape.dims(fwd.u_i).0;
    let f = lstm_scan(tape, fwd, x, len, false)?;
    let b = lstm_scan(tape, bwd, x, len, true)?;
    let f_mat = stack_rows(tape, &f, t_total, d_h)?;
    let b_mat = stack_rows(tape, &b, t_total, d_h)?;
    tape.concat(&[f_mat, b_mat], 1)
}

// ── Word attention ──────────────────────────────────────────────────────

/// Per-word attention over one direction's hidden states: a one-layer
/// tanh projection scored against a learned context vector. Each hidden
/// state is rescaled by its own weight (no mixing across steps).
#[derive(Debug, Clone)]
pub struct WordAttentionParams<T> {
    pub w: Param<T>,   // d x d_a
    pub b: Param<T>,   // 1 x d_a
    pub ctx: Param<T>, // d_a x 1
}

#[derive(Debug, Clone, Copy)]
pub struct WordAttentionVars {
    w: Var,
    b: Var,
    ctx: Var,
}

impl<T: Scalar> WordAttentionParams<T> {
    pub fn xavier<R: Rng>(d: usize, d_a: usize, rng: &mut R) -> Self {
        WordAttentionParams {
            w: Param::xavier(d, d_a, rng),
            b: Param::zeros(1, d_a),
            ctx: Param::xavier(d_a, 1, rng),
        }
    }

    pub fn zeros(d: usize, d_a: usize) -> Self {
        WordAttentionParams {
            w: Param::zeros(d, d_a),
            b: Param::zeros(1, d_a),
            ctx: Param::zeros(d_a, 1),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        vec![
            (format!("{prefix}.w"), &self.w),
            (format!("{prefix}.b"), &self.b),
            (format!("{prefix}.ctx"), &self.ctx),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        vec![
            (format!("{prefix}.w"), &mut self.w),
            (format!("{prefix}.b"), &mut self.b),
            (format!("{prefix}.ctx"), &mut self.ctx),
        ]
    }

    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        reg: &mut ParamRegistry,
    ) -> WordAttentionVars {
        let w = self.w.bind(tape);
        reg.register(format!("{prefix}.w"), w);
        let b = self.b.bind(tape);
        reg.register(format!("{prefix}.b"), b);
        let ctx = self.ctx.bind(tape);
        reg.register(format!("{prefix}.ctx"), ctx);
        WordAttentionVars { w, b, ctx }
    }
}

/// Rescale each unmasked row of `x` by its attention weight.
/// Returns the scaled sequence (`T x d`) and the weights (`T x 1`); masked
/// steps get weight exactly zero.
pub fn word_attention<T: Scalar>(
    tape: &mut Tape<T>,
    v: &WordAttentionVars,
    x: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let proj = affine(tape, x, v.w, v.b)?;
    let hidden = tape.tanh(proj)?;
    let scores = tape.matmul(hidden, v.ctx)?; // T x 1
    let row = tape.transpose(scores)?; // 1 x T
    let weights_row = tape.masked_softmax_rows(row, mask)?;
    let weights = tape.transpose(weights_row)?; // T x 1
    let scaled = tape.scale_rows(x, weights)?;
    Ok((scaled, weights))
}

// ── Direction fusion ────────────────────────────────────────────────────

/// Learned mixer replacing plain concatenation of the two directions:
/// each direction gets its own affine map, the results sit side by side,
/// and tanh gates the combined activation.
#[derive(Debug, Clone)]
pub struct DirectionFusionParams<T> {
    pub w_f: Param<T>, // d_h x d_h
    pub b_f: Param<T>, // 1 x d_h
    pub w_b: Param<T>, // d_h x d_h
    pub b_b: Param<T>, // 1 x d_h
}

#[derive(Debug, Clone, Copy)]
pub struct DirectionFusionVars {
    w_f: Var,
    b_f: Var,
    w_b: Var,
    b_b: Var,
}

impl<T: Scalar> DirectionFusionParams<T> {
    pub fn xavier<R: Rng>(d_h: usize, rng: &mut R) -> Self {
        DirectionFusionParams {
            w_f: Param::xavier(d_h, d_h, rng),
            b_f: Param::zeros(1, d_h),
            w_b: Param::xavier(d_h, d_h, rng),
            b_b: Param::zeros(1, d_h),
        }
    }

    pub fn zeros(d_h: usize) -> Self {
        DirectionFusionParams {
            w_f: Param::zeros(d_h, d_h),
            b_f: Param::zeros(1, d_h),
            w_b: Param::zeros(d_h, d_h),
            b_b: Param::zeros(1, d_h),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        vec![
            (format!("{prefix}.w_f"), &self.w_f),
            (format!("{prefix}.b_f"), &self.b_f),
            (format!("{prefix}.w_b"), &self.w_b),
            (format!("{prefix}.b_b"), &self.b_b),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        vec![
            (format!("{prefix}.w_f"), &mut self.w_f),
            (format!("{prefix}.b_f"), &mut self.b_f),
            (format!("{prefix}.w_b"), &mut self.w_b),
            (format!("{prefix}.b_b"), &mut self.b_b),
        ]
    }

    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        reg: &mut ParamRegistry,
    ) -> DirectionFusionVars {
        let w_f = self.w_f.bind(tape);
        reg.register(format!("{prefix}.w_f"), w_f);
        let b_f = self.b_f.bind(tape);
        reg.register(format!("{prefix}.b_f"), b_f);
        let w_b = self.w_b.bind(tape);
        reg.register(format!("{prefix}.w_b"), w_b);
        let b_b = self.b_b.bind(tape);
        reg.register(format!("{prefix}.b_b"), b_b);
        DirectionFusionVars { w_f, b_f, w_b, b_b }
    }
}

/// Mix per-direction sequences (`T x d_h` each) into `T x 2*d_h`.
pub fn direction_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    v: &DirectionFusionVars,
    s_fwd: Var,
    s_bwd: Var,
) -> Result<Var> {
    let pf = affine(tape, s_fwd, v.w_f, v.b_f)?;
    let pb = affine(tape, s_bwd, v.w_b, v.b_b)?;
    let cat = tape.concat(&[pf, pb], 1)?;
    tape.tanh(cat)
}

// ── Attention-boosted bidirectional LSTM ────────────────────────────────

#[derive(Debug, Clone)]
pub struct BiaLstmParams<T> {
    pub fwd: LstmParams<T>,
    pub bwd: LstmParams<T>,
    pub attn_fwd: WordAttentionParams<T>,
    pub attn_bwd: WordAttentionParams<T>,
    pub fuse: DirectionFusionParams<T>,
}

pub struct BiaLstmVars {
    fwd: LstmVars,
    bwd: LstmVars,
    attn_fwd: WordAttentionVars,
    attn_bwd: WordAttentionVars,
    fuse: DirectionFusionVars,
}

impl<T: Scalar> BiaLstmParams<T> {
    pub fn xavier<R: Rng>(d_in: usize, d_h: usize, d_a: usize, rng: &mut R) -> Self {
        BiaLstmParams {
            fwd: LstmParams::xavier(d_in, d_h, rng),
            bwd: LstmParams::xavier(d_in, d_h, rng),
            attn_fwd: WordAttentionParams::xavier(d_h, d_a, rng),
            attn_bwd: WordAttentionParams::xavier(d_h, d_a, rng),
            fuse: DirectionFusionParams::xavier(d_h, rng),
        }
    }

    pub fn zeros(d_in: usize, d_h: usize, d_a: usize) -> Self {
        BiaLstmParams {
            fwd: LstmParams::zeros(d_in, d_h),
            bwd: LstmParams::zeros(d_in, d_h),
            attn_fwd: WordAttentionParams::zeros(d_h, d_a),
            attn_bwd: WordAttentionParams::zeros(d_h, d_a),
            fuse: DirectionFusionParams::zeros(d_h),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        let mut out = self.fwd.named(&format!("{prefix}.fwd"));
        out.extend(self.bwd.named(&format!("{prefix}.bwd")));
        out.extend(self.attn_fwd.named(&format!("{prefix}.attn_fwd")));
        out.extend(self.attn_bwd.named(&format!("{prefix}.attn_bwd")));
        out.extend(self.fuse.named(&format!("{prefix}.fuse")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        let mut out = self.fwd.named_mut(&format!("{prefix}.fwd"));
        out.extend(self.bwd.named_mut(&format!("{prefix}.bwd")));
        out.extend(self.attn_fwd.named_mut(&format!("{prefix}.attn_fwd")));
        out.extend(self.attn_bwd.named_mut(&format!("{prefix}.attn_bwd")));
        out.extend(self.fuse.named_mut(&format!("{prefix}.fuse")));
        out
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str, reg: &mut ParamRegistry) -> BiaLstmVars {
        BiaLstmVars {
            fwd: self.fwd.bind(tape, &format!("{prefix}.fwd"), reg),
            bwd: self.bwd.bind(tape, &format!("{prefix}.bwd"), reg),
            attn_fwd: self.attn_fwd.bind(tape, &format!("{prefix}.attn_fwd"), reg),
            attn_bwd: self.attn_bwd.bind(tape, &format!("{prefix}.attn_bwd"), reg),
            fuse: self.fuse.bind(tape, &format!("{prefix}.fuse"), reg),
        }
    }
}

/// Attention-boosted bidirectional LSTM over the first `len` rows of `x`.
/// Output is `t_total x 2*d_h` with zero rows past `len`.
pub fn bialstm<T: Scalar>(
    tape: &mut Tape<T>,
    v: &BiaLstmVars,
    x: Var,
    len: usize,
) -> Result<Var> {
    let t_total = check_seq(tape, "bialstm", x, len)?;
    let d_h = tape.dims(v.fwd.u_i).0;
    let f = lstm_scan(tape, &v.fwd, x, len, false)?;
    let b = lstm_scan(tape, &v.bwd, x, len, true)?;
    let f_mat = stack_rows(tape, &f, t_total, d_h)?;
    let b_mat = stack_rows(tape, &b, t_total, d_h)?;
    let mask: Vec<bool> = (0..t_total).map(|t| t < len).collect();
    let (s_f, _) = word_attention(tape, &v.attn_fwd, f_mat, &mask)?;
    let (s_b, _) = word_attention(tape, &v.attn_bwd, b_mat, &mask)?;
    let fused = direction_fuse(tape, &v.fuse, s_f, s_b)?;
    if t_total == len {
        return Ok(fused);
    }
    // The fusion bias makes padded rows non-zero; gate them back to zero.
    let gate: Vec<T> = mask
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    let gate = tape.constant(gate, t_total, 1);
    tape.scale_rows(fused, gate)
}

// ── Encoder selection ───────────────────────────────────────────────────

/// One sequence encoder slot in the model, either variant.
#[derive(Debug, Clone)]
pub enum EncoderParams<T> {
    Bilstm {
        fwd: LstmParams<T>,
        bwd: LstmParams<T>,
    },
    Bialstm(BiaLstmParams<T>),
}

pub enum EncoderVars {
    Bilstm { fwd: LstmVars, bwd: LstmVars },
    Bialstm(BiaLstmVars),
}

impl<T: Scalar> EncoderParams<T> {
    pub fn bilstm<R: Rng>(d_in: usize, d_h: usize, rng: &mut R) -> Self {
        EncoderParams::Bilstm {
            fwd: LstmParams::xavier(d_in, d_h, rng),
            bwd: LstmParams::xavier(d_in, d_h, rng),
        }
    }

    pub fn bialstm<R: Rng>(d_in: usize, d_h: usize, d_a: usize, rng: &mut R) -> Self {
        EncoderParams::Bialstm(BiaLstmParams::xavier(d_in, d_h, d_a, rng))
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        match self {
            EncoderParams::Bilstm { fwd, bwd } => {
                let mut out = fwd.named(&format!("{prefix}.fwd"));
                out.extend(bwd.named(&format!("{prefix}.bwd")));
                out
            }
            EncoderParams::Bialstm(p) => p.named(prefix),
        }
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        match self {
            EncoderParams::Bilstm { fwd, bwd } => {
                let mut out = fwd.named_mut(&format!("{prefix}.fwd"));
                out.extend(bwd.named_mut(&format!("{prefix}.bwd")));
                out
            }
            EncoderParams::Bialstm(p) => p.named_mut(prefix),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str, reg: &mut ParamRegistry) -> EncoderVars {
        match self {
            EncoderParams::Bilstm { fwd, bwd } => EncoderVars::Bilstm {
                fwd: fwd.bind(tape, &format!("{prefix}.fwd"), reg),
                bwd: bwd.bind(tape, &format!("{prefix}.bwd"), reg),
            },
            EncoderParams::Bialstm(p) => EncoderVars::Bialstm(p.bind(tape, prefix, reg)),
        }
    }
}

/// Run whichever encoder is bound. Output is always `t_total x 2*d_h`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, v: &EncoderVars, x: Var, len: usize) -> Result<Var> {
    match v {
        EncoderVars::Bilstm { fwd, bwd } => bilstm(tape, fwd, bwd, x, len),
        EncoderVars::Bialstm(p) => bialstm(tape, p, x, len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Pure-f64 scan used as an oracle against the tape implementation.
    struct ScalarLstm {
        w: [f64; 4], // i, f, o, c kernels (d_in = 1)
        u: [f64; 4],
        b: [f64; 4],
    }

    impl ScalarLstm {
        fn step(&self, x: f64, h: f64, c: f64) -> (f64, f64) {
            let i = sig(x * self.w[0] + h * self.u[0] + self.b[0]);
            let f = sig(x * self.w[1] + h * self.u[1] + self.b[1]);
            let o = sig(x * self.w[2] + h * self.u[2] + self.b[2]);
            let g = (x * self.w[3] + h * self.u[3] + self.b[3]).tanh();
            let c_new = f * c + i * g;
            (o * c_new.tanh(), c_new)
        }
    }

    fn scalar_params(s: &ScalarLstm) -> LstmParams<f64> {
        LstmParams {
            w_i: Param::new(vec![s.w[0]], 1, 1),
            w_f: Param::new(vec![s.w[1]], 1, 1),
            w_o: Param::new(vec![s.w[2]], 1, 1),
            w_c: Param::new(vec![s.w[3]], 1, 1),
            u_i: Param::new(vec![s.u[0]], 1, 1),
            u_f: Param::new(vec![s.u[1]], 1, 1),
            u_o: Param::new(vec![s.u[2]], 1, 1),
            u_c: Param::new(vec![s.u[3]], 1, 1),
            b_i: Param::new(vec![s.b[0]], 1, 1),
            b_f: Param::new(vec![s.b[1]], 1, 1),
            b_o: Param::new(vec![s.b[2]], 1, 1),
            b_c: Param::new(vec![s.b[3]], 1, 1),
        }
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        let oracle = ScalarLstm {
            w: [0.5, 0.4, 0.3, 0.2],
            u: [0.1, -0.2, 0.3, -0.4],
            b: [0.05, 1.0, -0.05, 0.0],
        };
        let params = scalar_params(&oracle);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = params.bind(&mut tape, "cell", &mut reg);
        let x = tape.leaf(vec![0.7], 1, 1, false);
        let h0 = tape.leaf(vec![0.1], 1, 1, false);
        let c0 = tape.leaf(vec![-0.3], 1, 1, false);
        let (h, c) = lstm_step(&mut tape, &vars, x, h0, c0).unwrap();
        let (eh, ec) = oracle.step(0.7, 0.1, -0.3);
        assert!((tape.data(h)[0] - eh).abs() < 1e-15);
        assert!((tape.data(c)[0] - ec).abs() < 1e-15);
    }

    #[test]
    fn forward_scan_matches_scalar_oracle_over_sequence() {
        let oracle = ScalarLstm {
            w: [0.9, -0.6, 0.35, 0.8],
            u: [0.25, 0.5, -0.45, 0.15],
            b: [0.0, 1.0, 0.1, -0.2],
        };
        let xs = [0.4, -1.2, 0.9, 0.05];
        let params = scalar_params(&oracle);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = params.bind(&mut tape, "cell", &mut reg);
        let x = tape.leaf(xs.to_vec(), 4, 1, false);
        let states = lstm_scan(&mut tape, &vars, x, 4, false).unwrap();

        let (mut h, mut c) = (0.0, 0.0);
        for (t, &xv) in xs.iter().enumerate() {
            let (nh, nc) = oracle.step(xv, h, c);
            h = nh;
            c = nc;
            assert!(
                (tape.data(states[t])[0] - h).abs() < 1e-15,
                "step {t} diverged"
            );
        }
    }

    #[test]
    fn reverse_scan_equals_forward_scan_of_reversed_input() {
        let oracle = ScalarLstm {
            w: [0.3, 0.2, -0.1, 0.6],
            u: [-0.5, 0.4, 0.2, 0.1],
            b: [0.1, 1.0, 0.0, 0.3],
        };
        let params = scalar_params(&oracle);
        let xs = vec![0.2, -0.7, 1.1];
        let rev: Vec<f64> = xs.iter().rev().copied().collect();

        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = params.bind(&mut tape, "cell", &mut reg);
        let x = tape.leaf(xs, 3, 1, false);
        let xr = tape.leaf(rev, 3, 1, false);
        let back = lstm_scan(&mut tape, &vars, x, 3, true).unwrap();
        let fwd_of_rev = lstm_scan(&mut tape, &vars, xr, 3, false).unwrap();
        for t in 0..3 {
            assert_eq!(tape.data(back[t])[0], tape.data(fwd_of_rev[2 - t])[0]);
        }
    }

    #[test]
    fn hidden_states_stay_inside_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: LstmParams<f64> = LstmParams::xavier(3, 4, &mut rng);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let vars = params.bind(&mut tape, "cell", &mut reg);
        let xd: Vec<f64> = (0..18).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = tape.leaf(xd, 6, 3, false);
        let states = lstm_scan(&mut tape, &vars, x, 6, false).unwrap();
        for s in states {
            // h = o * tanh(c) with o in (0,1), so |h| < 1 always.
            assert!(tape.data(s).iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn bilstm_pads_with_exact_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fwd: LstmParams<f64> = LstmParams::xavier(2, 3, &mut rng);
        let bwd: LstmParams<f64> = LstmParams::xavier(2, 3, &mut rng);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let fv = fwd.bind(&mut tape, "enc.fwd", &mut reg);
        let bv = bwd.bind(&mut tape, "enc.bwd", &mut reg);
        let xd: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.leaf(xd, 5, 2, false);
        let out = bilstm(&mut tape, &fv, &bv, x, 3).unwrap();
        assert_eq!(tape.dims(out), (5, 6));
        let d = tape.data(out);
        assert!(d[3 * 6..].iter().all(|&v| v == 0.0));
        assert!(d[..3 * 6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bilstm_rejects_empty_and_overlong_sequences() {
        let fwd: LstmParams<f64> = LstmParams::zeros(2, 3);
        let bwd: LstmParams<f64> = LstmParams::zeros(2, 3);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let fv = fwd.bind(&mut tape, "f", &mut reg);
        let bv = bwd.bind(&mut tape, "b", &mut reg);
        let x = tape.zeros(4, 2);
        assert!(matches!(
            bilstm(&mut tape, &fv, &bv, x, 0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            bilstm(&mut tape, &fv, &bv, x, 5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bilstm_gradient_reaches_every_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fwd: LstmParams<f64> = LstmParams::xavier(2, 2, &mut rng);
        let bwd: LstmParams<f64> = LstmParams::xavier(2, 2, &mut rng);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let fv = fwd.bind(&mut tape, "f", &mut reg);
        let bv = bwd.bind(&mut tape, "b", &mut reg);
        let xd: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.leaf(xd, 3, 2, false);
        let out = bilstm(&mut tape, &fv, &bv, x, 3).unwrap();
        let s = tape.sum(out).unwrap();
        tape.backward(s).unwrap();
        for (name, v) in reg.entries() {
            let g = tape.grad(*v).unwrap_or_else(|| panic!("{name} missing grad"));
            assert!(g.iter().all(|x| x.is_finite()), "{name} grad not finite");
        }
    }

    #[test]
    fn word_attention_is_uniform_for_zero_params() {
        let p: WordAttentionParams<f64> = WordAttentionParams::zeros(2, 3);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let v = p.bind(&mut tape, "attn", &mut reg);
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2, false);
        let (scaled, weights) = word_attention(&mut tape, &v, x, &[true, true, false]).unwrap();
        assert_eq!(tape.data(weights), &[0.5, 0.5, 0.0]);
        // Each kept row is scaled by its weight; the masked row zeroes out.
        assert_eq!(tape.data(scaled), &[0.5, 1.0, 1.5, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn word_attention_matches_hand_oracle() {
        let p = WordAttentionParams {
            w: Param::new(vec![2.0], 1, 1),
            b: Param::new(vec![0.5], 1, 1),
            ctx: Param::new(vec![1.5], 1, 1),
        };
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let v = p.bind(&mut tape, "attn", &mut reg);
        let x = tape.leaf(vec![0.3, -0.4], 2, 1, false);
        let (scaled, weights) = word_attention(&mut tape, &v, x, &[true, true]).unwrap();

        let s0 = 1.5 * (0.3f64 * 2.0 + 0.5).tanh();
        let s1 = 1.5 * (-0.4f64 * 2.0 + 0.5).tanh();
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        assert!((tape.data(weights)[0] - a0).abs() < 1e-15);
        assert!((tape.data(weights)[1] - a1).abs() < 1e-15);
        assert!((tape.data(scaled)[0] - 0.3 * a0).abs() < 1e-15);
        assert!((tape.data(scaled)[1] - -0.4 * a1).abs() < 1e-15);
    }

    #[test]
    fn word_attention_weights_sum_to_one_over_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: WordAttentionParams<f64> = WordAttentionParams::xavier(3, 4, &mut rng);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let v = p.bind(&mut tape, "attn", &mut reg);
        let xd: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = tape.leaf(xd, 5, 3, false);
        let mask = [true, false, true, true, false];
        let (_, weights) = word_attention(&mut tape, &v, x, &mask).unwrap();
        let w = tape.data(weights);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert_eq!(w[1], 0.0);
        assert_eq!(w[4], 0.0);
    }

    #[test]
    fn direction_fuse_matches_hand_oracle() {
        let p = DirectionFusionParams {
            w_f: Param::new(vec![0.5], 1, 1),
            b_f: Param::new(vec![0.1], 1, 1),
            w_b: Param::new(vec![0.7], 1, 1),
            b_b: Param::new(vec![-0.2], 1, 1),
        };
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let v = p.bind(&mut tape, "fuse", &mut reg);
        let sf = tape.leaf(vec![0.2], 1, 1, false);
        let sb = tape.leaf(vec![-0.3], 1, 1, false);
        let out = direction_fuse(&mut tape, &v, sf, sb).unwrap();
        assert_eq!(tape.dims(out), (1, 2));
        let d = tape.data(out);
        assert!((d[0] - (0.2f64 * 0.5 + 0.1).tanh()).abs() < 1e-15);
        assert!((d[1] - (-0.3f64 * 0.7 - 0.2).tanh()).abs() < 1e-15);
    }

    #[test]
    fn bialstm_pads_with_exact_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: BiaLstmParams<f64> = BiaLstmParams::xavier(2, 3, 3, &mut rng);
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let v = p.bind(&mut tape, "enc", &mut reg);
        let xd: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.leaf(xd, 6, 2, false);
        let out = bialstm(&mut tape, &v, x, 4).unwrap();
        assert_eq!(tape.dims(out), (6, 6));
        let d = tape.data(out);
        assert!(d[4 * 6..].iter().all(|&v| v == 0.0));
        assert!(d[..4 * 6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn encoder_bind_names_match_named_listing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for enc in [
            EncoderParams::<f64>::bilstm(2, 3, &mut rng),
            EncoderParams::<f64>::bialstm(2, 3, 4, &mut rng),
        ] {
            let mut tape = Tape::new();
            let mut reg = ParamRegistry::new();
            enc.bind(&mut tape, "enc", &mut reg);
            let bound: Vec<&str> = reg.entries().iter().map(|(n, _)| n.as_str()).collect();
            let listed: Vec<String> = enc
                .named("enc")
                .into_iter()
                .map(|(n, _)| n)
                .collect();
            assert_eq!(bound, listed.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn attention_boost_parameter_surplus_per_layer() {
        // Extra trainable weights added by attention + fusion at width 300:
        // two attention heads (300*300 + 300 + 300 each) and two fusion maps
        // (300*300 + 300 each).
        let plain: EncoderParams<f64> = EncoderParams::Bilstm {
            fwd: LstmParams::zeros(600, 300),
            bwd: LstmParams::zeros(600, 300),
        };
        let boosted: EncoderParams<f64> =
            EncoderParams::Bialstm(BiaLstmParams::zeros(600, 300, 300));
        let count = |e: &EncoderParams<f64>| -> usize {
            e.named("enc").iter().map(|(_, p)| p.numel()).sum()
        };
        assert_eq!(count(&boosted) - count(&plain), 361_800);
    }
}
