//! The spectral-temporal network.
//!
//! Sequences are time-major (`[L x d]`). The interactor's frequency path
//! transposes to one row per channel for the per-channel transforms and
//! back again.
//!
//! Topology: conv, M³I block, conv, M³I block, GRU over the fused stream,
//! then a temporal head for `f_T`; the last block's frequency stream is
//! pooled into `f_F` and mapped by the frequency head to a logit.

mod params;

pub use params::{
    AttentionIds, BlockIds, Bound, ConvIds, GateKind, GruIds, Layout, LinearIds, ModelConfig, ModelParams, ParamId,
    ScaleIds,
};

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::signal::FeatureSequence;
use crate::spectral::half_len;

/// Shortest input the two halving stages accept.
pub const MIN_SEQUENCE_LEN: usize = 20;

/// Temporal length after both conv modules.
pub fn temporal_len(l: usize) -> usize {
    l.div_ceil(2).div_ceil(2)
}

/// Row indices of the even and odd halves. For odd `L` the odd half
/// repeats its last row so both halves have `⌈L/2⌉` rows.
pub fn even_odd_indices(l: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if l < 2 {
        return Err(Error::TooShort {
            what: "interactor input",
            min: 2,
            got: l,
        });
    }
    let even: Vec<usize> = (0..l).step_by(2).collect();
    let mut odd: Vec<usize> = (1..l).step_by(2).collect();
    if odd.len() < even.len() {
        odd.push(*odd.last().expect("l >= 2"));
    }
    Ok((even, odd))
}

/// Splits the rows (timesteps) of `x` into even and odd halves.
pub fn split_even_odd<T: Scalar>(x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (even, odd) = even_odd_indices(x.rows())?;
    let pick = |idx: &[usize]| Matrix::from_fn(idx.len(), x.cols(), |r, c| x[(idx[r], c)]);
    Ok((pick(&even), pick(&odd)))
}

/// Inverse of [`split_even_odd`]; `len` is the original length, so an odd
/// source drops the padded row.
pub fn interleave<T: Scalar>(even: &Matrix<T>, odd: &Matrix<T>, len: usize) -> Result<Matrix<T>> {
    let mut t = Tape::new();
    let (e, o) = (t.constant(even.clone()), t.constant(odd.clone()));
    let out = t.interleave_rows(e, o, len)?;
    Ok(t.value(out).clone())
}

fn linear<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &LinearIds, x: Var) -> Result<Var> {
    let y = t.matmul_t(x, b.var(ids.weight))?;
    t.add_row(y, b.var(ids.bias))
}

/// Same-padded conv, tanh, then mean pooling by two: `[L x c] -> [⌈L/2⌉ x d]`.
pub fn conv_module<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &ConvIds, x: Var) -> Result<Var> {
    let l = t.value(x).rows();
    if l < ids.kernel {
        return Err(Error::TooShort {
            what: "conv module input",
            min: ids.kernel,
            got: l,
        });
    }
    let c = t.conv1d(x, b.var(ids.weight), b.var(ids.bias), ids.kernel, 1)?;
    let c = t.tanh(c);
    t.avg_pool_rows(c, 2)
}

/// Even rows through a pointwise projection, odd rows through the learnable
/// spectral filter, re-interleaved and projected again.
pub fn single_scale_interactor<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &ScaleIds, x: Var) -> Result<Var> {
    let l = t.value(x).rows();
    let (even_idx, odd_idx) = even_odd_indices(l)?;
    let n = even_idx.len();
    let x_even = t.gather_rows(x, even_idx)?;
    let x_odd = t.gather_rows(x, odd_idx)?;
    let y_even = linear(t, b, &ids.even, x_even)?;

    let per_channel = t.transpose(x_odd);
    let spec = t.rdft(per_channel)?;
    let k = half_len(n);
    let wre = t.interp_cols(b.var(ids.filter_re), k)?;
    let wim = t.interp_cols(b.var(ids.filter_im), k)?;
    let filtered = t.complex_filter(spec, wre, wim, n)?;
    let back = t.irdft(filtered, n)?;
    let y_odd = t.transpose(back);

    let mixed = t.interleave_rows(y_even, y_odd, l)?;
    linear(t, b, &ids.post, mixed)
}

/// Multi-head scaled dot-product self-attention (no residual).
pub fn self_attention<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &AttentionIds, x: Var) -> Result<Var> {
    let d = t.value(x).cols();
    let dh = d / ids.heads;
    let q = linear(t, b, &ids.query, x)?;
    let k = t.matmul_t(x, b.var(ids.key))?;
    let v = linear(t, b, &ids.value, x)?;
    let inv = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut heads = Vec::with_capacity(ids.heads);
    for h in 0..ids.heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, s, e)?;
        let kh = t.slice_cols(k, s, e)?;
        let vh = t.slice_cols(v, s, e)?;
        let scores = t.matmul_t(qh, kh)?;
        let scores = t.scale(scores, inv);
        let attn = t.softmax_rows(scores);
        heads.push(t.matmul(attn, vh)?);
    }
    let cat = t.concat_cols(&heads)?;
    linear(t, b, &ids.output, cat)
}

/// Mean of the single-scale interactors, then self-attention with a residual.
pub fn multi_scale_interactor<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &BlockIds, x: Var) -> Result<Var> {
    if ids.scales.is_empty() {
        return Err(Error::InvalidInput("multi-scale interactor needs at least one scale".into()));
    }
    let mut acc: Option<Var> = None;
    for s in &ids.scales {
        let y = single_scale_interactor(t, b, s, x)?;
        acc = Some(match acc {
            None => y,
            Some(a) => t.add(a, y)?,
        });
    }
    let mean = t.scale(acc.expect("non-empty"), T::one() / T::from_usize_lossy(ids.scales.len()));
    let attn = self_attention(t, b, &ids.attention, mean)?;
    t.add(mean, attn)
}

/// `g = gate([f_time, f_freq] Wᵀ + b)`, output `f_time⊙g + f_freq⊙(1−g)`.
/// Returns the fused stream and the gate.
pub fn self_gated_fusion<T: Scalar>(
    t: &mut Tape<T>,
    b: &Bound,
    ids: &LinearIds,
    kind: GateKind,
    f_time: Var,
    f_freq: Var,
) -> Result<(Var, Var)> {
    let (st, sf) = (t.value(f_time).shape(), t.value(f_freq).shape());
    if st != sf {
        return Err(Error::Shape {
            op: "self_gated_fusion",
            detail: format!("{st:?} vs {sf:?}"),
        });
    }
    let cat = t.concat_cols(&[f_time, f_freq])?;
    let z = linear(t, b, ids, cat)?;
    let g = match kind {
        GateKind::Sigmoid => t.sigmoid(z),
        GateKind::Softmax => t.softmax_rows(z),
    };
    let diff = t.sub(f_time, f_freq)?;
    let gated = t.mul(g, diff)?;
    Ok((t.add(f_freq, gated)?, g))
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub fused: Var,
    pub freq: Var,
    pub gate: Var,
}

pub fn m3i_block<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &BlockIds, x: Var) -> Result<BlockOutput> {
    let freq = multi_scale_interactor(t, b, ids, x)?;
    let (fused, gate) = self_gated_fusion(t, b, &ids.gate, ids.gate_kind, x, freq)?;
    Ok(BlockOutput { fused, freq, gate })
}

/// Single-layer GRU from a zero state, returning every hidden state.
pub fn gru<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &GruIds, x: Var) -> Result<Var> {
    let (l, _) = t.value(x).shape();
    let d = t.value(b.var(ids.w_hh)).cols();
    let xi = t.matmul_t(x, b.var(ids.w_ih))?;
    let xi = t.add_row(xi, b.var(ids.b_ih))?;
    let mut h = t.constant(Matrix::zeros(1, d));
    let mut states = Vec::with_capacity(l);
    for step in 0..l {
        let xt = t.slice_rows(xi, step, step + 1)?;
        let hh = t.matmul_t(h, b.var(ids.w_hh))?;
        let hh = t.add_row(hh, b.var(ids.b_hh))?;
        let (xr, xz, xn) = (t.slice_cols(xt, 0, d)?, t.slice_cols(xt, d, 2 * d)?, t.slice_cols(xt, 2 * d, 3 * d)?);
        let (hr, hz, hn) = (t.slice_cols(hh, 0, d)?, t.slice_cols(hh, d, 2 * d)?, t.slice_cols(hh, 2 * d, 3 * d)?);
        let r = t.add(xr, hr)?;
        let r = t.sigmoid(r);
        let z = t.add(xz, hz)?;
        let z = t.sigmoid(z);
        let rn = t.mul(r, hn)?;
        let n = t.add(xn, rn)?;
        let n = t.tanh(n);
        let hm = t.sub(h, n)?;
        let zh = t.mul(z, hm)?;
        h = t.add(n, zh)?;
        states.push(h);
    }
    t.concat_rows(&states)
}

/// Softmax-weighted sum over timesteps: `[L x d] -> [1 x d]`.
pub fn selective_pooling<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &LinearIds, seq: Var) -> Result<Var> {
    let scores = linear(t, b, ids, seq)?;
    let scores = t.transpose(scores);
    let weights = t.softmax_rows(scores);
    t.matmul(weights, seq)
}

fn head<T: Scalar>(t: &mut Tape<T>, b: &Bound, ids: &[LinearIds; 2], x: Var) -> Result<Var> {
    let h = linear(t, b, &ids[0], x)?;
    let h = t.tanh(h);
    linear(t, b, &ids[1], h)
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    /// `[L_T x temporal_dim]`.
    pub f_t: Var,
    /// `[1 x d]`.
    pub f_f: Var,
    /// `[1 x 1]`.
    pub logit: Var,
    pub gates: [Var; 2],
}

pub fn forward_on_tape<T: Scalar>(t: &mut Tape<T>, b: &Bound, layout: &Layout, x: Var) -> Result<EmbeddingVars> {
    let l = t.value(x).rows();
    if l < MIN_SEQUENCE_LEN {
        return Err(Error::TooShort {
            what: "network input sequence",
            min: MIN_SEQUENCE_LEN,
            got: l,
        });
    }
    let c1 = conv_module(t, b, &layout.convs[0], x)?;
    let b1 = m3i_block(t, b, &layout.blocks[0], c1)?;
    let c2 = conv_module(t, b, &layout.convs[1], b1.fused)?;
    let b2 = m3i_block(t, b, &layout.blocks[1], c2)?;
    let h = gru(t, b, &layout.gru, b2.fused)?;
    let f_t = head(t, b, &layout.temporal_head, h)?;
    let f_f = selective_pooling(t, b, &layout.pool, b2.freq)?;
    let logit = head(t, b, &layout.freq_head, f_f)?;
    Ok(EmbeddingVars {
        f_t,
        f_f,
        logit,
        gates: [b1.gate, b2.gate],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Embeddings<T> {
    pub f_t: Matrix<T>,
    pub f_f: Vec<T>,
    pub logit: T,
}

/// Mean and count of the gate values of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateSummary {
    pub sum: f64,
    pub count: usize,
}

fn check_input<T: Scalar>(features: &FeatureSequence<T>, params: &ModelParams<T>) -> Result<()> {
    let want = params.config().input_channels;
    if features.channels() != want {
        return Err(Error::Shape {
            op: "forward",
            detail: format!("{} input channels, model expects {want}", features.channels()),
        });
    }
    Ok(())
}

/// Inference for many sequences, binding the parameters once.
pub fn forward_many<T: Scalar>(
    features: &[FeatureSequence<T>],
    params: &ModelParams<T>,
) -> Result<Vec<(Embeddings<T>, GateSummary)>> {
    let mut t = Tape::new();
    let b = params.bind(&mut t, false);
    let mark = t.len();
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        check_input(f, params)?;
        let x = t.constant(f.values.clone());
        let ev = forward_on_tape(&mut t, &b, params.layout(), x)?;
        let mut gs = GateSummary::default();
        for g in ev.gates {
            let m = t.value(g);
            gs.sum += m.sum().to_f64_lossy();
            gs.count += m.len();
        }
        out.push((
            Embeddings {
                f_t: t.value(ev.f_t).clone(),
                f_f: t.value(ev.f_f).as_slice().to_vec(),
                logit: t.scalar(ev.logit),
            },
            gs,
        ));
        t.truncate(mark);
    }
    Ok(out)
}

pub fn forward<T: Scalar>(features: &FeatureSequence<T>, params: &ModelParams<T>) -> Result<Embeddings<T>> {
    let mut v = forward_many(std::slice::from_ref(features), params)?;
    Ok(v.pop().expect("one input").0)
}

/// Mean gate value over every timestep, channel, block and sample.
/// Above one half means the fused stream leans temporal.
pub fn gate_statistics<T: Scalar>(params: &ModelParams<T>, dataset: &[FeatureSequence<T>]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("gate statistics need at least one sample".into()));
    }
    let (sum, count) = forward_many(dataset, params)?
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (_, g)| (s + g.sum, c + g.count));
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests;
