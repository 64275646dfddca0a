//! Compressed convolutional attention (CCA) and its grouped form (CCGQA).
//!
//! Queries, keys and values are produced directly in a compressed latent of
//! width `E/C1` (queries) and `E/C2` (keys, values); attention runs there and
//! only the output map returns to width `E`. Pipeline per call:
//!
//! 1. `packed = x @ w_qk`, split into `q_pre` and `k_pre` heads.
//! 2. Causal depthwise conv over sequence, then a causal per-head grouped conv.
//! 3. Add the mean of the pre-conv query and key latents back in.
//! 4. Values: half the kv heads from the current token, half from the previous.
//! 5. L2-normalize q and k to norm `√dh`, scale keys by `exp(beta)`, rotate.
//! 6. Softmax attention with scale `1/√dh`, then `w_o`.
//!
//! Everything is written against [`Backend`], so the same code runs eagerly
//! and on a gradient tape.

use crate::error::{shape_err, Result};
use crate::ndcore::{finite_diff, Backend, Eager, NdArray, Real, Tape, Var};
use crate::spec::{AttnSpec, CcaParams};
use crate::weights::WeightSet;

/// CCA tensors in pipeline form.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaWeights<T> {
    /// `[E, E/C1 + E/C2]`
    pub w_qk: T,
    /// `[P, 1, k_seq]`
    pub conv1: T,
    /// `[P, dh, k_ch]`
    pub conv2: T,
    /// `[E, (E/C2)/2]`, current token
    pub w_v: T,
    /// `[E, (E/C2)/2]`, previous token
    pub w_v_prev: T,
    /// `[E/C1, E]`
    pub w_o: T,
    /// `[Hk]`
    pub beta: T,
}

impl<T> CcaWeights<T> {
    pub const NAMES: [&'static str; 7] = ["w_qk", "conv1", "conv2", "w_v", "w_v_prev", "w_o", "beta"];

    pub fn fields(&self) -> [(&'static str, &T); 7] {
        [
            ("w_qk", &self.w_qk),
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("w_v", &self.w_v),
            ("w_v_prev", &self.w_v_prev),
            ("w_o", &self.w_o),
            ("beta", &self.beta),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> CcaWeights<U> {
        CcaWeights {
            w_qk: f("w_qk", &self.w_qk),
            conv1: f("conv1", &self.conv1),
            conv2: f("conv2", &self.conv2),
            w_v: f("w_v", &self.w_v),
            w_v_prev: f("w_v_prev", &self.w_v_prev),
            w_o: f("w_o", &self.w_o),
            beta: f("beta", &self.beta),
        }
    }
}

impl<F: Real> CcaWeights<NdArray<F>> {
    pub fn from_set(w: &WeightSet<F>) -> Result<Self> {
        Ok(Self {
            w_qk: w.get("w_qk")?.clone(),
            conv1: w.get("conv1")?.clone(),
            conv2: w.get("conv2")?.clone(),
            w_v: w.get("w_v")?.clone(),
            w_v_prev: w.get("w_v_prev")?.clone(),
            w_o: w.get("w_o")?.clone(),
            beta: w.get("beta")?.clone(),
        })
    }
}

fn seq_batch<B: Backend>(b: &B, x: &B::T, e: usize) -> Result<(usize, usize)> {
    match *b.shape_of(x) {
        [s, bt, width] if width == e => Ok((s, bt)),
        _ => shape_err("input", b.shape_of(x), &[0, 0, e]),
    }
}

/// Returns `(q_pre [S,B,Hq,dh], k_pre [S,B,Hk,dh], packed [S,B,P])`.
pub fn latent_project_qk<B: Backend>(
    b: &B,
    x: &B::T,
    w: &CcaWeights<B::T>,
    p: &CcaParams,
) -> Result<(B::T, B::T, B::T)> {
    let (s, bt) = seq_batch(b, x, p.embed_dim)?;
    let packed = b.matmul(x, &w.w_qk)?;
    let (q, k) = split_packed(b, &packed, p, s, bt)?;
    Ok((q, k, packed))
}

/// Split a packed `[S,B,P]` tensor into query and key heads.
pub fn split_packed<B: Backend>(b: &B, packed: &B::T, p: &CcaParams, s: usize, bt: usize) -> Result<(B::T, B::T)> {
    let dh = p.head_dim();
    let q = b.reshape(&b.slice_last(packed, 0, p.q_width())?, &[s, bt, p.q_heads, dh])?;
    let k = b.reshape(&b.slice_last(packed, p.q_width(), p.kv_width())?, &[s, bt, p.kv_heads, dh])?;
    Ok((q, k))
}

/// Depthwise causal conv of width `k_seq`, then a causal conv of width `k_ch`
/// mixing channels within each q/k head.
pub fn conv_stack<B: Backend>(b: &B, packed: &B::T, w: &CcaWeights<B::T>, p: &CcaParams) -> Result<B::T> {
    let h1 = b.causal_conv1d(packed, &w.conv1, p.packed_width())?;
    b.causal_conv1d(&h1, &w.conv2, p.q_heads + p.kv_heads)
}

/// Couples the convolved latents to the pre-conv ones:
/// `mu = ½(q_pre + repeat(k_pre))`, `q = q_conv + mu`,
/// `k = k_conv + group_mean(mu)`.
pub fn qk_mean<B: Backend>(
    b: &B,
    q_conv: &B::T,
    k_conv: &B::T,
    q_pre: &B::T,
    k_pre: &B::T,
    group_size: usize,
) -> Result<(B::T, B::T)> {
    let mu = b.scale(&b.add(q_pre, &b.repeat_heads(k_pre, group_size)?)?, 0.5);
    let q = b.add(q_conv, &mu)?;
    let k = b.add(k_conv, &b.group_mean(&mu, group_size)?)?;
    Ok((q, k))
}

/// Values from explicit current and previous rows: `[S,B,Hk,dh]` with the
/// first `Hk/2` heads from `x_cur @ w_v` and the rest from `x_prev @ w_v_prev`.
pub fn value_heads<B: Backend>(
    b: &B,
    x_cur: &B::T,
    x_prev: &B::T,
    w: &CcaWeights<B::T>,
    p: &CcaParams,
) -> Result<B::T> {
    let (s, bt) = seq_batch(b, x_cur, p.embed_dim)?;
    if !p.kv_heads.is_multiple_of(2) {
        return Err(crate::error::Error::OddKvHeads(p.kv_heads));
    }
    let v1 = b.matmul(x_cur, &w.w_v)?;
    let v2 = b.matmul(x_prev, &w.w_v_prev)?;
    b.reshape(&b.concat_last(&v1, &v2)?, &[s, bt, p.kv_heads, p.head_dim()])
}

/// [`value_heads`] with the previous row taken from the sequence itself
/// (zero before the first token).
pub fn value_shift<B: Backend>(b: &B, x: &B::T, w: &CcaWeights<B::T>, p: &CcaParams) -> Result<B::T> {
    value_heads(b, x, &b.shift_seq(x)?, w, p)
}

/// `q̂ = √dh · q/‖q‖`, `k̂ = √dh · exp(beta_h) · k/‖k‖` per head.
pub fn normalize_and_temper<B: Backend>(
    b: &B,
    q: &B::T,
    k: &B::T,
    w: &CcaWeights<B::T>,
    p: &CcaParams,
) -> Result<(B::T, B::T)> {
    let root = (p.head_dim() as f64).sqrt();
    let qn = b.scale(&b.l2_normalize(q, p.eps)?, root);
    let kn = b.scale(&b.l2_normalize(k, p.eps)?, root);
    Ok((qn, b.mul_head_exp(&kn, &w.beta)?))
}

/// Intermediate tensors a streaming decoder needs after a prefill.
pub struct CcaParts<T> {
    pub out: T,
    /// Packed pre-conv latent `[S,B,P]`.
    pub packed: T,
    /// Cached keys (normalized, tempered, rotated) `[S,B,Hk,dh]`.
    pub keys: T,
    pub values: T,
}

pub fn cca_forward_parts<B: Backend>(
    b: &B,
    x: &B::T,
    w: &CcaWeights<B::T>,
    p: &CcaParams,
    causal: bool,
) -> Result<CcaParts<B::T>> {
    p.validate()?;
    let (s, bt) = seq_batch(b, x, p.embed_dim)?;
    let (q_pre, k_pre, packed) = latent_project_qk(b, x, w, p)?;
    let convolved = conv_stack(b, &packed, w, p)?;
    let (q_conv, k_conv) = split_packed(b, &convolved, p, s, bt)?;
    let (q, k) = qk_mean(b, &q_conv, &k_conv, &q_pre, &k_pre, p.group_size())?;
    let v = value_shift(b, x, w, p)?;
    let (qn, kn) = normalize_and_temper(b, &q, &k, w, p)?;
    let positions: Vec<usize> = (0..s).collect();
    let rope = p.rope();
    let qr = b.rope(&qn, &positions, &rope)?;
    let kr = b.rope(&kn, &positions, &rope)?;
    let o = b.attend(&qr, &kr, &v, 1.0 / (p.head_dim() as f64).sqrt(), causal)?;
    let o = b.reshape(&o, &[s, bt, p.q_width()])?;
    let out = b.matmul(&o, &w.w_o)?;
    Ok(CcaParts { out, packed, keys: kr, values: v })
}

/// Full CCA / CCGQA forward `[S,B,E] → [S,B,E]`.
pub fn cca_forward<B: Backend>(b: &B, x: &B::T, w: &CcaWeights<B::T>, p: &CcaParams, causal: bool) -> Result<B::T> {
    Ok(cca_forward_parts(b, x, w, p, causal)?.out)
}

/// Relative error of the taped gradient of `sum(out ⊙ R)` for every CCA
/// parameter against central differences with `step`, on `[seq, 1, E]`
/// inputs. `beta` is drawn away from zero so its gradient is exercised.
pub fn gradient_errors(spec: &AttnSpec, seq: usize, seed: u64, step: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let p = spec
        .cca_params()
        .ok_or_else(|| crate::error::Error::InvalidSpec(format!("{} has no convolutional stage", spec.label())))?;
    let mut ws = WeightSet::init(spec, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    *ws.get_mut("beta")? = NdArray::uniform(&[p.kv_heads], -0.5, 0.5, &mut rng);
    let w = CcaWeights::from_set(&ws)?;
    let x = NdArray::uniform(&[seq, 1, p.embed_dim], -1.0, 1.0, &mut rng);
    let r = NdArray::uniform(&[seq, 1, p.embed_dim], -1.0, 1.0, &mut rng);

    let tape = Tape::new();
    let wv = w.map(|_, a| tape.param(a.clone()));
    let out = cca_forward(&tape, &tape.constant(x.clone()), &wv, p, true)?;
    let loss = tape.sum(&tape.mul(&out, &tape.constant(r.clone()))?);
    let params: Vec<&Var> = wv.fields().iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(&loss, &params)?;

    let eager = Eager::<f64>::new();
    let weighted = |trial: &CcaWeights<NdArray>| -> f64 {
        let y = cca_forward(&eager, &x, trial, p, true).expect("shapes fixed by the taped run");
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    w.fields()
        .iter()
        .zip(grads)
        .map(|(&(name, base), g)| {
            let fd = finite_diff(|probe| weighted(&w.map(|n, a| if n == name { probe.clone() } else { a.clone() })), base, step);
            Ok((name, g.rel_err(&fd)?))
        })
        .collect()
}
