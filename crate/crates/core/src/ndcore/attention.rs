//! Scaled dot-product attention over `[S, B, H, D]` buffers.
//!
//! Scores are materialized one `(batch, head)` slice at a time, so peak memory
//! is `Sq × Sk` per worker rather than `B × H × Sq × Sk`. Key/value heads are
//! shared by runs of consecutive query heads (`kv_head = q_head / (Hq / Hk)`).

use rayon::prelude::*;

use crate::error::{shape_err, Result};

use super::array::{gemm, MatRef, NdArray, Real};
use super::flops::{self, Category};
use super::ops::softmax_row;

/// Borrowed `[seq, batch, heads, dim]` row-major buffer.
#[derive(Clone, Copy, Debug)]
pub struct HeadsView<'a, F> {
    pub data: &'a [F],
    pub seq: usize,
    pub batch: usize,
    pub heads: usize,
    pub dim: usize,
}

impl<'a, F: Real> HeadsView<'a, F> {
    pub fn of(a: &'a NdArray<F>) -> Result<Self> {
        match *a.shape() {
            [seq, batch, heads, dim] => Ok(Self { data: a.data(), seq, batch, heads, dim }),
            _ => shape_err("attention", a.shape(), &[]),
        }
    }

    fn shape(&self) -> [usize; 4] {
        [self.seq, self.batch, self.heads, self.dim]
    }

    /// Rows of head `h` in batch `b` as a `[seq, dim]` matrix.
    fn rows(&self, b: usize, h: usize) -> MatRef<'a, F> {
        MatRef {
            data: self.data,
            offset: (b * self.heads + h) * self.dim,
            rows: self.seq,
            cols: self.dim,
            rs: self.batch * self.heads * self.dim,
            cs: 1,
        }
    }

    /// Transpose of [`Self::rows`]: a `[dim, seq]` matrix.
    fn rows_t(&self, b: usize, h: usize) -> MatRef<'a, F> {
        let m = self.rows(b, h);
        MatRef { rows: m.cols, cols: m.rows, rs: m.cs, cs: m.rs, ..m }
    }
}

/// Inputs to one attention call. `q_rope`/`k_rope` add a second score term
/// `q_rope · k_ropeᵀ` (MLA's decoupled rotary heads).
pub struct AttentionInput<'a, F> {
    pub q: HeadsView<'a, F>,
    pub k: HeadsView<'a, F>,
    pub v: HeadsView<'a, F>,
    pub rope: Option<(HeadsView<'a, F>, HeadsView<'a, F>)>,
    pub scale: F,
    /// Query `i` sees keys `j ≤ i + (Sk − Sq)`.
    pub causal: bool,
}

impl<F: Real> AttentionInput<'_, F> {
    fn validate(&self) -> Result<()> {
        let (q, k, v) = (&self.q, &self.k, &self.v);
        let bad = q.batch != k.batch
            || k.batch != v.batch
            || k.seq != v.seq
            || q.dim != k.dim
            || k.heads != v.heads
            || k.heads == 0
            || q.heads % k.heads != 0;
        if bad {
            return shape_err("attention", &q.shape(), &k.shape());
        }
        if let Some((qr, kr)) = &self.rope {
            let bad = qr.seq != q.seq
                || qr.batch != q.batch
                || qr.heads != q.heads
                || kr.seq != k.seq
                || kr.batch != k.batch
                || qr.dim != kr.dim
                || kr.heads == 0
                || q.heads % kr.heads != 0;
            if bad {
                return shape_err("attention(rope)", &qr.shape(), &kr.shape());
            }
        }
        Ok(())
    }
}

/// Returns the `[Sq, B, Hq, Dv]` attention output as a flat buffer.
pub fn attend_views<F: Real>(inp: &AttentionInput<'_, F>) -> Result<Vec<F>> {
    inp.validate()?;
    let (q, k, v) = (&inp.q, &inp.k, &inp.v);
    let (sq, sk, batch, hq, dv) = (q.seq, k.seq, q.batch, q.heads, v.dim);
    let pairs = (batch * hq * sq * sk) as u64;
    flops::record(Category::Attention, 2 * pairs * (q.dim + dv) as u64);
    flops::record(Category::Elementwise, 4 * pairs);
    if let Some((qr, _)) = &inp.rope {
        flops::record(Category::RopeExtra, 2 * pairs * qr.dim as u64);
    }

    let group = hq / k.heads;
    let offset = sk as isize - sq as isize;
    let head_out = |bh: usize| -> Vec<F> {
        let (b, h) = (bh / hq, bh % hq);
        let mut scores = vec![F::zero(); sq * sk];
        gemm(q.rows(b, h), k.rows_t(b, h / group), &mut scores, 0, sk, false);
        if let Some((qr, kr)) = &inp.rope {
            let rgroup = hq / kr.heads;
            gemm(qr.rows(b, h), kr.rows_t(b, h / rgroup), &mut scores, 0, sk, true);
        }
        if sk > 0 {
            for (i, row) in scores.chunks_mut(sk).enumerate() {
                let visible = if inp.causal {
                    (i as isize + offset + 1).clamp(0, sk as isize) as usize
                } else {
                    sk
                };
                softmax_row(row, visible, inp.scale);
            }
        }
        let probs = MatRef { data: &scores[..], offset: 0, rows: sq, cols: sk, rs: sk, cs: 1 };
        let mut o = vec![F::zero(); sq * dv];
        gemm(probs, v.rows(b, h / group), &mut o, 0, dv, false);
        o
    };
    let per_head: Vec<Vec<F>> = (0..batch * hq).into_par_iter().map(head_out).collect();

    let mut out = vec![F::zero(); sq * batch * hq * dv];
    for (bh, o) in per_head.iter().enumerate() {
        for i in 0..sq {
            let dst = (i * batch * hq + bh) * dv;
            out[dst..dst + dv].copy_from_slice(&o[i * dv..(i + 1) * dv]);
        }
    }
    Ok(out)
}

/// `softmax(scale · q kᵀ) v` per head; `q: [Sq,B,Hq,D]`, `k: [Sk,B,Hk,D]`,
/// `v: [Sk,B,Hk,Dv]` with `Hk | Hq`.
pub fn attend<F: Real>(
    q: &NdArray<F>,
    k: &NdArray<F>,
    v: &NdArray<F>,
    scale: F,
    causal: bool,
) -> Result<NdArray<F>> {
    let inp = AttentionInput {
        q: HeadsView::of(q)?,
        k: HeadsView::of(k)?,
        v: HeadsView::of(v)?,
        rope: None,
        scale,
        causal,
    };
    let out = attend_views(&inp)?;
    NdArray::from_vec(&[q.dim(0), q.dim(1), q.dim(2), v.dim(3)], out)
}

/// [`attend`] with an additional decoupled rotary score term.
pub fn attend_with_rope<F: Real>(
    q: &NdArray<F>,
    k: &NdArray<F>,
    v: &NdArray<F>,
    q_rope: &NdArray<F>,
    k_rope: &NdArray<F>,
    scale: F,
    causal: bool,
) -> Result<NdArray<F>> {
    let inp = AttentionInput {
        q: HeadsView::of(q)?,
        k: HeadsView::of(k)?,
        v: HeadsView::of(v)?,
        rope: Some((HeadsView::of(q_rope)?, HeadsView::of(k_rope)?)),
        scale,
        causal,
    };
    let out = attend_views(&inp)?;
    NdArray::from_vec(&[q.dim(0), q.dim(1), q.dim(2), v.dim(3)], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct loop evaluation, one query/key pair at a time.
    fn naive(q: &NdArray<f64>, k: &NdArray<f64>, v: &NdArray<f64>, scale: f64, causal: bool) -> NdArray<f64> {
        let [sq, b, hq, d] = [q.dim(0), q.dim(1), q.dim(2), q.dim(3)];
        let (sk, hk, dv) = (k.dim(0), k.dim(2), v.dim(3));
        let mut out = NdArray::zeros(&[sq, b, hq, dv]);
        for bi in 0..b {
            for h in 0..hq {
                let kh = h / (hq / hk);
                for i in 0..sq {
                    let last = if causal { i + sk - sq } else { sk - 1 };
                    let logits: Vec<f64> = (0..=last)
                        .map(|j| scale * (0..d).map(|c| q.get(&[i, bi, h, c]) * k.get(&[j, bi, kh, c])).sum::<f64>())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = w.iter().sum();
                    for c in 0..dv {
                        let o: f64 = (0..=last).map(|j| w[j] / z * v.get(&[j, bi, kh, c])).sum();
                        out.set(&[i, bi, h, c], o);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops_with_grouped_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = NdArray::<f64>::randn(&[5, 2, 4, 3], 1.0, &mut rng);
        let k = NdArray::<f64>::randn(&[5, 2, 2, 3], 1.0, &mut rng);
        let v = NdArray::<f64>::randn(&[5, 2, 2, 6], 1.0, &mut rng);
        for causal in [false, true] {
            let fast = attend(&q, &k, &v, 0.4, causal).unwrap();
            let slow = naive(&q, &k, &v, 0.4, causal);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn decode_query_sees_whole_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = NdArray::<f64>::randn(&[1, 1, 2, 4], 1.0, &mut rng);
        let k = NdArray::<f64>::randn(&[6, 1, 2, 4], 1.0, &mut rng);
        let v = NdArray::<f64>::randn(&[6, 1, 2, 4], 1.0, &mut rng);
        let a = attend(&q, &k, &v, 0.5, true).unwrap();
        let b = attend(&q, &k, &v, 0.5, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rope_term_equals_concatenated_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s, h, d, r) = (4, 3, 4, 2);
        let q = NdArray::<f64>::randn(&[s, 1, h, d], 1.0, &mut rng);
        let k = NdArray::<f64>::randn(&[s, 1, h, d], 1.0, &mut rng);
        let v = NdArray::<f64>::randn(&[s, 1, h, d], 1.0, &mut rng);
        let qr = NdArray::<f64>::randn(&[s, 1, h, r], 1.0, &mut rng);
        let kr = NdArray::<f64>::randn(&[s, 1, 1, r], 1.0, &mut rng);
        let split = attend_with_rope(&q, &k, &v, &qr, &kr, 0.3, true).unwrap();
        let kr_full = super::super::ops::repeat_heads(&kr, h).unwrap();
        let qc = super::super::ops::concat_last(&q, &qr).unwrap();
        let kc = super::super::ops::concat_last(&k, &kr_full).unwrap();
        let joint = attend(&qc, &kc, &v, 0.3, true).unwrap();
        assert!(split.max_abs_diff(&joint).unwrap() < 1e-13);
    }

    #[test]
    fn counts_attention_flops() {
        let q = NdArray::<f64>::zeros(&[3, 2, 4, 5]);
        let k = NdArray::<f64>::zeros(&[7, 2, 2, 5]);
        let v = NdArray::<f64>::zeros(&[7, 2, 2, 6]);
        let (_, n) = flops::instrument_flops(|| attend(&q, &k, &v, 1.0, false).unwrap());
        assert_eq!(n.attention, 2 * 2 * 4 * 3 * 7 * (5 + 6));
        assert_eq!(n.projection, 0);
    }
}
