//! Straight-line reimplementations on plain `Vec<f64>` buffers, sharing no
//! code with the library beyond reading weight data.

#![allow(clippy::needless_range_loop)]

use latent_attn_core::baselines::{gqa_forward, mha_forward, mla_forward, mla_forward_mqa, mla_merge_projections};
use latent_attn_core::cca::{cca_forward, CcaWeights};
use latent_attn_core::ndcore::Eager;
use latent_attn_core::{AttnSpec, CcaParams, GqaParams, MhaParams, MlaMode, MlaParams, NdArray, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(s: usize, b: usize, e: usize, seed: u64) -> NdArray {
    NdArray::randn(&[s, b, e], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `x[rows × k] · w[k × n]`.
fn mm(x: &[f64], rows: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for c in 0..n {
            let mut acc = 0.0;
            for i in 0..k {
                acc += x[r * k + i] * w[i * n + c];
            }
            out[r * n + c] = acc;
        }
    }
    out
}

fn rotate(v: &mut [f64], pos: usize, rotary: usize) {
    for i in 0..rotary / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / rotary as f64);
        let (sn, cs) = (pos as f64 * freq).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * cs - b * sn;
        v[2 * i + 1] = a * sn + b * cs;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Causal softmax attention for one query row against rows `0..=t`.
fn attend_row(scores: &[f64], values: &[&[f64]]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = ex.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (wt, v) in ex.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += wt / z * x;
        }
    }
    out
}

fn cca_oracle(x: &NdArray, ws: &WeightSet, p: &CcaParams) -> NdArray {
    let (s, bsz, e) = (x.dim(0), x.dim(1), x.dim(2));
    let (qw, kvw, hq, hk) = (p.embed_dim / p.q_compression, p.embed_dim / p.kv_compression, p.q_heads, p.kv_heads);
    let pw = qw + kvw;
    let dh = qw / hq;
    let g = hq / hk;
    let (ks, kc) = (p.k_seq, p.k_ch);
    let w_qk = ws.get("w_qk").unwrap().data();
    let k1 = ws.get("conv1").unwrap().data();
    let k2 = ws.get("conv2").unwrap().data();
    let w_v = ws.get("w_v").unwrap().data();
    let w_vp = ws.get("w_v_prev").unwrap().data();
    let w_o = ws.get("w_o").unwrap().data();
    let beta = ws.get("beta").unwrap().data();
    let xd = x.data();
    let row = |t: usize, b: usize| &xd[(t * bsz + b) * e..(t * bsz + b + 1) * e];

    let mut out = vec![0.0; s * bsz * e];
    for b in 0..bsz {
        let packed: Vec<Vec<f64>> = (0..s).map(|t| mm(row(t, b), 1, e, w_qk, pw)).collect();
        let c1: Vec<Vec<f64>> = (0..s)
            .map(|t| {
                (0..pw)
                    .map(|c| {
                        (0..ks)
                            .filter(|&j| t + j + 1 >= ks)
                            .map(|j| k1[c * ks + j] * packed[t + j + 1 - ks][c])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let c2: Vec<Vec<f64>> = (0..s)
            .map(|t| {
                (0..pw)
                    .map(|o| {
                        let base = (o / dh) * dh;
                        let mut acc = 0.0;
                        for i in 0..dh {
                            for j in (0..kc).filter(|&j| t + j + 1 >= kc) {
                                acc += k2[(o * dh + i) * kc + j] * c1[t + j + 1 - kc][base + i];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();

        let mut qs = vec![vec![vec![0.0; dh]; hq]; s];
        let mut ks_ = vec![vec![vec![0.0; dh]; hk]; s];
        let mut vs = vec![vec![vec![0.0; dh]; hk]; s];
        for t in 0..s {
            let mu: Vec<Vec<f64>> = (0..hq)
                .map(|h| (0..dh).map(|d| 0.5 * (packed[t][h * dh + d] + packed[t][qw + (h / g) * dh + d])).collect())
                .collect();
            for h in 0..hq {
                for d in 0..dh {
                    qs[t][h][d] = c2[t][h * dh + d] + mu[h][d];
                }
            }
            for kh in 0..hk {
                for d in 0..dh {
                    let mean: f64 = (0..g).map(|j| mu[kh * g + j][d]).sum::<f64>() / g as f64;
                    ks_[t][kh][d] = c2[t][qw + kh * dh + d] + mean;
                }
            }
            let v1 = mm(row(t, b), 1, e, w_v, kvw / 2);
            let v2 = if t == 0 { vec![0.0; kvw / 2] } else { mm(row(t - 1, b), 1, e, w_vp, kvw / 2) };
            let vfull: Vec<f64> = v1.into_iter().chain(v2).collect();
            for kh in 0..hk {
                vs[t][kh].copy_from_slice(&vfull[kh * dh..(kh + 1) * dh]);
            }
            let root = (dh as f64).sqrt();
            for v in qs[t].iter_mut() {
                let n = dot(v, v).sqrt().max(p.eps);
                v.iter_mut().for_each(|a| *a = *a / n * root);
                rotate(v, t, dh);
            }
            for (kh, v) in ks_[t].iter_mut().enumerate() {
                let n = dot(v, v).sqrt().max(p.eps);
                v.iter_mut().for_each(|a| *a = *a / n * root * beta[kh].exp());
                rotate(v, t, dh);
            }
        }
        for t in 0..s {
            let mut o = vec![];
            for h in 0..hq {
                let kh = h / g;
                let scores: Vec<f64> = (0..=t).map(|j| dot(&qs[t][h], &ks_[j][kh]) / (dh as f64).sqrt()).collect();
                let vals: Vec<&[f64]> = (0..=t).map(|j| vs[j][kh].as_slice()).collect();
                o.extend(attend_row(&scores, &vals));
            }
            let y = mm(&o, 1, qw, w_o, e);
            out[(t * bsz + b) * e..(t * bsz + b + 1) * e].copy_from_slice(&y);
        }
    }
    NdArray::from_vec(&[s, bsz, e], out).unwrap()
}

fn check_cca(spec: AttnSpec, seed: u64) {
    let p = spec.cca_params().unwrap().clone();
    let mut ws = WeightSet::init(&spec, seed).unwrap();
    *ws.get_mut("beta").unwrap() = NdArray::randn(&[p.kv_heads], 0.3, &mut ChaCha8Rng::seed_from_u64(seed + 7));
    let x = input(6, 2, p.embed_dim, seed + 1);
    let got = cca_forward(&Eager::<f64>::new(), &x, &CcaWeights::from_set(&ws).unwrap(), &p, true).unwrap();
    let want = cca_oracle(&x, &ws, &p);
    let err = got.max_abs_diff(&want).unwrap();
    assert!(err < 1e-12, "{} seed {seed}: {err:e}", spec.label());
}

#[test]
fn cca_matches_straight_line_oracle() {
    for seed in 0..3 {
        let mut p = CcaParams::new(16, 2, 2, 2, 2);
        p.k_seq = 2;
        p.k_ch = 2;
        check_cca(AttnSpec::Cca(p), seed);
        check_cca(AttnSpec::cca(16, 2, 2), seed);
    }
}

#[test]
fn ccgqa_matches_straight_line_oracle() {
    for seed in 0..3 {
        check_cca(AttnSpec::ccgqa(16, 2, 4, 4, 2), seed);
        let mut p = CcaParams::new(24, 2, 6, 6, 2);
        p.k_seq = 3;
        p.k_ch = 2;
        check_cca(AttnSpec::Ccgqa(p), seed);
    }
}

#[test]
fn ccgqa_with_unit_group_is_cca_bitwise() {
    let cca = AttnSpec::cca(16, 2, 2);
    let p = cca.cca_params().unwrap().clone();
    let grouped = AttnSpec::Ccgqa(p.clone());
    let x = input(7, 2, 16, 3);
    let run = |spec: &AttnSpec| {
        let w = CcaWeights::from_set(&WeightSet::init(spec, 9).unwrap()).unwrap();
        cca_forward(&Eager::<f64>::new(), &x, &w, &p, true).unwrap()
    };
    assert_eq!(run(&cca), run(&grouped));
}

/// Per-head loop attention with explicit heads, `kv_head = h / group`.
fn mha_oracle(x: &NdArray, ws: &WeightSet, heads: usize, kv_heads: usize, rope: bool) -> NdArray {
    let (s, bsz, e) = (x.dim(0), x.dim(1), x.dim(2));
    let d = e / heads;
    let g = heads / kv_heads;
    let kvw = kv_heads * d;
    let mut out = vec![0.0; s * bsz * e];
    for b in 0..bsz {
        let rows: Vec<&[f64]> = (0..s).map(|t| &x.data()[(t * bsz + b) * e..(t * bsz + b + 1) * e]).collect();
        let mut q: Vec<Vec<f64>> = rows.iter().map(|r| mm(r, 1, e, ws.get("w_q").unwrap().data(), e)).collect();
        let mut k: Vec<Vec<f64>> = rows.iter().map(|r| mm(r, 1, e, ws.get("w_k").unwrap().data(), kvw)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| mm(r, 1, e, ws.get("w_v").unwrap().data(), kvw)).collect();
        if rope {
            for t in 0..s {
                q[t].chunks_mut(d).for_each(|h| rotate(h, t, d));
                k[t].chunks_mut(d).for_each(|h| rotate(h, t, d));
            }
        }
        for t in 0..s {
            let mut o = vec![];
            for h in 0..heads {
                let kh = h / g;
                let qh = &q[t][h * d..(h + 1) * d];
                let scores: Vec<f64> =
                    (0..=t).map(|j| dot(qh, &k[j][kh * d..(kh + 1) * d]) / (d as f64).sqrt()).collect();
                let vals: Vec<&[f64]> = (0..=t).map(|j| &v[j][kh * d..(kh + 1) * d]).collect();
                o.extend(attend_row(&scores, &vals));
            }
            let y = mm(&o, 1, e, ws.get("w_o").unwrap().data(), e);
            out[(t * bsz + b) * e..(t * bsz + b + 1) * e].copy_from_slice(&y);
        }
    }
    NdArray::from_vec(&[s, bsz, e], out).unwrap()
}

#[test]
fn mha_matches_loop_oracle() {
    for rope in [false, true] {
        let spec = AttnSpec::Mha(MhaParams { embed_dim: 8, heads: 2, rope });
        let ws = WeightSet::init(&spec, 1).unwrap();
        let x = input(5, 2, 8, 2);
        let err = mha_forward(&x, &ws, true).unwrap().max_abs_diff(&mha_oracle(&x, &ws, 2, 2, rope)).unwrap();
        assert!(err < 1e-12, "rope={rope}: {err:e}");
    }
}

#[test]
fn gqa_matches_replication_oracle() {
    for g in [1, 2, 4] {
        let spec = AttnSpec::Gqa(GqaParams { embed_dim: 16, heads: 4, group_size: g, rope: true });
        let ws = WeightSet::init(&spec, g as u64).unwrap();
        let x = input(6, 2, 16, 3);
        let err = gqa_forward(&x, &ws, true).unwrap().max_abs_diff(&mha_oracle(&x, &ws, 4, 4 / g, true)).unwrap();
        assert!(err < 1e-12, "G={g}: {err:e}");
    }
}

#[test]
fn gqa_unit_group_is_mha_bitwise() {
    let mha = AttnSpec::mha(16, 4);
    let gqa = AttnSpec::gqa(16, 4, 1);
    let wm = WeightSet::init(&mha, 3).unwrap();
    let wg = WeightSet::from_tensors(&gqa, latent_attn_core::WeightKind::Gqa, wm.clone().into_tensors()).unwrap();
    let x = input(9, 2, 16, 4);
    assert_eq!(mha_forward(&x, &wm, true).unwrap(), gqa_forward(&x, &wg, true).unwrap());
}

fn mla_oracle(x: &NdArray, ws: &WeightSet, p: &MlaParams) -> NdArray {
    let (s, bsz, e) = (x.dim(0), x.dim(1), x.dim(2));
    let (h, d, r) = (p.heads, e / p.heads, p.rope_dim());
    let (lq, lkv) = (e / p.q_compression, e / p.kv_compression);
    let get = |n: &str| ws.get(n).unwrap().data().to_vec();
    let mut out = vec![0.0; s * bsz * e];
    for b in 0..bsz {
        let rows: Vec<&[f64]> = (0..s).map(|t| &x.data()[(t * bsz + b) * e..(t * bsz + b + 1) * e]).collect();
        let cq: Vec<Vec<f64>> = rows.iter().map(|x| mm(x, 1, e, &get("w_dq"), lq)).collect();
        let ckv: Vec<Vec<f64>> = rows.iter().map(|x| mm(x, 1, e, &get("w_dkv"), lkv)).collect();
        // per head, concatenated [nope ‖ rope] query and key vectors
        let mut qh = vec![vec![vec![]; h]; s];
        let mut kh = vec![vec![vec![]; h]; s];
        let mut vh = vec![vec![vec![]; h]; s];
        for t in 0..s {
            let q = mm(&cq[t], 1, lq, &get("w_uq"), e);
            let k = mm(&ckv[t], 1, lkv, &get("w_uk"), e);
            let v = mm(&ckv[t], 1, lkv, &get("w_uv"), e);
            let (qr, kr) = if r > 0 {
                let mut qr = mm(&cq[t], 1, lq, &get("w_uqr"), h * r);
                qr.chunks_mut(r).for_each(|c| rotate(c, t, r));
                let mut kr = mm(rows[t], 1, e, &get("w_kr"), r);
                rotate(&mut kr, t, r);
                (qr, kr)
            } else {
                (vec![], vec![])
            };
            for head in 0..h {
                let mut qv = q[head * d..(head + 1) * d].to_vec();
                qv.extend_from_slice(&qr[head * r..(head + 1) * r]);
                let mut kv = k[head * d..(head + 1) * d].to_vec();
                kv.extend_from_slice(&kr);
                qh[t][head] = qv;
                kh[t][head] = kv;
                vh[t][head] = v[head * d..(head + 1) * d].to_vec();
            }
        }
        let scale = 1.0 / ((d + r) as f64).sqrt();
        for t in 0..s {
            let mut o = vec![];
            for head in 0..h {
                let scores: Vec<f64> = (0..=t).map(|j| dot(&qh[t][head], &kh[j][head]) * scale).collect();
                let vals: Vec<&[f64]> = (0..=t).map(|j| vh[j][head].as_slice()).collect();
                o.extend(attend_row(&scores, &vals));
            }
            let y = mm(&o, 1, e, &get("w_o"), e);
            out[(t * bsz + b) * e..(t * bsz + b + 1) * e].copy_from_slice(&y);
        }
    }
    NdArray::from_vec(&[s, bsz, e], out).unwrap()
}

fn mla(e: usize, h: usize, cq: usize, ckv: usize, r: Option<usize>) -> (AttnSpec, MlaParams) {
    let p = MlaParams {
        embed_dim: e,
        heads: h,
        q_compression: cq,
        kv_compression: ckv,
        rope_dim: r,
        mode: MlaMode::Mha,
        rope_theta: 10000.0,
    };
    (AttnSpec::Mla(p.clone()), p)
}

#[test]
fn mla_matches_loop_oracle() {
    for r in [Some(0), None, Some(2)] {
        let (spec, p) = mla(16, 4, 2, 4, r);
        let ws = WeightSet::init(&spec, 5).unwrap();
        let x = input(6, 2, 16, 6);
        let err = mla_forward(&x, &ws, true).unwrap().max_abs_diff(&mla_oracle(&x, &ws, &p)).unwrap();
        assert!(err < 1e-12, "r={r:?}: {err:e}");
    }
}

#[test]
fn uncompressed_mla_with_identity_up_projections_is_mha() {
    let (spec, _) = mla(8, 2, 1, 1, Some(0));
    let mut ws = WeightSet::init(&spec, 2).unwrap();
    for n in ["w_uq", "w_uk", "w_uv"] {
        *ws.get_mut(n).unwrap() = NdArray::eye(8);
    }
    let mha = AttnSpec::Mha(MhaParams { embed_dim: 8, heads: 2, rope: false });
    let mut t = std::collections::BTreeMap::new();
    t.insert("w_q".to_string(), ws.get("w_dq").unwrap().clone());
    t.insert("w_k".to_string(), ws.get("w_dkv").unwrap().clone());
    t.insert("w_v".to_string(), ws.get("w_dkv").unwrap().clone());
    t.insert("w_o".to_string(), ws.get("w_o").unwrap().clone());
    let wm = WeightSet::from_tensors(&mha, latent_attn_core::WeightKind::Mha, t).unwrap();
    let x = input(5, 1, 8, 3);
    let err = mla_forward(&x, &ws, true).unwrap().max_abs_diff(&mha_forward(&x, &wm, true).unwrap()).unwrap();
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn merged_mla_is_explicit_mla_without_rope() {
    for seed in 0..10 {
        let (spec, _) = mla(32, 4, 2, 4, Some(0));
        let ws = WeightSet::init(&spec, seed).unwrap();
        let x = input(7, 2, 32, seed + 50);
        let a = mla_forward(&x, &ws, true).unwrap();
        let b = mla_forward_mqa(&x, &mla_merge_projections(&ws).unwrap(), true).unwrap();
        assert!(b.rel_err(&a).unwrap() < 1e-10);
    }
}
