//! Tape gradients against central finite differences.

use latent_attn_core::cca::{cca_forward, CcaWeights};
use latent_attn_core::ndcore::{finite_diff, Backend, Eager, NdArray, Tape, Var};
use latent_attn_core::{AttnSpec, CcaParams, RopeParams, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> NdArray {
    NdArray::uniform(shape, -1.0, 1.0, r)
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    MatmulShared,
    MatmulBatched,
    Add,
    Scale,
    SliceLast,
    ConcatLast,
    ShiftSeq,
    RepeatHeads,
    GroupMean,
    Conv,
    L2,
    MulHeadExp,
    Rope,
    Attend,
    AttendGrouped,
    Reshape,
}

impl Prim {
    fn inputs(self, r: &mut ChaCha8Rng) -> Vec<NdArray> {
        match self {
            Prim::MatmulShared => vec![uniform(&[3, 2, 4], r), uniform(&[4, 5], r)],
            Prim::MatmulBatched => vec![uniform(&[2, 3, 4], r), uniform(&[2, 4, 3], r)],
            Prim::Add => vec![uniform(&[3, 4], r), uniform(&[3, 4], r)],
            Prim::Scale | Prim::SliceLast | Prim::ShiftSeq | Prim::Reshape => vec![uniform(&[4, 2, 6], r)],
            Prim::ConcatLast => vec![uniform(&[3, 2, 2], r), uniform(&[3, 2, 3], r)],
            Prim::RepeatHeads => vec![uniform(&[3, 1, 2, 3], r)],
            Prim::GroupMean => vec![uniform(&[3, 1, 4, 3], r)],
            Prim::Conv => vec![uniform(&[5, 2, 6], r), uniform(&[6, 2, 3], r)],
            Prim::L2 => vec![uniform(&[3, 2, 2, 4], r)],
            Prim::MulHeadExp => vec![uniform(&[3, 2, 2, 4], r), uniform(&[2], r)],
            Prim::Rope => vec![uniform(&[3, 1, 2, 6], r)],
            Prim::Attend => vec![uniform(&[4, 2, 2, 3], r), uniform(&[4, 2, 2, 3], r), uniform(&[4, 2, 2, 5], r)],
            Prim::AttendGrouped => vec![uniform(&[5, 1, 4, 2], r), uniform(&[5, 1, 2, 2], r), uniform(&[5, 1, 2, 2], r)],
        }
    }

    fn apply<B: Backend<Elem = f64>>(self, b: &B, v: &[B::T]) -> B::T {
        let rope = RopeParams::new(4);
        match self {
            Prim::MatmulShared | Prim::MatmulBatched => b.matmul(&v[0], &v[1]),
            Prim::Add => b.add(&v[0], &v[1]),
            Prim::Scale => Ok(b.scale(&v[0], -1.7)),
            Prim::SliceLast => b.slice_last(&v[0], 1, 3),
            Prim::ConcatLast => b.concat_last(&v[0], &v[1]),
            Prim::ShiftSeq => b.shift_seq(&v[0]),
            Prim::RepeatHeads => b.repeat_heads(&v[0], 3),
            Prim::GroupMean => b.group_mean(&v[0], 2),
            Prim::Conv => b.causal_conv1d(&v[0], &v[1], 3),
            Prim::L2 => b.l2_normalize(&v[0], 1e-6),
            Prim::MulHeadExp => b.mul_head_exp(&v[0], &v[1]),
            Prim::Rope => b.rope(&v[0], &[2, 5, 9], &rope),
            Prim::Attend => b.attend(&v[0], &v[1], &v[2], 0.8, true),
            Prim::AttendGrouped => b.attend(&v[0], &v[1], &v[2], 1.1, true),
            Prim::Reshape => b.reshape(&v[0], &[8, 6]),
        }
        .unwrap()
    }
}

fn weighted_sum(a: &NdArray, r: &NdArray) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| x * y).sum()
}

fn check_prim(p: Prim, seed: u64) {
    let mut r = rng(seed);
    let inputs = p.inputs(&mut r);
    let eager = Eager::<f64>::new();
    let out_shape = p.apply(&eager, &inputs).shape().to_vec();
    let weights = uniform(&out_shape, &mut r);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = p.apply(&tape, &vars);
    let loss = tape.sum(&tape.mul(&out, &tape.constant(weights.clone())).unwrap());
    let grads = tape.grad(&loss, &vars.iter().collect::<Vec<_>>()).unwrap();

    for (i, g) in grads.iter().enumerate() {
        let fd = finite_diff(
            |probe| {
                let mut args = inputs.clone();
                args[i] = probe.clone();
                weighted_sum(&p.apply(&eager, &args), &weights)
            },
            &inputs[i],
            STEP,
        );
        let err = g.rel_err(&fd).unwrap();
        assert!(err < TOL, "{p:?} input {i} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn every_taped_primitive_matches_finite_differences() {
    let prims = [
        Prim::MatmulShared,
        Prim::MatmulBatched,
        Prim::Add,
        Prim::Scale,
        Prim::SliceLast,
        Prim::ConcatLast,
        Prim::ShiftSeq,
        Prim::RepeatHeads,
        Prim::GroupMean,
        Prim::Conv,
        Prim::L2,
        Prim::MulHeadExp,
        Prim::Rope,
        Prim::Attend,
        Prim::AttendGrouped,
        Prim::Reshape,
    ];
    for p in prims {
        for seed in 0..10 {
            check_prim(p, seed);
        }
    }
}

/// Per-parameter relative errors of the taped CCA gradient of
/// `sum(out ⊙ R)` against central differences.
fn cca_gradient_errors(spec: &AttnSpec, seed: u64) -> Vec<(&'static str, f64)> {
    let p: CcaParams = spec.cca_params().unwrap().clone();
    let mut ws = WeightSet::init(spec, seed).unwrap();
    let mut r = rng(seed + 100);
    *ws.get_mut("beta").unwrap() = NdArray::uniform(&[p.kv_heads], -0.5, 0.5, &mut r);
    let w = CcaWeights::from_set(&ws).unwrap();
    let x = uniform(&[6, 1, p.embed_dim], &mut r);
    let weights = uniform(&[6, 1, p.embed_dim], &mut r);

    let tape = Tape::new();
    let wv = w.map(|_, a| tape.param(a.clone()));
    let out = cca_forward(&tape, &tape.constant(x.clone()), &wv, &p, true).unwrap();
    let loss = tape.sum(&tape.mul(&out, &tape.constant(weights.clone())).unwrap());
    let params: Vec<&Var> = wv.fields().iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(&loss, &params).unwrap();

    let eager = Eager::<f64>::new();
    w.fields()
        .iter()
        .zip(grads)
        .map(|(&(name, base), g)| {
            let fd = finite_diff(
                |probe| {
                    let trial = w.map(|n, a| if n == name { probe.clone() } else { a.clone() });
                    weighted_sum(&cca_forward(&eager, &x, &trial, &p, true).unwrap(), &weights)
                },
                base,
                STEP,
            );
            (name, g.rel_err(&fd).unwrap())
        })
        .collect()
}

#[test]
fn cca_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (name, err) in cca_gradient_errors(&AttnSpec::cca(16, 2, 2), seed) {
            assert!(err < TOL, "cca {name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn ccgqa_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (name, err) in cca_gradient_errors(&AttnSpec::ccgqa(16, 2, 4, 4, 2), seed) {
            assert!(err < TOL, "ccgqa {name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn taped_and_eager_cca_agree() {
    let spec = AttnSpec::ccgqa(16, 2, 4, 4, 2);
    let p = spec.cca_params().unwrap().clone();
    let w = CcaWeights::from_set(&WeightSet::init(&spec, 4).unwrap()).unwrap();
    let x = uniform(&[5, 2, 16], &mut rng(5));
    let tape = Tape::new();
    let wv = w.map(|_, a| tape.constant(a.clone()));
    let taped = cca_forward(&tape, &tape.constant(x.clone()), &wv, &p, true).unwrap();
    let eager = cca_forward(&Eager::<f64>::new(), &x, &w, &p, true).unwrap();
    assert!(tape.value(&taped).max_abs_diff(&eager).unwrap() < 1e-13);
}
