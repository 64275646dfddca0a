//! Reverse-mode differentiation over array primitives.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in creation
//! order, which is already a topological order; [`Tape::grad`] walks it
//! backwards once. Tapes are built per forward call and are not `Sync`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::rope::{rope_apply, rope_apply_inverse, RopeParams};

use super::array::NdArray;
use super::backend::Backend;
use super::flops::{self, Category};
use super::ops;

type Backward = Box<dyn Fn(&NdArray) -> Result<Vec<NdArray>>>;

struct Node {
    value: Rc<NdArray>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone)]
pub struct Var {
    id: usize,
    shape: Vec<usize>,
}

impl Var {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf whose gradient will be requested.
    pub fn param(&self, a: NdArray) -> Var {
        self.push(a, vec![], None)
    }

    /// Leaf treated as data.
    pub fn constant(&self, a: NdArray) -> Var {
        self.push(a, vec![], None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: &Var) -> NdArray {
        (*self.val(v)).clone()
    }

    fn val(&self, v: &Var) -> Rc<NdArray> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    fn push(&self, value: NdArray, parents: Vec<usize>, backward: Option<Backward>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let shape = value.shape().to_vec();
        nodes.push(Node { value: Rc::new(value), parents, backward });
        Var { id, shape }
    }

    /// `d root / d param` for each param. Params the root does not depend on
    /// get zero gradients.
    pub fn grad(&self, root: &Var, params: &[&Var]) -> Result<Vec<NdArray>> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::NotScalarRoot(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<NdArray>> = vec![None; root.id + 1];
        adj[root.id] = Some(NdArray::full(root_val.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let grads = backward(&g)?;
                debug_assert_eq!(grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(grads) {
                    adj[p] = Some(match adj[p].take() {
                        Some(acc) => ops::add(&acc, &pg)?,
                        None => pg,
                    });
                }
            }
            adj[id] = Some(g);
        }
        Ok(params
            .iter()
            .map(|p| match adj.get(p.id).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => NdArray::zeros(&p.shape),
            })
            .collect())
    }

    pub fn sum(&self, a: &Var) -> Var {
        let v = self.val(a);
        let shape = a.shape.clone();
        self.push(
            NdArray::scalar(v.sum()),
            vec![a.id],
            Some(Box::new(move |g| Ok(vec![NdArray::full(&shape, g.data()[0])]))),
        )
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let out = ops::mul(&av, &bv)?;
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(move |g| Ok(vec![ops::mul(g, &bv)?, ops::mul(g, &av)?]))),
        ))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::sub(&self.val(a), &self.val(b))?;
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g| Ok(vec![g.clone(), ops::scale(g, -1.0)]))),
        ))
    }

    pub fn permute(&self, a: &Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(&self.val(a), axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.push(
            out,
            vec![a.id],
            Some(Box::new(move |g| Ok(vec![ops::permute(g, &inverse)?]))),
        ))
    }

    /// `softmax(scale · x)` over the last axis, optionally causally masked
    /// on `[.., Sq, Sk]` scores.
    pub fn softmax_rows(&self, x: &Var, scale: f64, causal: bool) -> Result<Var> {
        let xv = self.val(x);
        let y = Rc::new(if causal {
            ops::softmax_rows_causal(&xv, scale)?
        } else {
            ops::softmax_rows(&xv, scale)?
        });
        let yc = Rc::clone(&y);
        Ok(self.push(
            (*y).clone(),
            vec![x.id],
            Some(Box::new(move |g| {
                let n = *yc.shape().last().unwrap();
                let mut dx = NdArray::zeros(yc.shape());
                for ((dxr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(yc.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = scale * yv * (gv - inner);
                    }
                }
                Ok(vec![dx])
            })),
        ))
    }
}

fn conv_backward(x: &NdArray, w: &NdArray, groups: usize, g: &NdArray) -> (NdArray, NdArray) {
    let (s, b, ch) = (x.dim(0), x.dim(1), x.dim(2));
    let (c_out, c_in, k) = (w.dim(0), w.dim(1), w.dim(2));
    let per_group = c_out / groups;
    let mut dx = NdArray::zeros(x.shape());
    let mut dw = NdArray::zeros(w.shape());
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for t in 0..s {
        for bi in 0..b {
            for o in 0..c_out {
                let go = gd[(t * b + bi) * c_out + o];
                let grp = o / per_group;
                for j in (k - 1).saturating_sub(t)..k {
                    let src = t + j + 1 - k;
                    let base = (src * b + bi) * ch + grp * c_in;
                    for i in 0..c_in {
                        let widx = (o * c_in + i) * k + j;
                        dw.data_mut()[widx] += go * xd[base + i];
                        dx.data_mut()[base + i] += go * wd[widx];
                    }
                }
            }
        }
    }
    (dx, dw)
}

impl Backend for Tape {
    type Elem = f64;
    type T = Var;

    fn lift(&self, a: &NdArray) -> Var {
        self.constant(a.clone())
    }

    fn shape_of<'a>(&self, t: &'a Var) -> &'a [usize] {
        &t.shape
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let out = ops::matmul(&av, &bv)?;
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(move |g| {
                let da = ops::matmul_ex(g, false, &bv, true)?;
                let db = if bv.ndim() == 2 && av.ndim() > 2 {
                    let k = av.dim(-1);
                    let rows = av.len() / k.max(1);
                    let a2 = av.reshape(&[rows, k])?;
                    let g2 = g.reshape(&[rows, g.dim(-1)])?;
                    ops::matmul_ex(&a2, true, &g2, false)?
                } else {
                    ops::matmul_ex(&av, true, g, false)?
                };
                Ok(vec![da, db])
            })),
        ))
    }

    fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        let orig = a.shape.clone();
        Ok(self.push(out, vec![a.id], Some(Box::new(move |g| Ok(vec![g.reshape(&orig)?])))))
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(&self.val(a), &self.val(b))?;
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(|g| Ok(vec![g.clone(), g.clone()]))),
        ))
    }

    fn scale(&self, a: &Var, s: f64) -> Var {
        let out = ops::scale(&self.val(a), s);
        self.push(out, vec![a.id], Some(Box::new(move |g| Ok(vec![ops::scale(g, s)]))))
    }

    fn slice_last(&self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_last(&self.val(a), start, len)?;
        let full = *a.shape.last().unwrap();
        let orig = a.shape.clone();
        Ok(self.push(
            out,
            vec![a.id],
            Some(Box::new(move |g| {
                let mut dx = NdArray::zeros(&orig);
                for (dr, gr) in dx.data_mut().chunks_mut(full).zip(g.data().chunks(len.max(1))) {
                    dr[start..start + len].copy_from_slice(&gr[..len]);
                }
                Ok(vec![dx])
            })),
        ))
    }

    fn concat_last(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::concat_last(&self.val(a), &self.val(b))?;
        let (da, db) = (*a.shape.last().unwrap(), *b.shape.last().unwrap());
        Ok(self.push(
            out,
            vec![a.id, b.id],
            Some(Box::new(move |g| {
                Ok(vec![ops::slice_last(g, 0, da)?, ops::slice_last(g, da, db)?])
            })),
        ))
    }

    fn shift_seq(&self, a: &Var) -> Result<Var> {
        let out = ops::shift_seq(&self.val(a))?;
        Ok(self.push(
            out,
            vec![a.id],
            Some(Box::new(|g| {
                let s = g.dim(0);
                let row = g.len() / s.max(1);
                let mut dx = NdArray::zeros(g.shape());
                if s > 1 {
                    dx.data_mut()[..(s - 1) * row].copy_from_slice(&g.data()[row..]);
                }
                Ok(vec![dx])
            })),
        ))
    }

    fn repeat_heads(&self, a: &Var, n: usize) -> Result<Var> {
        let out = ops::repeat_heads(&self.val(a), n)?;
        Ok(self.push(
            out,
            vec![a.id],
            Some(Box::new(move |g| Ok(vec![ops::scale(&ops::group_mean(g, n)?, n as f64)]))),
        ))
    }

    fn group_mean(&self, a: &Var, n: usize) -> Result<Var> {
        let out = ops::group_mean(&self.val(a), n)?;
        Ok(self.push(
            out,
            vec![a.id],
            Some(Box::new(move |g| Ok(vec![ops::scale(&ops::repeat_heads(g, n)?, 1.0 / n as f64)]))),
        ))
    }

    fn causal_conv1d(&self, x: &Var, kernel: &Var, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(kernel));
        let out = ops::causal_conv1d(&xv, &wv, groups)?;
        Ok(self.push(
            out,
            vec![x.id, kernel.id],
            Some(Box::new(move |g| {
                let (dx, dw) = conv_backward(&xv, &wv, groups, g);
                Ok(vec![dx, dw])
            })),
        ))
    }

    fn l2_normalize(&self, x: &Var, eps: f64) -> Result<Var> {
        let xv = self.val(x);
        let out = ops::l2_normalize_heads(&xv, eps)?;
        let d = *x.shape.last().unwrap();
        Ok(self.push(
            out,
            vec![x.id],
            Some(Box::new(move |g| {
                let mut dx = NdArray::zeros(xv.shape());
                for ((dr, xr), gr) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(xv.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let n = xr.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if n > eps {
                        let yg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &xa), &ga) in dr.iter_mut().zip(xr).zip(gr) {
                            *o = (ga - xa / n * yg) / n;
                        }
                    } else {
                        for (o, &ga) in dr.iter_mut().zip(gr) {
                            *o = ga / eps;
                        }
                    }
                }
                Ok(vec![dx])
            })),
        ))
    }

    fn mul_head_exp(&self, x: &Var, beta: &Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(beta));
        let y = Rc::new(ops::mul_head_exp(&xv, &bv)?);
        let yc = Rc::clone(&y);
        let nd = x.shape.len();
        let (h, d) = (x.shape[nd - 2], x.shape[nd - 1]);
        Ok(self.push(
            (*y).clone(),
            vec![x.id, beta.id],
            Some(Box::new(move |g| {
                let dx = ops::mul_head_exp(g, &bv)?;
                let mut db = NdArray::zeros(bv.shape());
                for (i, (&gv, &yv)) in g.data().iter().zip(yc.data()).enumerate() {
                    db.data_mut()[(i / d) % h] += gv * yv;
                }
                Ok(vec![dx, db])
            })),
        ))
    }

    fn rope(&self, x: &Var, positions: &[usize], p: &RopeParams) -> Result<Var> {
        let out = rope_apply(&self.val(x), positions, p)?;
        let (pos, p) = (positions.to_vec(), *p);
        Ok(self.push(
            out,
            vec![x.id],
            Some(Box::new(move |g| Ok(vec![rope_apply_inverse(g, &pos, &p)?]))),
        ))
    }

    fn attend(&self, q: &Var, k: &Var, v: &Var, scale: f64, causal: bool) -> Result<Var> {
        let (qs, ks, vs) = (&q.shape, &k.shape, &v.shape);
        if qs.len() != 4 || ks.len() != 4 || vs.len() != 4 || ks[2] == 0 || qs[2] % ks[2] != 0 {
            return shape_err("attention", qs, ks);
        }
        let group = qs[2] / ks[2];
        flops::with_category(Category::Attention, || {
            let qp = self.permute(q, &[1, 2, 0, 3])?;
            let kp = self.permute(&self.repeat_heads(k, group)?, &[1, 2, 3, 0])?;
            let vp = self.permute(&self.repeat_heads(v, group)?, &[1, 2, 0, 3])?;
            let scores = self.matmul(&qp, &kp)?;
            let probs = self.softmax_rows(&scores, scale, causal)?;
            let o = self.matmul(&probs, &vp)?;
            self.permute(&o, &[2, 0, 1, 3])
        })
    }
}

/// Central differences of a scalar function with respect to every entry of
/// `param`.
pub fn finite_diff(mut loss: impl FnMut(&NdArray) -> f64, param: &NdArray, step: f64) -> NdArray {
    assert!(step > 0.0, "finite_diff step must be positive");
    let mut probe = param.clone();
    let mut out = NdArray::zeros(param.shape());
    for i in 0..param.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = loss(&probe);
        probe.data_mut()[i] = x0 - step;
        let down = loss(&probe);
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}
