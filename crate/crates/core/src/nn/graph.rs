//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] borrows a [`ParamStore`]; parameter nodes read the stored
//! tensors directly and [`Graph::backward`] returns gradients indexed by
//! [`ParamId`].

use super::kernels::{self, ConvGeometry, GroupNormCache};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache<E>,
    },
    Silu(Var),
    Add(Var, Var),
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor<E>,
    },
    Mse {
        pred: Var,
        target: Tensor<E>,
    },
}

pub struct Graph<'p, E: Element> {
    params: &'p ParamStore<E>,
    values: Vec<Option<Tensor<E>>>,
    ops: Vec<Op<E>>,
    needs_grad: Vec<bool>,
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradients indexed by parameter position in the store; `None` for
    /// parameters that receive no update.
    pub fn from_parts(grads: Vec<Option<Tensor<E>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

impl<'p, E: Element> Graph<'p, E> {
    pub fn new(params: &'p ParamStore<E>) -> Self {
        Self {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, value: Option<Tensor<E>>, op: Op<E>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.ops.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        match &self.ops[v.0] {
            Op::Param(id) => self.params.get(*id),
            _ => self.values[v.0].as_ref().expect("non-parameter node holds a value"),
        }
    }

    pub fn input(&mut self, t: Tensor<E>) -> Var {
        self.push(Some(t), Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.is_trainable(id);
        self.push(None, Op::Param(id), trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Some(out), Op::Conv2d { x, w, b, geo }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (out, cache) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups, 1e-5)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Some(out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            ng,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        let ng = self.ng(&[x]);
        self.push(Some(out), Op::Silu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Some(out), Op::Add(a, b), ng))
    }

    /// Adds a per-sample channel vector `[B, C]` to every pixel of `x: [B, C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (b, c) = (xv.dim(0), xv.dim(1));
        bv.ensure_shape(&[b, c])?;
        let hw = xv.numel() / (b * c);
        let mut out = xv.clone();
        for (plane, &add) in out.data_mut().chunks_mut(hw).zip(bv.data()) {
            for v in plane {
                *v += add;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Some(out), Op::AddChannelBias { x, bias }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Some(out), Op::Linear { x, w, b }, ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2x(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(Some(out), Op::Upsample2x(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
        if av.shape()[2..] != bv.shape()[2..] || bv.dim(0) != n {
            return Err(Error::ShapeMismatch {
                expected: av.shape().to_vec(),
                actual: bv.shape().to_vec(),
            });
        }
        let hw = av.numel() / (n * ca);
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] = ca + cb;
        let out = Tensor::from_vec(shape, data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Some(out), Op::ConcatChannels(a, b), ng))
    }

    /// Spatial self-attention; `q`, `k`, `v` are `[B, C, H, W]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        let flat = |t: &Tensor<E>| -> Result<Tensor<E>> {
            let (b, c) = (t.dim(0), t.dim(1));
            t.clone().reshape(vec![b, c, t.numel() / (b * c)])
        };
        let (out, probs) = kernels::attention(
            &flat(self.value(q))?,
            &flat(self.value(k))?,
            &flat(self.value(v))?,
        )?;
        let out = out.reshape(shape)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(Some(out), Op::Attention { q, k, v, probs }, ng))
    }

    /// Mean squared error against a constant target; yields a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Tensor<E>) -> Result<Var> {
        let p = self.value(pred);
        p.ensure_same_shape(&target)?;
        let n = E::of(p.numel() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<E>()
            / n;
        let ng = self.ng(&[pred]);
        Ok(self.push(Some(Tensor::scalar(loss)), Op::Mse { pred, target }, ng))
    }

    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        let n = self.ops.len();
        let mut grads: Vec<Option<Tensor<E>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), E::one()));
        let mut out = Gradients {
            grads: (0..self.params.len()).map(|_| None).collect(),
        };
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut out.grads[id.0], g),
                Op::Conv2d { x, w, b, geo } => {
                    let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *geo, self.needs_grad[x.0])?;
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    accumulate(&mut grads[w.0], cg.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], cg.db);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dg, db) = kernels::group_norm_backward(self.value(*x), self.value(*gamma), *groups, cache, &g)?;
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gamma.0], dg);
                    accumulate(&mut grads[beta.0], db);
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&g, |v, d| d * kernels::silu_grad(v))?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddChannelBias { x, bias } => {
                    let bv = self.value(*bias);
                    let hw = g.numel() / bv.numel();
                    let db = Tensor::from_vec(
                        bv.shape().to_vec(),
                        g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect(),
                    )?;
                    accumulate(&mut grads[bias.0], db);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Upsample2x(x) => accumulate(&mut grads[x.0], kernels::upsample_nearest2x_backward(&g)),
                Op::ConcatChannels(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (nb, ca, cb) = (av.dim(0), av.dim(1), bv.dim(1));
                    let hw = av.numel() / (nb * ca);
                    let mut da = Vec::with_capacity(av.numel());
                    let mut db = Vec::with_capacity(bv.numel());
                    for chunk in g.data().chunks((ca + cb) * hw) {
                        da.extend_from_slice(&chunk[..ca * hw]);
                        db.extend_from_slice(&chunk[ca * hw..]);
                    }
                    accumulate(&mut grads[a.0], Tensor::from_vec(av.shape().to_vec(), da)?);
                    accumulate(&mut grads[b.0], Tensor::from_vec(bv.shape().to_vec(), db)?);
                }
                Op::Attention { q, k, v, probs } => {
                    let shape = self.value(*q).shape().to_vec();
                    let (b, c) = (shape[0], shape[1]);
                    let flat = vec![b, c, g.numel() / (b * c)];
                    let (dq, dk, dv) = kernels::attention_backward(
                        &self.value(*q).clone().reshape(flat.clone())?,
                        &self.value(*k).clone().reshape(flat.clone())?,
                        &self.value(*v).clone().reshape(flat.clone())?,
                        probs,
                        &g.reshape(flat)?,
                    );
                    accumulate(&mut grads[q.0], dq.reshape(shape.clone())?);
                    accumulate(&mut grads[k.0], dk.reshape(shape.clone())?);
                    accumulate(&mut grads[v.0], dv.reshape(shape)?);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let scale = E::of(2.0) * g.data()[0] / E::of(p.numel() as f64);
                    let dp = p.zip_map(target, |a, b| (a - b) * scale)?;
                    accumulate(&mut grads[pred.0], dp);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(
        store: &mut ParamStore<f64>,
        id: ParamId,
        idx: usize,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> f64 {
        let h = 1e-6;
        let orig = store.get(id).data()[idx];
        store.get_mut(id).data_mut()[idx] = orig + h;
        let up = f(store);
        store.get_mut(id).data_mut()[idx] = orig - h;
        let down = f(store);
        store.get_mut(id).data_mut()[idx] = orig;
        (up - down) / (2.0 * h)
    }

    fn pseudo(shape: Vec<usize>, seed: usize) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| (((i + seed) * 7919 % 1009) as f64 / 1009.0 - 0.5) * 0.8).collect(),
        )
        .unwrap()
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let w1 = store.insert("w1", pseudo(vec![4, 2, 3, 3], 1), true);
        let b1 = store.insert("b1", pseudo(vec![4], 2), true);
        let gam = store.insert("gamma", pseudo(vec![4], 3).map(|v| v + 1.0), true);
        let bet = store.insert("beta", pseudo(vec![4], 4), true);
        let lw = store.insert("lw", pseudo(vec![4, 3], 5), true);
        let lb = store.insert("lb", pseudo(vec![4], 6), true);
        let wq = store.insert("wq", pseudo(vec![4, 4, 1, 1], 7), true);
        let wk = store.insert("wk", pseudo(vec![4, 4, 1, 1], 8), true);
        let wv = store.insert("wv", pseudo(vec![4, 8, 1, 1], 9), true);
        let wd = store.insert("wd", pseudo(vec![4, 4, 3, 3], 10), true);
        let x = pseudo(vec![2, 2, 4, 4], 11);
        let emb = pseudo(vec![2, 3], 12);
        let target = pseudo(vec![2, 4, 4, 4], 13);

        let run = |s: &ParamStore<f64>| -> (f64, Option<Gradients<f64>>) {
            let mut g = Graph::new(s);
            let xi = g.input(x.clone());
            let (w1v, b1v) = (g.param(w1), g.param(b1));
            let h = g.conv2d(xi, w1v, Some(b1v), ConvGeometry::same(1, 3)).unwrap();
            let (gv, bv) = (g.param(gam), g.param(bet));
            let h = g.group_norm(h, gv, bv, 2).unwrap();
            let h = g.silu(h);
            let e = g.input(emb.clone());
            let (lwv, lbv) = (g.param(lw), g.param(lb));
            let e = g.linear(e, lwv, Some(lbv)).unwrap();
            let h = g.add_channel_bias(h, e).unwrap();
            let (q, k) = (g.param(wq), g.param(wk));
            let qv = g.conv2d(h, q, None, ConvGeometry { stride: 1, pad: 0, groups: 1 }).unwrap();
            let kv = g.conv2d(h, k, None, ConvGeometry { stride: 1, pad: 0, groups: 1 }).unwrap();
            let hh = g.concat_channels(h, h).unwrap();
            let v = g.param(wv);
            let vv = g.conv2d(hh, v, None, ConvGeometry { stride: 1, pad: 0, groups: 1 }).unwrap();
            let a = g.attention(qv, kv, vv).unwrap();
            let h = g.add(h, a).unwrap();
            let d = g.param(wd);
            let down = g.conv2d(h, d, None, ConvGeometry::same(2, 3)).unwrap();
            let up = g.upsample2x(down).unwrap();
            let loss = g.mse(up, target.clone()).unwrap();
            let lv = g.value(loss).data()[0];
            (lv, Some(g.backward(loss).unwrap()))
        };
        let (_, grads) = run(&store);
        let grads = grads.unwrap();
        let f = |s: &ParamStore<f64>| run(s).0;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let n = store.get(id).numel();
            for idx in 0..n {
                let fd = central_difference(&mut store, id, idx, &f);
                let ad = grads.get(id).unwrap().data()[idx];
                let denom = ad.abs().max(fd.abs()).max(1e-7);
                assert!(
                    (ad - fd).abs() / denom < 1e-5,
                    "{}[{idx}]: autograd {ad} vs fd {fd}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", pseudo(vec![3, 2], 1), false);
        let mut g = Graph::new(&store);
        let x = g.input(pseudo(vec![2, 2], 2));
        let wv = g.param(w);
        let y = g.linear(x, wv, None).unwrap();
        let loss = g.mse(y, Tensor::zeros(vec![2, 3])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
    }
}
