//! A per-forward-pass tape of backward closures.
//!
//! Every op pushes a node holding its output value, the ids of its inputs and
//! (when recording) a closure mapping the output gradient to input gradients.
//! The tape is consumed by one backward sweep and then dropped.

use std::sync::Arc;

use super::kernels::{
    conv_backward, conv_forward, conv_geom, upsample_backward, upsample_nearest,
    weighted_ce_backward, weighted_ce_forward, TargetMap,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BackwardCtx<'a, T> {
    grad: &'a [T],
    inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates ops without recording backward closures.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: requires_grad && self.record,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient (inputs, constants).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = self.record && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize, stride: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let g = conv_geom(x, w, b, pad, stride)?;
        let out = Tensor::new(vec![g.c_out, g.oh, g.ow], conv_forward(&g, x.data(), w.data(), b.data()))?;
        self.push("conv2d", out, vec![input.0, weight.0, bias.0], move |ctx| {
            let (gx, gw, gb) = conv_backward(&g, ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad, ctx.needs[0]);
            vec![gx, Some(gw), Some(gb)]
        })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("relu", out, vec![input.0], |ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, vec![a.0, b.0], |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * factor).collect())?;
        self.push("scale", out, vec![a.0], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * factor).collect())]
        })
    }

    /// Sum of any number of scalar (one-element) nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::dim(format!("sum_scalars: non-scalar {:?}", v.shape())));
            }
            total = total + v.item();
        }
        let n = terms.len();
        self.push(
            "sum_scalars",
            Tensor::scalar(total),
            terms.iter().map(|t| t.0).collect(),
            move |ctx| (0..n).map(|_| Some(vec![ctx.grad[0]])).collect(),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.len();
        let inv = T::one() / T::from_usize(n).unwrap();
        let m = x.data().iter().copied().sum::<T>() * inv;
        self.push("mean", Tensor::scalar(m), vec![a.0], move |ctx| {
            vec![Some(vec![ctx.grad[0] * inv; n])]
        })
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        let out = upsample_nearest(x, factor)?;
        self.push("upsample_nearest", out, vec![input.0], move |ctx| {
            vec![Some(upsample_backward(ctx.grad, c, h, w, factor))]
        })
    }

    /// `Σ_j w_j · CE(softmax(logits)(j), t_j)` as a scalar node. Pixels with
    /// zero weight contribute neither value nor gradient.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: Arc<TargetMap>, weights: Arc<[f64]>) -> Result<Var> {
        let z = self.value(logits);
        let (k, h, w) = z.chw()?;
        let (loss, probs) = weighted_ce_forward(z, &targets, &weights)?;
        self.push(
            "weighted_cross_entropy",
            Tensor::scalar(T::from_f64_lossy(loss)),
            vec![logits.0],
            move |ctx| {
                vec![Some(weighted_ce_backward(ctx.grad[0], &probs, k, h * w, &targets, &weights))]
            },
        )
    }

    /// Reverse sweep from a scalar node; returns gradients for every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::dim(format!("backward from non-scalar {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = node.backward.as_ref() {
                let ctx = BackwardCtx {
                    grad: &g,
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
                };
                for (&p, pg) in node.parents.iter().zip(bw(&ctx)) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match grads[p].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                        None => grads[p] = Some(pg),
                    }
                }
            }
            // only leaves keep their gradient
            if node.parents.is_empty() {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves reached by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of the given length when no path reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` with respect to every coordinate of `x0`.
    fn check_grad(x0: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = f(&mut tape, x);
        let g = tape.backward(y).unwrap().get_or_zeros(x, x0.len());
        let h = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xt = x0.clone();
                xt.data_mut()[i] += delta;
                let mut t = Tape::no_grad();
                let xv = t.leaf(xt, false);
                let out = f(&mut t, xv);
                t.value(out).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / denom < 1e-6 || (fd - g[i]).abs() < 1e-9, "coord {i}: fd {fd} vs ad {}", g[i]);
        }
    }

    #[test]
    fn upsample_mean_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let u = tape.upsample_nearest(x, 2).unwrap();
        let m = tape.mean(u).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25; 4]);
        check_grad(&Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), |t, x| {
            let u = t.upsample_nearest(x, 2).unwrap();
            t.mean(u).unwrap()
        });
    }

    #[test]
    fn conv_input_weight_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, vec![2, 5, 6]);
        let w0 = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b0 = rand_tensor(&mut rng, vec![3]);
        for stride in [1, 2] {
            let oh = (5 + 2 - 3) / stride + 1;
            let ow = (6 + 2 - 3) / stride + 1;
            // a fixed random probe makes every output coordinate matter
            let probe = rand_tensor(&mut rng, vec![3, oh, ow]);
            for which in 0..3 {
                let (x, w, b, p) = (x0.clone(), w0.clone(), b0.clone(), probe.clone());
                let start = [&x0, &w0, &b0][which].clone();
                check_grad(&start, move |t, v| {
                    let mut args = [x.clone(), w.clone(), b.clone()].map(|a| Some(a));
                    args[which] = None;
                    let vars: Vec<Var> = args
                        .into_iter()
                        .map(|a| a.map_or(v, |a| t.constant(a)))
                        .collect();
                    let y = t.conv2d(vars[0], vars[1], vars[2], 1, stride).unwrap();
                    let pv = t.constant(p.clone());
                    let prod = mul_for_test(t, y, pv);
                    t.mean(prod).unwrap()
                });
            }
        }
    }

    // elementwise product with a constant
    fn mul_for_test(t: &mut Tape<f64>, a: Var, c: Var) -> Var {
        let x = t.value(a).clone();
        let cv = t.value(c).clone();
        let data = x.data().iter().zip(cv.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).unwrap();
        t.push("mul", out, vec![a.0], move |ctx| {
            vec![Some(ctx.grad.iter().zip(cv.data()).map(|(g, q)| g * q).collect())]
        })
        .unwrap()
    }

    #[test]
    fn relu_add_scale_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_tensor(&mut rng, vec![1, 3, 4]);
        let other = rand_tensor(&mut rng, vec![1, 3, 4]);
        check_grad(&x0, move |t, x| {
            let o = t.constant(other.clone());
            let s = t.add(x, o).unwrap();
            let r = t.relu(s).unwrap();
            let sc = t.scale(r, 3.0).unwrap();
            let r2 = t.add(sc, x).unwrap();
            t.mean(r2).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradients_hard_and_soft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = rand_tensor(&mut rng, vec![3, 2, 2]);
        let hard = Arc::new(TargetMap::Hard((0..4).map(|_| rng.random_range(0..3)).collect()));
        let weights: Arc<[f64]> = (0..4).map(|j| if j == 1 { 0.0 } else { rng.random() }).collect();
        let (ht, hw) = (hard.clone(), weights.clone());
        check_grad(&z0, move |t, z| t.weighted_cross_entropy(z, ht.clone(), hw.clone()).unwrap());

        let mut probs = Vec::new();
        for _ in 0..4 {
            let raw: Vec<f32> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f32 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
        }
        let soft = Arc::new(TargetMap::Soft { classes: 3, probs });
        check_grad(&z0, move |t, z| t.weighted_cross_entropy(z, soft.clone(), weights.clone()).unwrap());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::full(vec![1, 2, 2], 1.0), true);
        let y = tape.relu(x).unwrap();
        let m = tape.mean(y).unwrap();
        assert!(!tape.nodes[m.0].requires_grad);
        assert!(tape.nodes.iter().all(|n| n.backward.is_none()));
        assert!(tape.backward(m).unwrap().get(x).is_none());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 1], f32::MAX), true);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }
}
