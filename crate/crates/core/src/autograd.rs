//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] walks the tape in reverse and returns [`Gradients`]
//! for every node that requires them. Inference uses a tape built with
//! [`Tape::inference`], which stores values only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), self.grad_enabled, Vec::new(), None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), false, Vec::new(), None)
    }

    fn insert(
        &self,
        value: Rc<Tensor>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        if requires {
            self.insert(
                Rc::new(value),
                true,
                parents.iter().map(|p| p.id).collect(),
                Some(Box::new(backward)),
            )
        } else {
            self.insert(Rc::new(value), false, Vec::new(), None)
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.numel(),
            1,
            "backward() needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut seed = (*nodes[loss.id].value).clone();
        seed.data_mut()[0] = 1.0;
        grads[loss.id] = Some(seed);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn unary_grad(needs: &[bool], f: impl FnOnce() -> Tensor) -> Vec<Option<Tensor>> {
    vec![needs[0].then(f)]
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.push(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.push(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-1.0))]
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        self.tape
            .push(out, &[self], move |g, needs| unary_grad(needs, || g.scale(c)))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push(out, &[self], |g, needs| unary_grad(needs, || g.clone()))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || {
                g.zip_map(&x, |g, v| if v > 0.0 { g } else { slope * g })
            })
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.clamp(lo, hi));
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || {
                g.zip_map(&x, |g, v| if v > lo && v < hi { g } else { 0.0 })
            })
        })
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::abs);
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || g.zip_map(&x, |g, v| g * v.signum() * f64::from(v != 0.0)))
        })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || Tensor::full(&shape, g.item()))
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Element-wise select: `self` where `mask == 1`, `other` where `mask == 0`.
    pub fn select(self, mask: &Tensor, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "select: operand shape mismatch");
        assert_eq!(a.shape(), mask.shape(), "select: mask shape mismatch");
        let out = Tensor::from_vec(
            a.shape(),
            a.data()
                .iter()
                .zip(b.data())
                .zip(mask.data())
                .map(|((&x, &y), &m)| if m == 1.0 { x } else { y })
                .collect(),
        );
        let mask = mask.clone();
        self.tape.push(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&mask, |g, m| if m == 1.0 { g } else { 0.0 })),
                needs[1].then(|| g.zip_map(&mask, |g, m| if m == 1.0 { 0.0 } else { g })),
            ]
        })
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("channel concat of nothing"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_channels(&refs)?;
        let widths: Vec<usize> = values.iter().map(|v| v.dims4().1).collect();
        Ok(first.tape.push(out, parts, move |g, needs| {
            g.split_channels(&widths)
                .into_iter()
                .zip(needs)
                .map(|(piece, &n)| n.then_some(piece))
                .collect()
        }))
    }

    pub fn batch_item(self, i: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let out = x.batch_item(i);
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || {
                let mut full = Tensor::zeros(&[n, c, h, w]);
                let len = c * h * w;
                full.data_mut()[i * len..(i + 1) * len].copy_from_slice(g.data());
                full
            })
        })
    }

    pub fn stack_batch(items: &[Var<'t>]) -> Result<Var<'t>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
        let values: Vec<Tensor> = items.iter().map(|v| (*v.value()).clone()).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let out = Tensor::stack_batch(&values)?;
        Ok(first.tape.push(out, items, move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(&shapes)
                .zip(needs)
                .map(|((&len, shape), &need)| {
                    let piece = need.then(|| {
                        Tensor::from_vec(shape, g.data()[offset..offset + len].to_vec())
                    });
                    offset += len;
                    piece
                })
                .collect()
        }))
    }

    /// Matrix product of rank-2 values; `trans_b` multiplies by `other`ᵀ.
    pub fn matmul(self, other: Var<'t>, trans_b: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (br, bc) = b.dims2();
        let n = if trans_b {
            assert_eq!(bc, k, "matmul: inner dimensions differ");
            br
        } else {
            assert_eq!(br, k, "matmul: inner dimensions differ");
            bc
        };
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, 1.0, a.data(), false, b.data(), trans_b, 0.0, out.data_mut());
        self.tape.push(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                // dA = G · op(B)ᵀ
                let mut da = Tensor::zeros(&[m, k]);
                gemm(m, n, k, 1.0, g.data(), false, b.data(), !trans_b, 0.0, da.data_mut());
                da
            });
            let gb = needs[1].then(|| {
                if trans_b {
                    // B is n×k: dB = Gᵀ · A
                    let mut db = Tensor::zeros(&[n, k]);
                    gemm(n, m, k, 1.0, g.data(), true, a.data(), false, 0.0, db.data_mut());
                    db
                } else {
                    // B is k×n: dB = Aᵀ · G
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm(k, m, n, 1.0, a.data(), true, g.data(), false, 0.0, db.data_mut());
                    db
                }
            });
            vec![ga, gb]
        })
    }

    /// Row-wise softmax of a rank-2 value.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let src = &x.data()[r * cols..(r + 1) * cols];
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let y = out.clone();
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || {
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.data_mut()[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                dx
            })
        })
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        let norms: Vec<f64> = (0..rows)
            .map(|r| {
                x.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let d = norms[r].max(eps);
            for c in 0..cols {
                out.data_mut()[r * cols + c] = x.data()[r * cols + c] / d;
            }
        }
        let y = out.clone();
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || {
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let gr = &g.data()[range.clone()];
                    if norms[r] > eps {
                        let yr = &y.data()[range.clone()];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dx.data_mut()[range].iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * dot) / norms[r];
                        }
                    } else {
                        for (d, &gv) in dx.data_mut()[range].iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                    }
                }
                dx
            })
        })
    }

    /// Picks rows of a rank-2 value by index.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.dims2();
        let mut out = Tensor::zeros(&[indices.len(), cols]);
        for (i, &r) in indices.iter().enumerate() {
            assert!(r < rows, "gather_rows: index {r} out of range {rows}");
            out.data_mut()[i * cols..(i + 1) * cols]
                .copy_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let indices = indices.to_vec();
        self.tape.push(out, &[self], move |g, needs| {
            unary_grad(needs, || {
                let mut dx = Tensor::zeros(&[rows, cols]);
                for (i, &r) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] += g.data()[i * cols + c];
                    }
                }
                dx
            })
        })
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central finite-difference check of `f` (which builds a scalar on a
    /// fresh tape from the given leaves) at every coordinate of every input.
    pub fn check<F>(inputs: &[Tensor], f: F, h: f64, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &leaves);
        let grads = tape.backward(loss);
        let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.get_or_zeros(l)).collect();

        let eval = |ins: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let leaves: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
            f(&tape, &leaves).value().item()
        };
        for (which, input) in inputs.iter().enumerate() {
            for i in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[which].data()[i];
                // Absolute floor covers round-off in the difference quotient.
                let err = (a - numeric).abs();
                assert!(
                    err <= 1e-8 || err / a.abs().max(numeric.abs()) <= tol,
                    "input {which} coord {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
