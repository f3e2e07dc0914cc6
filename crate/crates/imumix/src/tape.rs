//! Reverse-mode differentiation over a linear operation tape.
//!
//! A forward pass pushes one node per primitive; `backward` replays the nodes
//! in reverse, accumulating gradients into per-node slots. Gradient slots
//! start at zero for every backward pass, and a tape that has run backward
//! refuses further use until a fresh forward pass builds a new tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op<F: Scalar> {
    Leaf,
    Matmul {
        a: VarId,
        b: VarId,
    },
    Transpose {
        x: VarId,
    },
    Reshape {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    AddBroadcast {
        a: VarId,
        bias: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        factor: F,
    },
    MeanAxis {
        x: VarId,
        axis: usize,
    },
    Sum {
        x: VarId,
    },
    Gelu {
        x: VarId,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        shift: VarId,
        // saved forward intermediates for the backward rule
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    SoftmaxXent {
        logits: VarId,
        labels: Vec<usize>,
        probs: Tensor<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    spent: bool,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<F>> {
        self.grads[id.0].take()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn check_live(&self) -> Result<()> {
        if self.spent {
            Err(Error::TapeSpent)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<VarId> {
        self.check_live()?;
        Ok(self.push(value, Op::Leaf))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::transpose(self.value(x))?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        self.check_live()?;
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn add_broadcast(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::add_broadcast(self.value(a), self.value(bias))?;
        Ok(self.push(value, Op::AddBroadcast { a, bias }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, factor: F) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::scale(self.value(x), factor);
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        self.check_live()?;
        let value = tensor::mean_axis(self.value(x), axis)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = Tensor::scalar(tensor::sum_all(self.value(x)));
        Ok(self.push(value, Op::Sum { x }))
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        self.check_live()?;
        let value = self.value(x).map(gelu_scalar);
        Ok(self.push(value, Op::Gelu { x }))
    }

    /// Layer normalization over the last axis with learnable gain/shift.
    ///
    /// Rows are normalized to zero mean and unit population variance with
    /// `eps` inside the square root, then scaled and shifted.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, shift: VarId, eps: F) -> Result<VarId> {
        self.check_live()?;
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or(Error::Shape {
            op: "layer_norm",
            detail: "input must have rank >= 1".into(),
        })?;
        if d < 2 {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!("normalized axis must have extent >= 2, got {d}"),
            });
        }
        for (name, id) in [("gain", gain), ("shift", shift)] {
            let s = self.value(id).shape();
            if s != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!("{name} must have shape [{d}], got {s:?}"),
                });
            }
        }
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); rows];
        let inv_d = F::one() / F::from_f64(d as f64);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (j, &v) in row.iter().enumerate() {
                xhat[r * d + j] = (v - mean) * inv;
            }
        }
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            for j in 0..d {
                out[r * d + j] = gv[j] * xhat[r * d + j] + sv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat).expect("xhat shape");
        let value = Tensor::new(shape, out).expect("layer_norm shape");
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean softmax cross-entropy over a `[B x K]` logit batch, stabilized by
    /// per-row max subtraction. Returns a scalar loss node.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        self.check_live()?;
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("expected [BxK] logits, got {:?}", lv.shape()),
            });
        }
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for batch of {b}", labels.len()),
            });
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Label {
                    index: i,
                    label,
                    num_classes: k,
                });
            }
        }
        let mut probs = vec![F::zero(); b * k];
        let mut loss = F::zero();
        for i in 0..b {
            let row = &lv.data()[i * k..(i + 1) * k];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut denom = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            let inv = F::one() / denom;
            for j in 0..k {
                probs[i * k + j] *= inv;
            }
            // -log p[label] in the stabilized form
            loss += denom.ln() - (row[labels[i]] - max);
        }
        loss /= F::from_f64(b as f64);
        let probs = Tensor::new(vec![b, k], probs).expect("probs shape");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Runs the backward rules in reverse order, seeding the scalar `loss`
    /// node with gradient one. Consumes the tape's ability to record or
    /// replay again.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients<F>> {
        self.check_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            // leaf gradients stay in their slots for the caller to harvest
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::Matmul { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = tensor::matmul(&g, &tensor::transpose(bv)?)?;
                    let db = tensor::matmul(&tensor::transpose(av)?, &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose { x } => {
                    accumulate(&mut grads, *x, tensor::transpose(&g)?);
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(shape)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBroadcast { a, bias } => {
                    let span = self.nodes[bias.0].value.len();
                    let mut db = Tensor::zeros(self.nodes[bias.0].value.shape().to_vec());
                    for chunk in g.data().chunks(span) {
                        for (acc, &v) in db.data_mut().iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Mul { a, b } => {
                    let da = tensor::mul(&g, &self.nodes[b.0].value)?;
                    let db = tensor::mul(&g, &self.nodes[a.0].value)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, tensor::scale(&g, *factor));
                }
                Op::MeanAxis { x, axis } => {
                    let xshape = self.nodes[x.0].value.shape();
                    let extent = xshape[*axis];
                    let outer: usize = xshape[..*axis].iter().product();
                    let inner: usize = xshape[*axis + 1..].iter().product();
                    let inv = F::one() / F::from_f64(extent as f64);
                    let mut dx = vec![F::zero(); self.nodes[x.0].value.len()];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for l in 0..extent {
                            let dst = &mut dx[(o * extent + l) * inner..(o * extent + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = s * inv;
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(xshape.to_vec(), dx).expect("mean_axis grad shape"),
                    );
                }
                Op::Sum { x } => {
                    let seed = g.item();
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let len = self.nodes[x.0].value.len();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(shape, vec![seed; len]).expect("sum grad shape"),
                    );
                }
                Op::Gelu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = vec![F::zero(); xv.len()];
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv.data()).zip(g.data()) {
                        *d = gi * gelu_derivative(xi);
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), dx).expect("gelu grad shape"),
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let d = *xhat.shape().last().expect("layer_norm rank");
                    let rows = xhat.len() / d;
                    let gv = self.nodes[gain.0].value.data();
                    let inv_d = F::one() / F::from_f64(d as f64);
                    let mut dx = vec![F::zero(); xhat.len()];
                    let mut dgain = vec![F::zero(); d];
                    let mut dshift = vec![F::zero(); d];
                    for r in 0..rows {
                        let gy = &g.data()[r * d..(r + 1) * d];
                        let xh = &xhat.data()[r * d..(r + 1) * d];
                        let mut mean_t = F::zero();
                        let mut mean_tx = F::zero();
                        for j in 0..d {
                            let t = gy[j] * gv[j];
                            mean_t += t;
                            mean_tx += t * xh[j];
                            dgain[j] += gy[j] * xh[j];
                            dshift[j] += gy[j];
                        }
                        mean_t *= inv_d;
                        mean_tx *= inv_d;
                        let inv = inv_std[r];
                        for j in 0..d {
                            let t = gy[j] * gv[j];
                            dx[r * d + j] = inv * (t - mean_t - xh[j] * mean_tx);
                        }
                    }
                    let xshape = self.nodes[x.0].value.shape().to_vec();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(xshape, dx).expect("layer_norm grad shape"),
                    );
                    accumulate(
                        &mut grads,
                        *gain,
                        Tensor::new(vec![d], dgain).expect("gain grad shape"),
                    );
                    accumulate(
                        &mut grads,
                        *shift,
                        Tensor::new(vec![d], dshift).expect("shift grad shape"),
                    );
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let (b, k) = (probs.shape()[0], probs.shape()[1]);
                    let seed = g.item() / F::from_f64(b as f64);
                    let mut dl = probs.data().to_vec();
                    for (i, &label) in labels.iter().enumerate() {
                        dl[i * k + label] -= F::one();
                    }
                    for v in &mut dl {
                        *v *= seed;
                    }
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::new(vec![b, k], dl).expect("xent grad shape"),
                    );
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: VarId, contribution: Tensor<F>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, &c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (F::one() + (x * inv_sqrt2).erf())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let phi_cdf = half * (F::one() + (x * inv_sqrt2).erf());
    let phi_pdf = inv_sqrt_2pi * (-half * x * x).exp();
    phi_cdf + x * phi_pdf
}
