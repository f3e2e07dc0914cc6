//! Neural building blocks: linear layer, layer normalization, global average
//! pooling. GELU and softmax cross-entropy are tape primitives (see
//! [`crate::tape::Tape`]); this module holds the parameterized layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, VarId};
use crate::tensor::Tensor;

/// Layer-norm epsilon, inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A trainable tensor paired with the gradient from the latest backward pass.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = F::zero();
        }
    }
}

/// Fully connected layer `y = x W (+ b)` with `W: [in x out]`.
///
/// Weights initialize uniformly in `±1/sqrt(in)`, biases at zero.
#[derive(Clone, Debug)]
pub struct Linear<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_dim: usize,
    out_dim: usize,
}

/// Tape handles for one staged [`Linear`].
pub struct LinearVars {
    pub weight: VarId,
    pub bias: Option<VarId>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let weight = Param::new(Tensor::new(vec![in_dim, out_dim], data).expect("weight shape"));
        let bias = with_bias.then(|| Param::new(Tensor::zeros(vec![out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> Result<LinearVars> {
        let weight = tape.leaf(self.weight.value.clone())?;
        let bias = match &self.bias {
            Some(b) => Some(tape.leaf(b.value.clone())?),
            None => None,
        };
        Ok(LinearVars { weight, bias })
    }

    /// Applies the layer over the last axis of `x` (`[... x in] -> [... x out]`).
    pub fn forward(&self, tape: &mut Tape<F>, vars: &LinearVars, x: VarId) -> Result<VarId> {
        let shape = tape.value(x).shape().to_vec();
        let last = *shape.last().ok_or(Error::Shape {
            op: "linear",
            detail: "input must have rank >= 1".into(),
        })?;
        if last != self.in_dim {
            return Err(Error::Shape {
                op: "linear",
                detail: format!(
                    "input last extent {last} does not match weight [{}x{}]",
                    self.in_dim, self.out_dim
                ),
            });
        }
        let rows = tape.value(x).len() / last;
        let flat = tape.reshape(x, vec![rows, last])?;
        let mut y = tape.matmul(flat, vars.weight)?;
        if let Some(bias) = vars.bias {
            y = tape.add_broadcast(y, bias)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        tape.reshape(y, out_shape)
    }

    pub fn harvest(&mut self, vars: &LinearVars, grads: &mut Gradients<F>) -> Result<()> {
        self.weight.grad = take_grad(grads, vars.weight, "linear weight")?;
        if let (Some(b), Some(id)) = (&mut self.bias, vars.bias) {
            b.grad = take_grad(grads, id, "linear bias")?;
        }
        Ok(())
    }
}

/// Layer normalization over the last axis with learnable gain and shift
/// (gain starts at one, shift at zero).
#[derive(Clone, Debug)]
pub struct LayerNorm<F: Scalar> {
    pub gain: Param<F>,
    pub shift: Param<F>,
    pub eps: F,
    dim: usize,
}

pub struct LayerNormVars {
    pub gain: VarId,
    pub shift: VarId,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Param::new(Tensor::ones(vec![dim])),
            shift: Param::new(Tensor::zeros(vec![dim])),
            eps: F::from_f64(LAYER_NORM_EPS),
            dim,
        }
    }

    pub fn with_eps(mut self, eps: F) -> Self {
        self.eps = eps;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> Result<LayerNormVars> {
        Ok(LayerNormVars {
            gain: tape.leaf(self.gain.value.clone())?,
            shift: tape.leaf(self.shift.value.clone())?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: &LayerNormVars, x: VarId) -> Result<VarId> {
        tape.layer_norm(x, vars.gain, vars.shift, self.eps)
    }

    pub fn harvest(&mut self, vars: &LayerNormVars, grads: &mut Gradients<F>) -> Result<()> {
        self.gain.grad = take_grad(grads, vars.gain, "layer_norm gain")?;
        self.shift.grad = take_grad(grads, vars.shift, "layer_norm shift")?;
        Ok(())
    }
}

fn take_grad<F: Scalar>(grads: &mut Gradients<F>, id: VarId, what: &str) -> Result<Tensor<F>> {
    grads
        .take(id)
        .ok_or_else(|| Error::Protocol(format!("{what} did not participate in the forward pass")))
}

/// Mean over the clip axis (the second-to-last axis): `[... x c x h] -> [... x h]`.
pub fn global_avg_pool<F: Scalar>(tape: &mut Tape<F>, x: VarId) -> Result<VarId> {
    let rank = tape.value(x).rank();
    if rank < 2 {
        return Err(Error::Shape {
            op: "global_avg_pool",
            detail: format!("expected rank >= 2, got {:?}", tape.value(x).shape()),
        });
    }
    tape.mean_axis(x, rank - 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numerical_grad};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn linear_zero_weights_gives_zero_output() {
        let mut r = rng(1);
        let mut layer = Linear::<f64>::new(4, 3, false, &mut r);
        for w in layer.weight.value.data_mut() {
            *w = 0.0;
        }
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape.leaf(random_tensor(&mut r, vec![2, 4])).unwrap();
        let y = layer.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }

    #[test]
    fn linear_consumes_flattened_clip_width() {
        // 6 channels x clip length 8 = 48... embedding of the h=256 variant
        // uses in=48; the 16-sample variant uses in=96.
        let mut r = rng(2);
        let layer = Linear::<f64>::new(96, 256, false, &mut r);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape.leaf(random_tensor(&mut r, vec![8, 96])).unwrap();
        let y = layer.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 256]);
    }

    #[test]
    fn linear_extent_mismatch_is_error() {
        let mut r = rng(3);
        let layer = Linear::<f64>::new(4, 3, true, &mut r);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape.leaf(Tensor::zeros(vec![2, 5])).unwrap();
        assert!(layer.forward(&mut tape, &vars, x).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng(4);
        let mut layer = Linear::<f64>::new(5, 3, true, &mut r);
        let x = random_tensor(&mut r, vec![4, 5]);

        let proto = layer.clone();
        let run = move |w: &[f64], b: &[f64], xv: &[f64]| -> f64 {
            let mut l = proto.clone();
            l.weight.value.data_mut().copy_from_slice(w);
            l.bias.as_mut().unwrap().value.data_mut().copy_from_slice(b);
            let mut tape = Tape::new();
            let vars = l.stage(&mut tape).unwrap();
            let xi = tape
                .leaf(Tensor::new(vec![4, 5], xv.to_vec()).unwrap())
                .unwrap();
            let y = l.forward(&mut tape, &vars, xi).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.value(loss).item()
        };

        let w0: Vec<f64> = layer.weight.value.data().to_vec();
        let b0: Vec<f64> = layer.bias.as_ref().unwrap().value.data().to_vec();

        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let xi = tape.leaf(x.clone()).unwrap();
        let y = layer.forward(&mut tape, &vars, xi).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let dx = grads.take(xi).unwrap();
        layer.harvest(&vars, &mut grads).unwrap();

        let nw = numerical_grad(|v| run(v, &b0, x.data()), &w0, 1e-5);
        let nb = numerical_grad(|v| run(&w0, v, x.data()), &b0, 1e-5);
        let nx = numerical_grad(|v| run(&w0, &b0, v), x.data(), 1e-5);
        assert!(max_rel_err(layer.weight.grad.data(), &nw) < 1e-4);
        assert!(max_rel_err(layer.bias.as_ref().unwrap().grad.data(), &nb) < 1e-4);
        assert!(max_rel_err(dx.data(), &nx) < 1e-4);
    }

    #[test]
    fn layernorm_constant_row_maps_to_zero() {
        let layer = LayerNorm::<f64>::new(4);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape
            .leaf(Tensor::new(vec![1, 4], vec![7.5; 4]).unwrap())
            .unwrap();
        let y = layer.forward(&mut tape, &vars, x).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn layernorm_two_point_row() {
        // [1, 3] normalizes to [-1, 1] as eps -> 0
        let layer = LayerNorm::<f64>::new(2).with_eps(1e-12);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape
            .leaf(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap())
            .unwrap();
        let y = layer.forward(&mut tape, &vars, x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-9);
        assert!((out[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layernorm_rejects_degenerate_axis() {
        let layer = LayerNorm::<f64>::new(1);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape.leaf(Tensor::zeros(vec![3, 1])).unwrap();
        assert!(layer.forward(&mut tape, &vars, x).is_err());
    }

    #[test]
    fn layernorm_normalizes_rows() {
        // pre-affine output has near-zero mean and near-unit variance
        let mut r = rng(5);
        let d = 16;
        let layer = LayerNorm::<f64>::new(d);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape.leaf(random_tensor(&mut r, vec![8, d])).unwrap();
        let y = layer.forward(&mut tape, &vars, x).unwrap();
        for row in tape.value(y).data().chunks(d) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut r = rng(6);
        let d = 6;
        let mut layer = LayerNorm::<f64>::new(d);
        // non-default affine so gain gradients are informative
        for (i, g) in layer.gain.value.data_mut().iter_mut().enumerate() {
            *g = 0.5 + 0.1 * i as f64;
        }
        let x = random_tensor(&mut r, vec![3, d]);

        let proto = layer.clone();
        let run = move |g: &[f64], s: &[f64], xv: &[f64]| -> f64 {
            let mut l = proto.clone();
            l.gain.value.data_mut().copy_from_slice(g);
            l.shift.value.data_mut().copy_from_slice(s);
            let mut tape = Tape::new();
            let vars = l.stage(&mut tape).unwrap();
            let xi = tape
                .leaf(Tensor::new(vec![3, d], xv.to_vec()).unwrap())
                .unwrap();
            let y = l.forward(&mut tape, &vars, xi).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.value(loss).item()
        };

        let g0: Vec<f64> = layer.gain.value.data().to_vec();
        let s0: Vec<f64> = layer.shift.value.data().to_vec();

        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let xi = tape.leaf(x.clone()).unwrap();
        let y = layer.forward(&mut tape, &vars, xi).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let dx = grads.take(xi).unwrap();
        layer.harvest(&vars, &mut grads).unwrap();

        let ng = numerical_grad(|v| run(v, &s0, x.data()), &g0, 1e-5);
        let ns = numerical_grad(|v| run(&g0, v, x.data()), &s0, 1e-5);
        let nx = numerical_grad(|v| run(&g0, &s0, v), x.data(), 1e-5);
        assert!(max_rel_err(layer.gain.grad.data(), &ng) < 1e-4);
        assert!(max_rel_err(layer.shift.grad.data(), &ns) < 1e-4);
        assert!(max_rel_err(dx.data(), &nx) < 1e-4);
    }

    /// Gaussian CDF by Simpson quadrature of the density; independent of the
    /// erf route used in the implementation.
    fn phi_quadrature(x: f64) -> f64 {
        let n = 4000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..n {
            let t = i as f64 * h;
            acc += pdf(t) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![3], vec![1.0, 0.5, -1.3]).unwrap())
            .unwrap();
        let y = tape.gelu(x).unwrap();
        let out = tape.value(y).data();
        for (i, &v) in [1.0, 0.5, -1.3].iter().enumerate() {
            let expect = v * phi_quadrature(v);
            assert!((out[i] - expect).abs() < 1e-12, "gelu({v}) = {}", out[i]);
        }
    }

    #[test]
    fn gelu_shape_and_symmetry() {
        // GELU dips below zero left of x ~ -0.7509 (its one stationary
        // point), so monotonicity only holds to the right of it; the global
        // minimum is gelu(-0.7509...) ~ -0.1700.
        let mut xs = Vec::new();
        let mut i = -600;
        while i <= 600 {
            xs.push(i as f64 * 0.01);
            i += 1;
        }
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![xs.len()], xs.clone()).unwrap()).unwrap();
        let y = tape.gelu(x).unwrap();
        let out = tape.value(y).data();
        for (w, xw) in out.windows(2).zip(xs.windows(2)) {
            if xw[0] >= -0.75 {
                assert!(w[1] >= w[0], "not monotone at {}: {w:?}", xw[0]);
            }
        }
        for &v in out {
            assert!(v >= -0.1701, "below the global minimum: {v}");
        }
        // symmetry: gelu(x) - gelu(-x) = x, i.e. gelu(x) - x/2 is even
        for (j, &v) in xs.iter().enumerate() {
            let mirrored = out[xs.len() - 1 - j];
            assert!((out[j] - mirrored - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_single_clip_is_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gap_means_two_clips() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap())
            .unwrap();
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gap_invariant_to_clip_permutation() {
        let mut r = rng(7);
        let x = random_tensor(&mut r, vec![4, 3]);
        let mut permuted_data = vec![0.0; 12];
        let perm = [2usize, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            permuted_data[dst * 3..(dst + 1) * 3].copy_from_slice(&x.data()[src * 3..(src + 1) * 3]);
        }
        let permuted = Tensor::new(vec![4, 3], permuted_data).unwrap();

        let pool = |t: Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let id = tape.leaf(t).unwrap();
            let y = global_avg_pool(&mut tape, id).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = pool(x);
        let b = pool(permuted);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_via_gradient() {
        // grad of mean xent is (softmax - onehot)/B; each row of the gradient
        // sums to (sum(softmax) - 1)/B, so row sums near zero pin the softmax
        // normalization to 1e-12.
        let mut r = rng(8);
        let logits = random_tensor(&mut r, vec![5, 7]);
        let labels = [0usize, 2, 4, 6, 1];
        let mut tape = Tape::new();
        let il = tape.leaf(logits).unwrap();
        let loss = tape.softmax_cross_entropy(il, &labels).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let dl = grads.take(il).unwrap();
        for row in dl.data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-12 / 5.0 + 1e-13, "row sum {s}");
        }
    }

    #[test]
    fn softmax_xent_shift_invariance() {
        let mut r = rng(9);
        let logits = random_tensor(&mut r, vec![3, 6]);
        let labels = [1usize, 5, 0];
        let eval = |t: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let il = tape.leaf(t.clone()).unwrap();
            let loss = tape.softmax_cross_entropy(il, &labels).unwrap();
            tape.value(loss).item()
        };
        let base = eval(&logits);
        let mut shifted = logits.clone();
        for row in shifted.data_mut().chunks_mut(6) {
            for v in row {
                *v += 123.456;
            }
        }
        assert!((eval(&shifted) - base).abs() < 1e-10);
    }

    #[test]
    fn softmax_xent_saturated_logits() {
        let mut data = vec![0.0; 2 * 18];
        data[3] = 1e4;
        data[18 + 11] = 1e4;
        let logits = Tensor::new(vec![2, 18], data).unwrap();
        let mut tape = Tape::new();
        let il = tape.leaf(logits).unwrap();
        let loss = tape.softmax_cross_entropy(il, &[3, 11]).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn f32_layers_forward() {
        let mut r = rng(10);
        let layer = Linear::<f32>::new(3, 2, true, &mut r);
        let mut tape = Tape::new();
        let vars = layer.stage(&mut tape).unwrap();
        let x = tape
            .leaf(Tensor::<f32>::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let y = layer.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
    }
}
