//! Feature extractor: a small MLP over flattened grid inputs.
//!
//! Parameters live in one flat buffer (per layer: the `in × out` weight
//! block followed by the `out` bias), which keeps the optimizer, snapshots
//! and checkpoints trivial.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};
use crate::taskgen::{DomainLabel, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// Layer widths, `dims[0]` is the input dimension and the last entry is `d`.
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layers[0]` is the input batch, `layers[l+1]` the output of layer `l`.
    layers: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.layers.last().expect("cache has at least the input")
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Backbone {
    /// Hidden layers use tanh, the output layer is linear.
    pub fn new(input_dim: usize, cfg: &BackboneConfig, rng: &mut RngStream) -> Result<Self> {
        if input_dim == 0 || cfg.feature_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.feature_dim);
        let mut activations = vec![Activation::Tanh; cfg.hidden.len()];
        activations.push(Activation::Identity);
        let mut params = Vec::with_capacity(param_count(&dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.uniform_range(-limit, limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            dims,
            activations,
            params,
        })
    }

    pub fn from_parts(dims: Vec<usize>, activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::shape(
                "dims.len() = activations.len() + 1 >= 2",
                format!("{} dims, {} activations", dims.len(), activations.len()),
            ));
        }
        let expected = param_count(&dims);
        if params.len() != expected {
            return Err(Error::shape(expected, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteGradient { index: 0 });
        }
        Ok(Self {
            dims,
            activations,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn activation_tags(&self) -> Vec<u8> {
        self.activations.iter().map(|a| a.tag()).collect()
    }

    pub fn activations_from_tags(tags: &[u8]) -> Option<Vec<Activation>> {
        tags.iter().map(|&t| Activation::from_tag(t)).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.dims.windows(2).map(move |w| {
            let o = offset;
            offset += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.layers.pop().unwrap())
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input columns", self.input_dim()),
                batch.cols(),
            ));
        }
        let n = batch.rows();
        let mut layers = Vec::with_capacity(self.dims.len());
        layers.push(batch.clone());
        for (l, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let input = layers.last().unwrap();
            let mut out = vec![0.0; n * fan_out];
            for i in 0..n {
                let x = input.row(i);
                let o = &mut out[i * fan_out..(i + 1) * fan_out];
                o.copy_from_slice(b);
                for (k, &xk) in x.iter().enumerate() {
                    if xk == 0.0 {
                        continue;
                    }
                    let wk = &w[k * fan_out..(k + 1) * fan_out];
                    for (oj, wj) in o.iter_mut().zip(wk) {
                        *oj += xk * wj;
                    }
                }
                let act = self.activations[l];
                if act != Activation::Identity {
                    o.iter_mut().for_each(|v| *v = act.apply(*v));
                }
            }
            layers.push(Matrix::from_vec(n, fan_out, out)?);
        }
        Ok(ForwardCache { layers })
    }

    /// Parameter gradient of the scalar loss whose gradient with respect to
    /// the output features is `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Vec<f64>> {
        let out = cache.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::shape(
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut grads = vec![0.0; self.params.len()];
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut delta = upstream.clone();
        for l in (0..offsets.len()).rev() {
            let (off, fan_in, fan_out) = offsets[l];
            let act = self.activations[l];
            let y = &cache.layers[l + 1];
            if act != Activation::Identity {
                for (d, &yv) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *d *= act.grad_from_output(yv);
                }
            }
            let x = &cache.layers[l];
            let gw = x.t_matmul(&delta)?;
            grads[off..off + fan_in * fan_out].copy_from_slice(gw.as_slice());
            let gb = &mut grads[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            for r in delta.iter_rows() {
                for (g, v) in gb.iter_mut().zip(r) {
                    *g += v;
                }
            }
            if l > 0 {
                let w = Matrix::from_vec(fan_in, fan_out, self.params[off..off + fan_in * fan_out].to_vec())?;
                delta = delta.matmul_t(&w)?;
            }
        }
        Ok(grads)
    }

    pub fn snapshot(&self) -> FrozenBackbone {
        FrozenBackbone(Arc::new(self.clone()))
    }

    pub fn extract(&self, samples: &[&Sample]) -> Result<FeatureBatch> {
        let x = stack_inputs(samples)?;
        Ok(FeatureBatch::new(self.forward(&x)?, samples))
    }
}

/// Immutable copy of a backbone. Cloning shares the same parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone(Arc<Backbone>);

impl FrozenBackbone {
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.0.forward(batch)
    }

    pub fn extract(&self, samples: &[&Sample]) -> Result<FeatureBatch> {
        self.0.extract(samples)
    }

    pub fn snapshot(&self) -> FrozenBackbone {
        self.clone()
    }

    pub fn inner(&self) -> &Backbone {
        &self.0
    }

    /// Mutable copy, used when resuming from a checkpoint.
    pub fn thaw(&self) -> Backbone {
        (*self.0).clone()
    }
}

/// Stack flattened sample inputs into a batch matrix.
pub fn stack_inputs(samples: &[&Sample]) -> Result<Matrix> {
    let cols = samples.first().map_or(0, |s| s.values.len());
    let mut data = Vec::with_capacity(samples.len() * cols);
    for s in samples {
        if s.values.len() != cols {
            return Err(Error::shape(cols, s.values.len()));
        }
        data.extend_from_slice(&s.values);
    }
    Matrix::from_vec(samples.len(), cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Matrix,
    pub sample_ids: Vec<u64>,
    pub domain_labels: Vec<DomainLabel>,
}

impl FeatureBatch {
    fn new(features: Matrix, samples: &[&Sample]) -> Self {
        Self {
            features,
            sample_ids: samples.iter().map(|s| s.id).collect(),
            domain_labels: samples.iter().map(|s| s.domain()).collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), format!("{}/{}", params.len(), grads.len())));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidSpec(format!("learning rate must be positive, got {lr}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn linear(input: usize, out: usize, w: Vec<f64>, b: Vec<f64>) -> Backbone {
        let mut params = w;
        params.extend(b);
        Backbone::from_parts(vec![input, out], vec![Activation::Identity], params).unwrap()
    }

    #[test]
    fn identity_layer_is_identity() {
        let net = linear(3, 3, Matrix::identity(3).into_vec(), vec![0.0; 3]);
        let f = net.forward(&Matrix::identity(3)).unwrap();
        assert_eq!(f, Matrix::identity(3));
    }

    #[test]
    fn zero_net_gives_zero_features() {
        let mut rng = RngStream::new(1);
        let mut net = Backbone::new(5, &BackboneConfig { hidden: vec![4], feature_dim: 3 }, &mut rng).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = Matrix::from_vec(2, 5, (0..10).map(|v| v as f64).collect()).unwrap();
        assert!(net.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_width() {
        let net = linear(3, 2, vec![0.0; 6], vec![0.0; 2]);
        assert!(matches!(net.forward(&Matrix::zeros(1, 4)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = RngStream::new(3);
        let net = Backbone::new(6, &BackboneConfig { hidden: vec![5, 4], feature_dim: 3 }, &mut rng).unwrap();
        let x = Matrix::from_vec(4, 6, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let cache = net.forward_cached(&x).unwrap();
        let g = net.backward(&cache, &Matrix::zeros(4, 3)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_loss_on_linear_layer() {
        // loss = sum of features: dW[k][j] = sum_i x[i][k], db = n
        let net = linear(2, 3, vec![0.5; 6], vec![0.1; 3]);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let cache = net.forward_cached(&x).unwrap();
        let up = Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let g = net.backward(&cache, &up).unwrap();
        assert_eq!(&g[0..3], &[4.5; 3]);
        assert_eq!(&g[3..6], &[1.5; 3]);
        assert_eq!(&g[6..9], &[3.0; 3]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(11);
        let net = Backbone::new(7, &BackboneConfig { hidden: vec![6, 5], feature_dim: 4 }, &mut rng).unwrap();
        let x = Matrix::from_vec(3, 7, (0..21).map(|_| rng.normal()).collect()).unwrap();
        let r = Matrix::from_vec(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let cache = net.forward_cached(&x).unwrap();
        let analytic = net.backward(&cache, &r).unwrap();
        let numeric = finite_diff_grad(
            |p| {
                let n = Backbone::from_parts(net.dims.clone(), net.activations.clone(), p.to_vec()).unwrap();
                crate::numerics::dot(n.forward(&x).unwrap().as_slice(), r.as_slice())
            },
            net.params(),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-4) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut rng = RngStream::new(5);
        let mut net = Backbone::new(4, &BackboneConfig { hidden: vec![3], feature_dim: 2 }, &mut rng).unwrap();
        let x = Matrix::from_vec(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let frozen = net.snapshot();
        let before = frozen.forward(&x).unwrap();
        assert_eq!(before, net.forward(&x).unwrap());
        let mut adam = Adam::new(net.num_params());
        for _ in 0..10 {
            let grads = vec![1.0; net.num_params()];
            adam.step(net.params_mut(), &grads, 0.01).unwrap();
        }
        assert_eq!(frozen.forward(&x).unwrap(), before);
        assert_ne!(net.forward(&x).unwrap(), before);
        assert_eq!(frozen.snapshot(), frozen);
    }

    #[test]
    fn adam_examples() {
        let mut adam = Adam::new(1);
        let mut w = [1.0];
        adam.step(&mut w, &[0.0], 0.1).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(adam.t, 1);

        // t=1: m_hat = g, v_hat = g², step = lr * g / (|g| + eps)
        let mut adam = Adam::new(1);
        let mut w = [1.0];
        adam.step(&mut w, &[1.0], 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-8);

        assert!(matches!(adam.step(&mut w, &[f64::NAN], 0.1), Err(Error::NonFiniteGradient { index: 0 })));
    }

    #[test]
    fn forward_is_row_permutation_equivariant() {
        let mut rng = RngStream::new(8);
        let net = Backbone::new(5, &BackboneConfig::default(), &mut rng).unwrap();
        let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.normal()).collect()).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let f = net.forward(&x).unwrap();
        let fp = net.forward(&x.select_rows(&perm)).unwrap();
        assert_eq!(fp, f.select_rows(&perm));
    }
}
