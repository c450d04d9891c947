//! Fully connected networks with hand-written backpropagation.
//!
//! Layout: each layer computes `a = h·W + b` with `W` of shape `in × out`,
//! hidden layers apply the network's activation, and the last layer is linear.
//! Parameters flatten layer by layer as `W` (row-major) followed by `b`.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::prng::Prng;
use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Subgradient at 0 is 0.
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    #[inline]
    fn deriv(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    fn second_deriv(self, a: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = a.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    w: DenseMatrix,
    b: Vec<f64>,
}

impl Layer {
    pub fn new(w: DenseMatrix, b: Vec<f64>) -> Result<Self> {
        ensure_dim("layer bias length", w.cols(), b.len())?;
        if let Some(index) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "layer bias",
                index,
            });
        }
        Ok(Self { w, b })
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    fn num_params(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.len()
    }
}

/// Multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpDoc", into = "MlpDoc")]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values of a forward pass, reused by the backward passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: DenseMatrix,
    /// Pre-activations per layer; the last entry is the network output.
    pre: Vec<DenseMatrix>,
    /// Hidden activations (one per hidden layer).
    post: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &DenseMatrix {
        self.pre.last().expect("mlp has at least one layer")
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("mlp needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            ensure_dim("consecutive layer shapes", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self { layers, activation })
    }

    /// Glorot-uniform weights, zero biases. `sizes` lists every width including input and output.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Prng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                Layer {
                    w: DenseMatrix::from_raw(fan_in, fan_out, data),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Self::from_layers(layers, activation)
    }

    /// Single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Layer {
                w: DenseMatrix::identity(dim),
                b: vec![0.0; dim],
            }],
            activation: Activation::Relu,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.w.as_slice());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim("mlp parameter vector", self.num_params(), params.len())?;
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.w.rows() * layer.w.cols();
            layer.w.as_mut_slice().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    /// Multiplies the last layer's weights and bias by `s`, scaling the output.
    pub fn scale_output(&mut self, s: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        last.w.scale(s);
        last.b.iter_mut().for_each(|b| *b *= s);
    }

    /// FNV-1a hash of the parameter bits.
    pub fn param_hash(&self) -> u64 {
        self.params().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
        })
    }

    pub fn forward(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        ensure_dim("mlp input width", self.input_dim(), inputs.cols())?;
        let last = self.layers.len() - 1;
        let mut h = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.matmul(&layer.w)?;
            a.add_row_vector(&layer.b)?;
            h = if l < last {
                a.map(|v| self.activation.apply(v))
            } else {
                a
            };
        }
        Ok(h)
    }

    pub fn forward_cached(&self, inputs: &DenseMatrix) -> Result<ForwardCache> {
        ensure_dim("mlp input width", self.input_dim(), inputs.cols())?;
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(last);
        for (l, layer) in self.layers.iter().enumerate() {
            let h = if l == 0 { inputs } else { &post[l - 1] };
            let mut a = h.matmul(&layer.w)?;
            a.add_row_vector(&layer.b)?;
            if l < last {
                post.push(a.map(|v| self.activation.apply(v)));
            }
            pre.push(a);
        }
        Ok(ForwardCache {
            input: inputs.clone(),
            pre,
            post,
        })
    }

    /// Gradients of `Σ upstream ⊙ output` with respect to parameters and inputs.
    pub fn backprop(&self, inputs: &DenseMatrix, upstream: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
        let cache = self.forward_cached(inputs)?;
        self.backprop_cached(&cache, upstream)
    }

    pub fn backprop_cached(&self, cache: &ForwardCache, upstream: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
        let out = cache.output();
        ensure_dim("upstream rows", out.rows(), upstream.rows())?;
        ensure_dim("upstream cols", out.cols(), upstream.cols())?;

        let mut grads: Vec<(DenseMatrix, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let h_in = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let gw = h_in.t_matmul(&g)?;
            let gb = g.column_sums();
            grads.push((gw, gb));
            let mut gh = g.matmul_t(&layer.w)?;
            if l > 0 {
                let a = &cache.pre[l - 1];
                for (v, &z) in gh.as_mut_slice().iter_mut().zip(a.as_slice()) {
                    *v *= self.activation.deriv(z);
                }
            }
            g = gh;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads {
            flat.extend_from_slice(gw.as_slice());
            flat.extend_from_slice(&gb);
        }
        Ok((flat, g))
    }

    /// Tangent pass for input direction `k`: pre-activation tangents per layer.
    fn tangents(&self, cache: &ForwardCache, k: usize) -> Result<Vec<DenseMatrix>> {
        let n = cache.input.rows();
        let last = self.layers.len() - 1;
        let mut ta = Vec::with_capacity(self.layers.len());
        // First layer: e_k · W_0 is row k of W_0 for every sample.
        let w0 = self.layers[0].w.row(k);
        let mut first = DenseMatrix::zeros(n, w0.len());
        for i in 0..n {
            first.row_mut(i).copy_from_slice(w0);
        }
        ta.push(first);
        for l in 1..=last {
            let a = &cache.pre[l - 1];
            let t = DenseMatrix::from_raw(
                a.rows(),
                a.cols(),
                ta[l - 1]
                    .as_slice()
                    .iter()
                    .zip(a.as_slice())
                    .map(|(&v, &z)| v * self.activation.deriv(z))
                    .collect(),
            );
            ta.push(t.matmul(&self.layers[l].w)?);
        }
        Ok(ta)
    }

    /// Frobenius norm of the input Jacobian at each row of `inputs`.
    pub fn jacobian_norms(&self, inputs: &DenseMatrix) -> Result<Vec<f64>> {
        let cache = self.forward_cached(inputs)?;
        let mut sq = vec![0.0; inputs.rows()];
        for k in 0..self.input_dim() {
            let ta = self.tangents(&cache, k)?;
            for (s, r) in sq.iter_mut().zip(ta[ta.len() - 1].row_sq_norms()) {
                *s += r;
            }
        }
        Ok(sq.into_iter().map(f64::sqrt).collect())
    }

    /// Parameter gradient of `Σ_i weights[i] · ‖J(inputs_i)‖_F` (forward-over-reverse).
    ///
    /// Returns the per-row Jacobian norms alongside the gradient.
    pub fn jacobian_norm_backprop(&self, inputs: &DenseMatrix, weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_dim("jacobian weights", inputs.rows(), weights.len())?;
        let cache = self.forward_cached(inputs)?;
        let n = inputs.rows();
        let last = self.layers.len() - 1;

        let mut all_ta = Vec::with_capacity(self.input_dim());
        let mut sq = vec![0.0; n];
        for k in 0..self.input_dim() {
            let ta = self.tangents(&cache, k)?;
            for (s, r) in sq.iter_mut().zip(ta[last].row_sq_norms()) {
                *s += r;
            }
            all_ta.push(ta);
        }
        let norms: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();

        let mut gw: Vec<DenseMatrix> = self
            .layers
            .iter()
            .map(|l| DenseMatrix::zeros(l.in_dim(), l.out_dim()))
            .collect();
        let mut gb: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect();
        // Adjoints of hidden pre-activations collected from the curvature of the activation.
        let mut pre_bar: Vec<DenseMatrix> = cache.pre[..last]
            .iter()
            .map(|a| DenseMatrix::zeros(a.rows(), a.cols()))
            .collect();
        let curved = !self.activation.is_piecewise_linear();

        for (k, ta) in all_ta.iter().enumerate() {
            let mut g = ta[last].clone();
            for i in 0..n {
                let scale = if norms[i] > 0.0 { weights[i] / norms[i] } else { 0.0 };
                g.row_mut(i).iter_mut().for_each(|v| *v *= scale);
            }
            for l in (0..=last).rev() {
                if l == 0 {
                    // t_0 = e_k: only row k of W_0 receives gradient.
                    let sums = g.column_sums();
                    for (dst, s) in gw[0].row_mut(k).iter_mut().zip(sums) {
                        *dst += s;
                    }
                    break;
                }
                let a = &cache.pre[l - 1];
                let t_in = DenseMatrix::from_raw(
                    a.rows(),
                    a.cols(),
                    ta[l - 1]
                        .as_slice()
                        .iter()
                        .zip(a.as_slice())
                        .map(|(&v, &z)| v * self.activation.deriv(z))
                        .collect(),
                );
                gw[l].add_assign(&t_in.t_matmul(&g)?)?;
                let t_bar = g.matmul_t(&self.layers[l].w)?;
                if curved {
                    let pb = pre_bar[l - 1].as_mut_slice();
                    for (idx, p) in pb.iter_mut().enumerate() {
                        *p += t_bar.as_slice()[idx]
                            * ta[l - 1].as_slice()[idx]
                            * self.activation.second_deriv(a.as_slice()[idx]);
                    }
                }
                g = DenseMatrix::from_raw(
                    a.rows(),
                    a.cols(),
                    t_bar
                        .as_slice()
                        .iter()
                        .zip(a.as_slice())
                        .map(|(&v, &z)| v * self.activation.deriv(z))
                        .collect(),
                );
            }
        }

        if curved {
            // Primal reverse pass seeded by the curvature adjoints.
            let mut h_bar: Option<DenseMatrix> = None;
            for l in (0..last).rev() {
                let a = &cache.pre[l];
                let mut a_bar = pre_bar[l].clone();
                if let Some(hb) = &h_bar {
                    for ((ab, &hv), &z) in a_bar.as_mut_slice().iter_mut().zip(hb.as_slice()).zip(a.as_slice()) {
                        *ab += hv * self.activation.deriv(z);
                    }
                }
                let h_in = if l == 0 { &cache.input } else { &cache.post[l - 1] };
                gw[l].add_assign(&h_in.t_matmul(&a_bar)?)?;
                for (dst, s) in gb[l].iter_mut().zip(a_bar.column_sums()) {
                    *dst += s;
                }
                h_bar = Some(a_bar.matmul_t(&self.layers[l].w)?);
            }
        }

        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in gw.iter().zip(&gb) {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b);
        }
        Ok((norms, flat))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpDoc {
    layers: Vec<LayerDoc>,
    activation: Activation,
}

impl From<Mlp> for MlpDoc {
    fn from(net: Mlp) -> Self {
        MlpDoc {
            layers: net
                .layers
                .into_iter()
                .map(|l| LayerDoc {
                    w: l.w.to_rows(),
                    b: l.b,
                })
                .collect(),
            activation: net.activation,
        }
    }
}

impl TryFrom<MlpDoc> for Mlp {
    type Error = Error;

    fn try_from(doc: MlpDoc) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| Layer::new(DenseMatrix::from_rows(&l.w)?, l.b))
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers, doc.activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;

    fn hand_net() -> Mlp {
        // 2-2-1: W1 = [[1, -1], [2, 1]], b1 = [0, -1]; W2 = [[1], [3]], b2 = [0.5]
        let l1 = Layer::new(
            DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 1.0]]).unwrap(),
            vec![0.0, -1.0],
        )
        .unwrap();
        let l2 = Layer::new(DenseMatrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap(), vec![0.5]).unwrap();
        Mlp::from_layers(vec![l1, l2], Activation::Relu).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let mut net = Mlp::new(&[3, 4, 2], Activation::Relu, &mut Prng::new(0)).unwrap();
        net.set_params(&vec![0.0; net.num_params()]).unwrap();
        let x = Prng::new(1).normal_matrix(5, 3);
        assert!(net.forward(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_net_passes_input_through() {
        let x = Prng::new(2).normal_matrix(4, 3);
        assert_eq!(Mlp::identity(3).forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // x = (1, 1): a1 = (1 + 2, -1 + 1 - 1) = (3, -1); relu → (3, 0); out = 3 + 0 + 0.5
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = hand_net().forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[3.5]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = DenseMatrix::zeros(2, 5);
        assert!(matches!(hand_net().forward(&x), Err(Error::Dimension { .. })));
        let ok = DenseMatrix::zeros(2, 2);
        assert!(hand_net().backprop(&ok, &DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let net = Mlp::new(&[3, 5, 2], Activation::Relu, &mut Prng::new(3)).unwrap();
        let x = Prng::new(4).normal_matrix(6, 3);
        let (gp, gx) = net.backprop(&x, &DenseMatrix::zeros(6, 2)).unwrap();
        assert!(gp.iter().all(|&v| v == 0.0));
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_net_weight_gradient_is_xt_g() {
        let mut rng = Prng::new(5);
        let net = Mlp::new(&[3, 2], Activation::Relu, &mut rng).unwrap();
        let x = rng.normal_matrix(4, 3);
        let g = rng.normal_matrix(4, 2);
        let (gp, _) = net.backprop(&x, &g).unwrap();
        let expected = x.t_matmul(&g).unwrap();
        assert_eq!(&gp[..6], expected.as_slice());
        assert_eq!(&gp[6..], g.column_sums().as_slice());
    }

    #[test]
    fn three_layer_backprop_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = Prng::new(100 + seed);
            let net = Mlp::new(&[3, 6, 5, 2], Activation::Relu, &mut rng).unwrap();
            let x = rng.normal_matrix(4, 3);
            let g = rng.normal_matrix(4, 2);
            let (gp, gx) = net.backprop(&x, &g).unwrap();
            let f = |p: &[f64]| {
                let out = net.with_params(p).unwrap().forward(&x).unwrap();
                crate::numerics::dot(out.as_slice(), g.as_slice())
            };
            assert!(check_gradient(f, &gp, &net.params(), 1e-5).unwrap() <= 1e-5);
            let fx = |xs: &[f64]| {
                let xm = DenseMatrix::from_vec(4, 3, xs.to_vec()).unwrap();
                crate::numerics::dot(net.forward(&xm).unwrap().as_slice(), g.as_slice())
            };
            assert!(check_gradient(fx, gx.as_slice(), x.as_slice(), 1e-5).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn jacobian_norm_of_linear_map() {
        let net = Mlp::from_layers(
            vec![Layer::new(DenseMatrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap(), vec![1.0]).unwrap()],
            Activation::Relu,
        )
        .unwrap();
        let x = Prng::new(6).normal_matrix(3, 2);
        assert_eq!(net.jacobian_norms(&x).unwrap(), vec![5.0; 3]);
    }

    #[test]
    fn jacobian_norm_gradient_matches_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh] {
            let mut rng = Prng::new(7);
            let net = Mlp::new(&[2, 5, 4, 3], act, &mut rng).unwrap();
            let x = rng.normal_matrix(3, 2);
            let w = vec![0.7, -1.3, 0.4];
            let (_, grad) = net.jacobian_norm_backprop(&x, &w).unwrap();
            let f = |p: &[f64]| {
                let norms = net.with_params(p).unwrap().jacobian_norms(&x).unwrap();
                crate::numerics::dot(&norms, &w)
            };
            let err = check_gradient(f, &grad, &net.params(), 1e-5).unwrap();
            assert!(err <= 1e-5, "{act:?}: {err}");
        }
    }

    #[test]
    fn json_layout_matches_contract() {
        let json = serde_json::to_value(hand_net()).unwrap();
        assert_eq!(json["activation"], "relu");
        assert_eq!(json["layers"][0]["w"][1][0], 2.0);
        assert_eq!(json["layers"][1]["b"][0], 0.5);
        let back: Mlp = serde_json::from_value(json).unwrap();
        assert_eq!(back, hand_net());
    }

    #[test]
    fn json_rejects_incompatible_layers() {
        let bad = r#"{"layers":[{"w":[[1.0,2.0]],"b":[0.0,0.0]},{"w":[[1.0]],"b":[0.0]}],"activation":"relu"}"#;
        assert!(serde_json::from_str::<Mlp>(bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flatten_unflatten_roundtrip(seed in 0u64..1000, vals in proptest::collection::vec(-1e3f64..1e3, 51)) {
                let mut net = Mlp::new(&[4, 5, 3, 2], Activation::Relu, &mut Prng::new(seed)).unwrap();
                let p = &vals[..];
                net.set_params(p).unwrap();
                prop_assert_eq!(net.params(), p.to_vec());
                let json = serde_json::to_string(&net).unwrap();
                let back: Mlp = serde_json::from_str(&json).unwrap();
                prop_assert_eq!(back.params(), p.to_vec());
            }
        }
    }
}
