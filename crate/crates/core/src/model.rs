//! Small MLP embedding networks with analytic backpropagation, an
//! additive-angular-margin classification head, and SGD with momentum.

use std::io::Cursor;
use std::path::Path;

use rand::RngExt;

use crate::binio;
use crate::error::{Error, Result};
use crate::vec_math::{self, Matrix, EPS_NORM};

/// Checkpoint file magic ("CFMD") and version.
pub const MODEL_MAGIC: [u8; 4] = *b"CFMD";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Relu,
}

/// Architecture descriptor: input -> hidden layers -> embedding.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidSpec("embed_dim must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer, in forward order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embed_dim));
        dims
    }
}

/// One dense layer: `weights` is out×in row-major, plus a bias per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Per-parameter gradients, shape-congruent with [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|x| x.is_finite())
    }
}

/// Activations recorded by a forward pass, consumed by the matching backward
/// pass. `acts[0]` is the input batch; `acts[l + 1]` is layer `l`'s output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Matrix>,
    fingerprint: u64,
}

fn fingerprint(model: &MlpModel) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |v: u64| {
        h ^= v;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    mix(model.spec.input_dim as u64);
    mix(model.spec.embed_dim as u64);
    for &d in &model.spec.hidden_dims {
        mix(d as u64);
    }
    for layer in &model.layers {
        for &w in layer.weights.data() {
            mix(w.to_bits());
        }
        for &b in &layer.bias {
            mix(b.to_bits());
        }
    }
    h
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<MlpModel> {
    spec.validate()?;
    let mut rng = vec_math::seeded_rng(seed);
    let layers = spec
        .layer_dims()
        .iter()
        .map(|&(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
                .collect();
            Layer {
                weights: Matrix::from_vec(fan_out, fan_in, data),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpModel {
        spec: spec.clone(),
        layers,
    })
}

/// Forward pass over a batch (rows = samples). Returns N×embed_dim
/// embeddings and the cache needed by [`mlp_backward`].
pub fn mlp_forward(model: &MlpModel, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != model.spec.input_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("N x {}", model.spec.input_dim),
            actual: format!("{} x {}", inputs.rows(), inputs.cols()),
        });
    }
    let n = inputs.rows();
    let last = model.layers.len() - 1;
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    acts.push(inputs.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        let prev = &acts[l];
        let out_dim = layer.weights.rows();
        let mut z = Matrix::zeros(n, out_dim);
        for r in 0..n {
            let x = prev.row(r);
            let zr = z.row_mut(r);
            for c in 0..out_dim {
                zr[c] = vec_math::dot(x, layer.weights.row(c)) + layer.bias[c];
            }
        }
        if l != last {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
    }
    let embeddings = acts.last().unwrap().clone();
    let cache = ForwardCache {
        acts,
        fingerprint: fingerprint(model),
    };
    Ok((embeddings, cache))
}

/// Backpropagate `grad_embeddings` (dLoss/dEmbeddings) to all parameters.
pub fn mlp_backward(
    model: &MlpModel,
    cache: &ForwardCache,
    grad_embeddings: &Matrix,
) -> Result<GradientSet> {
    if cache.fingerprint != fingerprint(model) {
        return Err(Error::StaleCache);
    }
    let out = cache.acts.last().unwrap();
    if grad_embeddings.rows() != out.rows() || grad_embeddings.cols() != out.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {}", out.rows(), out.cols()),
            actual: format!("{} x {}", grad_embeddings.rows(), grad_embeddings.cols()),
        });
    }
    let n = grad_embeddings.rows();
    let mut grads = GradientSet::zeros_like(model);
    // The embedding layer is linear, so dL/dz starts as grad_embeddings.
    let mut dz = grad_embeddings.clone();
    for l in (0..model.layers.len()).rev() {
        let prev = &cache.acts[l];
        let layer = &model.layers[l];
        let out_dim = layer.weights.rows();
        let in_dim = layer.weights.cols();
        {
            let dw = &mut grads.weights[l];
            let db = &mut grads.biases[l];
            for r in 0..n {
                let dzr = dz.row(r);
                let x = prev.row(r);
                for c in 0..out_dim {
                    let g = dzr[c];
                    db[c] += g;
                    let wrow = dw.row_mut(c);
                    for k in 0..in_dim {
                        wrow[k] += g * x[k];
                    }
                }
            }
        }
        if l > 0 {
            let mut da = Matrix::zeros(n, in_dim);
            for r in 0..n {
                let dzr = dz.row(r);
                let dar = da.row_mut(r);
                for c in 0..out_dim {
                    let g = dzr[c];
                    let wrow = layer.weights.row(c);
                    for k in 0..in_dim {
                        dar[k] += g * wrow[k];
                    }
                }
                // ReLU mask: the stored activation is already rectified.
                let a = prev.row(r);
                for k in 0..in_dim {
                    if a[k] <= 0.0 {
                        dar[k] = 0.0;
                    }
                }
            }
            dz = da;
        }
    }
    Ok(grads)
}

/// Additive-angular-margin classification head over M classes.
/// `class_weights` rows are normalized at use; `scale` is the logit scale,
/// `margin` the angular margin in radians.
#[derive(Debug, Clone)]
pub struct ArcHead {
    pub class_weights: Matrix,
    pub scale: f64,
    pub margin: f64,
}

impl ArcHead {
    pub fn init(num_classes: usize, embed_dim: usize, scale: f64, margin: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParams("head needs >= 2 classes".into()));
        }
        let limit = (6.0 / (num_classes + embed_dim) as f64).sqrt();
        let mut rng = vec_math::seeded_rng(seed);
        let data = (0..num_classes * embed_dim)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
            .collect();
        let head = Self {
            class_weights: Matrix::from_vec(num_classes, embed_dim, data),
            scale,
            margin,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::InvalidParams("scale must be > 0".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidParams("margin must be in [0, pi/2)".into()));
        }
        for m in 0..self.class_weights.rows() {
            if vec_math::norm(self.class_weights.row(m)) <= EPS_NORM {
                return Err(Error::ZeroVector);
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.rows()
    }
}

/// Margin cross-entropy over cosine logits.
///
/// For each sample the target-class cosine `c` is replaced by
/// `cos(acos(c) + margin)` before scaling; with `margin = 0` this reduces to
/// softmax cross-entropy on `scale * cos` logits. Returns the mean loss, the
/// gradient with respect to the embeddings and the gradient with respect to
/// the (unnormalized) class weights.
pub fn arcface_loss(
    embeddings: &Matrix,
    labels: &[u32],
    head: &ArcHead,
) -> Result<(f64, Matrix, Matrix)> {
    head.validate()?;
    let n = embeddings.rows();
    let d = embeddings.cols();
    let m_classes = head.num_classes();
    assert_eq!(labels.len(), n, "labels length != batch size");
    if d != head.class_weights.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("N x {}", head.class_weights.cols()),
            actual: format!("{n} x {d}"),
        });
    }
    for &y in labels {
        if (y as usize) >= m_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_identities: m_classes,
            });
        }
    }

    // Normalized class weights and embeddings, plus their original norms.
    let mut v_hat = Matrix::zeros(m_classes, d);
    let mut w_norms = vec![0.0; m_classes];
    for j in 0..m_classes {
        let row = head.class_weights.row(j);
        let nw = vec_math::norm(row);
        w_norms[j] = nw;
        let dst = v_hat.row_mut(j);
        for k in 0..d {
            dst[k] = row[k] / nw;
        }
    }
    let mut u_hat = Matrix::zeros(n, d);
    let mut e_norms = vec![0.0; n];
    for i in 0..n {
        let row = embeddings.row(i);
        let ne = vec_math::norm(row);
        if ne <= EPS_NORM {
            return Err(Error::ZeroVector);
        }
        e_norms[i] = ne;
        let dst = u_hat.row_mut(i);
        for k in 0..d {
            dst[k] = row[k] / ne;
        }
    }

    let cos_m = head.margin.cos();
    let sin_m = head.margin.sin();
    let mut total_loss = 0.0;
    let mut grad_emb = Matrix::zeros(n, d);
    let mut grad_head = Matrix::zeros(m_classes, d);
    // grad_head row j = (A_j - B_j * v_hat_j) / |w_j| with
    // A_j = sum_i coeff_ij * u_hat_i and B_j = sum_i coeff_ij * cos_ij.
    let mut head_acc = Matrix::zeros(m_classes, d);
    let mut head_cos_acc = vec![0.0; m_classes];

    let mut cos_row = vec![0.0; m_classes];
    let mut logits = vec![0.0; m_classes];
    for i in 0..n {
        let u = u_hat.row(i);
        let y = labels[i] as usize;
        for j in 0..m_classes {
            cos_row[j] = vec_math::dot(u, v_hat.row(j)).clamp(-1.0, 1.0);
        }
        // Margin factor: d(cos(theta + m))/d(cos(theta)).
        let mut target_factor = 1.0;
        for j in 0..m_classes {
            logits[j] = if j == y && head.margin != 0.0 {
                let c = cos_row[j].clamp(-1.0 + 1e-12, 1.0 - 1e-12);
                let sin_t = (1.0 - c * c).sqrt();
                target_factor = cos_m + sin_m * c / sin_t;
                head.scale * (c * cos_m - sin_t * sin_m)
            } else {
                head.scale * cos_row[j]
            };
        }
        let max_logit = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|&l| (l - max_logit).exp()).sum();
        total_loss += max_logit + sum_exp.ln() - logits[y];

        let inv_ne = 1.0 / e_norms[i];
        let mut cos_weighted = 0.0;
        let gi = grad_emb.row_mut(i);
        for j in 0..m_classes {
            let p = (logits[j] - max_logit).exp() / sum_exp;
            let dlogit = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            let coeff = dlogit * head.scale * if j == y { target_factor } else { 1.0 };
            let v = v_hat.row(j);
            for k in 0..d {
                gi[k] += coeff * v[k];
            }
            cos_weighted += coeff * cos_row[j];
            let aj = head_acc.row_mut(j);
            for k in 0..d {
                aj[k] += coeff * u[k];
            }
            head_cos_acc[j] += coeff * cos_row[j];
        }
        for k in 0..d {
            gi[k] = (gi[k] - cos_weighted * u[k]) * inv_ne;
        }
    }
    for j in 0..m_classes {
        let inv_nw = 1.0 / w_norms[j];
        let a = head_acc.row(j);
        let v = v_hat.row(j);
        let g = grad_head.row_mut(j);
        for k in 0..d {
            g[k] = (a[k] - head_cos_acc[j] * v[k]) * inv_nw;
        }
    }
    Ok((total_loss / n as f64, grad_emb, grad_head))
}

/// Momentum buffer for [`sgd_step`]; shape-congruent with the model.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub velocity: GradientSet,
}

impl SgdState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            velocity: GradientSet::zeros_like(model),
        }
    }
}

/// One momentum-SGD update on a flat parameter slice:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Apply momentum SGD to every model parameter.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &GradientSet,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (l, layer) in model.layers.iter_mut().enumerate() {
        sgd_update(
            layer.weights.data_mut(),
            grads.weights[l].data(),
            state.velocity.weights[l].data_mut(),
            lr,
            momentum,
            weight_decay,
        );
        sgd_update(
            &mut layer.bias,
            &grads.biases[l],
            &mut state.velocity.biases[l],
            lr,
            momentum,
            weight_decay,
        );
    }
}

/// Serialize a model: magic, version, dims (input, hidden..., embed) as u32,
/// then all parameters as little-endian f32 in layer order (weights row-major,
/// then bias, per layer).
pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    binio::write_u32(&mut buf, MODEL_VERSION)?;
    let dims: Vec<usize> = std::iter::once(model.spec.input_dim)
        .chain(model.spec.hidden_dims.iter().copied())
        .chain(std::iter::once(model.spec.embed_dim))
        .collect();
    binio::write_u32(&mut buf, dims.len() as u32)?;
    for d in dims {
        binio::write_u32(&mut buf, d as u32)?;
    }
    for layer in &model.layers {
        for &w in layer.weights.data() {
            binio::write_f32(&mut buf, w as f32)?;
        }
        for &b in &layer.bias {
            binio::write_f32(&mut buf, b as f32)?;
        }
    }
    binio::atomic_write(path, &buf)
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    binio::expect_magic(&mut r, MODEL_MAGIC)?;
    binio::expect_version(&mut r, MODEL_VERSION)?;
    let n_dims = binio::read_u32(&mut r)? as usize;
    if n_dims < 2 {
        return Err(Error::InvalidSpec("checkpoint needs >= 2 dims".into()));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(binio::read_u32(&mut r)? as usize);
    }
    let spec = MlpSpec::new(dims[0], dims[1..n_dims - 1].to_vec(), dims[n_dims - 1]);
    spec.validate()?;
    let mut layers = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let mut data = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            data.push(binio::read_f32(&mut r)? as f64);
        }
        let mut bias = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            bias.push(binio::read_f32(&mut r)? as f64);
        }
        layers.push(Layer {
            weights: Matrix::from_vec(fan_out, fan_in, data),
            bias,
        });
    }
    Ok(MlpModel { spec, layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(4, vec![8], 2)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = small_spec();
        let a = mlp_init(&spec, 5).unwrap();
        let b = mlp_init(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers[0].weights.rows(), 8);
        assert_eq!(a.layers[0].weights.cols(), 4);
        assert_eq!(a.layers[1].weights.rows(), 2);
        assert_eq!(a.layers[1].weights.cols(), 8);
        let c = mlp_init(&spec, 6).unwrap();
        assert_ne!(a, c);
        // Glorot bound
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.layers[0].weights.data().iter().all(|w| w.abs() <= limit));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_bad_spec() {
        assert!(matches!(
            mlp_init(&MlpSpec::new(4, vec![8], 1), 0),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            mlp_init(&MlpSpec::new(0, vec![], 4), 0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn forward_zero_model_gives_zero_embeddings() {
        let spec = small_spec();
        let mut model = mlp_init(&spec, 0).unwrap();
        for layer in &mut model.layers {
            layer.weights.data_mut().fill(0.0);
        }
        let x = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.5, 0.5, 0.5]]);
        let (e, _) = mlp_forward(&model, &x).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_single_linear_layer_is_matmul() {
        let spec = MlpSpec::new(3, vec![], 3);
        let mut model = mlp_init(&spec, 1).unwrap();
        let w = Matrix::from_rows(&[&[1.0, 2.0, 0.0], &[0.0, 1.0, 0.0], &[-1.0, 0.0, 2.0]]);
        model.layers[0].weights = w.clone();
        let x = Matrix::from_rows(&[&[1.0, 1.0, 1.0], &[2.0, 0.0, -1.0]]);
        let (e, _) = mlp_forward(&model, &x).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let expect = vec_math::dot(x.row(r), w.row(c));
                assert!((e.row(r)[c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_reeval() {
        let spec = MlpSpec::new(5, vec![7, 6], 3);
        let model = mlp_init(&spec, 42).unwrap();
        let mut rng = vec_math::seeded_rng(9);
        let x = Matrix::from_vec(
            4,
            5,
            (0..20).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let (e, _) = mlp_forward(&model, &x).unwrap();
        // independent per-sample evaluation
        for r in 0..4 {
            let mut a: Vec<f64> = x.row(r).to_vec();
            for (l, layer) in model.layers.iter().enumerate() {
                let mut z = vec![0.0; layer.weights.rows()];
                for (c, zc) in z.iter_mut().enumerate() {
                    let mut s = layer.bias[c];
                    for (k, &ak) in a.iter().enumerate() {
                        s += layer.weights.row(c)[k] * ak;
                    }
                    *zc = s;
                }
                if l + 1 != model.layers.len() {
                    for v in &mut z {
                        *v = v.max(0.0);
                    }
                }
                a = z;
            }
            for c in 0..3 {
                assert_eq!(e.row(r)[c], a[c], "row {r} col {c}");
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = mlp_init(&small_spec(), 3).unwrap();
        let x = Matrix::from_rows(&[&[0.1, -0.2, 0.3, 0.4]]);
        let (a, _) = mlp_forward(&model, &x).unwrap();
        let (b, _) = mlp_forward(&model, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let model = mlp_init(&small_spec(), 3).unwrap();
        let x = Matrix::from_rows(&[&[0.1, -0.2, 0.3]]);
        assert!(matches!(
            mlp_forward(&model, &x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_zero_grad_gives_zero_gradients() {
        let model = mlp_init(&small_spec(), 3).unwrap();
        let x = Matrix::from_rows(&[&[0.1, -0.2, 0.3, 0.4], &[1.0, 1.0, -1.0, 0.5]]);
        let (e, cache) = mlp_forward(&model, &x).unwrap();
        let zero = Matrix::zeros(e.rows(), e.cols());
        let grads = mlp_backward(&model, &cache, &zero).unwrap();
        assert!(grads.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(grads.biases.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_output_grad() {
        let model = mlp_init(&small_spec(), 3).unwrap();
        let x = Matrix::from_rows(&[&[0.1, -0.2, 0.3, 0.4], &[1.0, 1.0, -1.0, 0.5]]);
        let (e, cache) = mlp_forward(&model, &x).unwrap();
        let mut rng = vec_math::seeded_rng(5);
        let g1 = Matrix::from_vec(
            e.rows(),
            e.cols(),
            (0..e.rows() * e.cols()).map(|_| rng.random::<f64>() - 0.5).collect(),
        );
        let g2 = Matrix::from_vec(
            e.rows(),
            e.cols(),
            (0..e.rows() * e.cols()).map(|_| rng.random::<f64>() - 0.5).collect(),
        );
        let sum = Matrix::from_vec(
            e.rows(),
            e.cols(),
            g1.data().iter().zip(g2.data()).map(|(a, b)| a + b).collect(),
        );
        let ga = mlp_backward(&model, &cache, &g1).unwrap();
        let gb = mlp_backward(&model, &cache, &g2).unwrap();
        let gs = mlp_backward(&model, &cache, &sum).unwrap();
        for l in 0..model.layers.len() {
            for (i, &v) in gs.weights[l].data().iter().enumerate() {
                let expect = ga.weights[l].data()[i] + gb.weights[l].data()[i];
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of dLoss/dParams for loss = sum of embeddings.
    #[test]
    fn backward_matches_finite_differences() {
        let spec = MlpSpec::new(4, vec![5], 3);
        let model = mlp_init(&spec, 17).unwrap();
        let mut rng = vec_math::seeded_rng(18);
        let x = Matrix::from_vec(
            3,
            4,
            (0..12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let (e, cache) = mlp_forward(&model, &x).unwrap();
        let ones = Matrix::from_vec(e.rows(), e.cols(), vec![1.0; e.rows() * e.cols()]);
        let grads = mlp_backward(&model, &cache, &ones).unwrap();

        let loss = |m: &MlpModel| -> f64 {
            let (e, _) = mlp_forward(m, &x).unwrap();
            e.data().iter().sum()
        };
        let h = 1e-6;
        for l in 0..model.layers.len() {
            for idx in 0..model.layers[l].weights.data().len() {
                let mut mp = model.clone();
                mp.layers[l].weights.data_mut()[idx] += h;
                let up = loss(&mp);
                mp.layers[l].weights.data_mut()[idx] -= 2.0 * h;
                let dn = loss(&mp);
                let fd = (up - dn) / (2.0 * h);
                let an = grads.weights[l].data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "layer {l} w[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn backward_detects_stale_cache() {
        let mut model = mlp_init(&small_spec(), 3).unwrap();
        let x = Matrix::from_rows(&[&[0.1, -0.2, 0.3, 0.4]]);
        let (e, cache) = mlp_forward(&model, &x).unwrap();
        let mut state = SgdState::new(&model);
        let mut grads = GradientSet::zeros_like(&model);
        grads.weights[0].data_mut()[0] = 1.0;
        sgd_step(&mut model, &grads, &mut state, 0.1, 0.0, 0.0);
        let g = Matrix::zeros(e.rows(), e.cols());
        assert!(matches!(
            mlp_backward(&model, &cache, &g),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn arcface_closed_form_two_classes() {
        // Embedding aligned with its class weight, orthogonal to the other.
        let head = ArcHead {
            class_weights: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
            scale: 1.0,
            margin: 0.0,
        };
        let e = Matrix::from_rows(&[&[5.0, 0.0]]);
        let (loss, _, _) = arcface_loss(&e, &[0], &head).unwrap();
        let expect = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    /// Independent softmax cross-entropy on cosine logits.
    fn softmax_ce_oracle(e: &Matrix, labels: &[u32], head: &ArcHead) -> f64 {
        let mut total = 0.0;
        for i in 0..e.rows() {
            let logits: Vec<f64> = (0..head.num_classes())
                .map(|j| head.scale * vec_math::cosine(e.row(i), head.class_weights.row(j)).unwrap())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[labels[i] as usize];
        }
        total / e.rows() as f64
    }

    #[test]
    fn arcface_zero_margin_is_softmax_ce() {
        let mut rng = vec_math::seeded_rng(77);
        let head = ArcHead::init(6, 4, 12.0, 0.0, 123).unwrap();
        let e = Matrix::from_vec(
            5,
            4,
            (0..20).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        let labels = [0u32, 1, 5, 2, 3];
        let (loss, _, _) = arcface_loss(&e, &labels, &head).unwrap();
        let oracle = softmax_ce_oracle(&e, &labels, &head);
        assert!((loss - oracle).abs() < 1e-10, "{loss} vs {oracle}");
    }

    #[test]
    fn arcface_gradients_match_finite_differences() {
        let mut rng = vec_math::seeded_rng(31);
        for &margin in &[0.0, 0.3] {
            let head = ArcHead::init(5, 3, 16.0, margin, 55).unwrap();
            let e = Matrix::from_vec(
                4,
                3,
                (0..12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            );
            let labels = [0u32, 2, 4, 1];
            let (_, grad_e, grad_w) = arcface_loss(&e, &labels, &head).unwrap();
            let h = 1e-6;
            for idx in 0..e.data().len() {
                let mut ep = e.clone();
                ep.data_mut()[idx] += h;
                let (up, _, _) = arcface_loss(&ep, &labels, &head).unwrap();
                ep.data_mut()[idx] -= 2.0 * h;
                let (dn, _, _) = arcface_loss(&ep, &labels, &head).unwrap();
                let fd = (up - dn) / (2.0 * h);
                let an = grad_e.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-7);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "margin {margin} emb[{idx}]: {an} vs {fd}"
                );
            }
            for idx in 0..head.class_weights.data().len() {
                let mut hp = head.clone();
                hp.class_weights.data_mut()[idx] += h;
                let (up, _, _) = arcface_loss(&e, &labels, &hp).unwrap();
                hp.class_weights.data_mut()[idx] -= 2.0 * h;
                let (dn, _, _) = arcface_loss(&e, &labels, &hp).unwrap();
                let fd = (up - dn) / (2.0 * h);
                let an = grad_w.data()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-7);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "margin {margin} head[{idx}]: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn arcface_rejects_bad_labels() {
        let head = ArcHead::init(3, 2, 8.0, 0.1, 0).unwrap();
        let e = Matrix::from_rows(&[&[1.0, 0.0]]);
        assert!(matches!(
            arcface_loss(&e, &[3], &head),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn sgd_zero_lr_keeps_params() {
        let mut model = mlp_init(&small_spec(), 3).unwrap();
        let before = model.clone();
        let mut grads = GradientSet::zeros_like(&model);
        grads.weights[0].data_mut().fill(3.0);
        let mut state = SgdState::new(&model);
        sgd_step(&mut model, &grads, &mut state, 0.0, 0.9, 1e-4);
        assert_eq!(model, before);
    }

    #[test]
    fn sgd_plain_step_is_exact() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.5, 1.0, -1.0];
        let mut vel = vec![0.0; 3];
        sgd_update(&mut params, &grads, &mut vel, 0.1, 0.0, 0.0);
        assert_eq!(params, vec![1.0 - 0.05, -2.0 - 0.1, 0.5 + 0.1]);
    }

    #[test]
    fn sgd_momentum_two_steps_hand_recursion() {
        // v1 = g, delta1 = -lr*g; v2 = 0.9 g + g, delta2 = -1.9 lr g
        let lr = 0.1;
        let g = 2.0;
        let mut params = vec![1.0];
        let mut vel = vec![0.0];
        sgd_update(&mut params, &[g], &mut vel, lr, 0.9, 0.0);
        sgd_update(&mut params, &[g], &mut vel, lr, 0.9, 0.0);
        let expect = 1.0 - lr * (g + 1.9 * g);
        assert!((params[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfmd");
        let model = mlp_init(&MlpSpec::new(6, vec![5, 4], 3), 9).unwrap();
        save_model(&path, &model).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        for l in 0..model.layers.len() {
            for (a, b) in model.layers[l]
                .weights
                .data()
                .iter()
                .zip(loaded.layers[l].weights.data())
            {
                assert_eq!(*a as f32, *b as f32);
                assert!((a - b).abs() <= a.abs().max(1e-9) * 1e-6);
            }
        }
        // a second save of the loaded model is byte-identical
        let path2 = dir.path().join("model2.cfmd");
        save_model(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfmd");
        let model = mlp_init(&small_spec(), 9).unwrap();
        save_model(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.cfmd");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_model(&bad), Err(Error::BadMagic { .. })));

        let orig = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.cfmd");
        std::fs::write(&trunc, &orig[..orig.len() - 3]).unwrap();
        assert!(matches!(load_model(&trunc), Err(Error::TruncatedFile)));
    }
}
