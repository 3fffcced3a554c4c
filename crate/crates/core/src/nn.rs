//! MLP feature extractor, bias-free linear classifier, masked softmax
//! cross-entropy and plain SGD.
//!
//! Every dense layer is followed by a rectifier, including the last one, so
//! features are non-negative. Gradients are derived by hand for this fixed
//! architecture; there is no general autodiff.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::{dot, Matrix};
use crate::subspace::FeatureMask;

/// Dense layer storing weights as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(LabError::Dimension {
                context: "layer bias length",
                expected: weights.rows(),
                actual: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    /// He-normal weights, zero bias.
    fn he_init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("positive std");
        let data = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weights: Matrix::from_vec(out_dim, in_dim, data).expect("sized"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// `z = h(x; θ)`: a stack of rectified dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<DenseLayer>,
}

/// Activations retained by a forward pass. `activations[0]` is the input and
/// `activations[l + 1]` is the rectified output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn features(&self) -> &Matrix {
        self.activations.last().expect("trace holds the input at least")
    }
}

impl FeatureExtractor {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LabError::Config("feature extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(LabError::Dimension {
                    context: "consecutive layer shapes",
                    expected: pair[0].out_dim(),
                    actual: pair[1].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn init<R: Rng>(in_dim: usize, hidden: &[usize], feature_dim: usize, rng: &mut R) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let layers = dims.windows(2).map(|w| DenseLayer::he_init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Features for a batch, one row per sample.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = Self::layer_forward(layer, &h)?;
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Backpropagates `∂L/∂z` through the rectified layers.
    pub fn backward(&self, trace: &ForwardTrace, feature_grad: &Matrix) -> Result<Vec<LayerGrad>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(LabError::NoForwardContext);
        }
        if feature_grad.shape() != trace.features().shape() {
            return Err(LabError::Dimension {
                context: "feature gradient shape",
                expected: trace.features().cols(),
                actual: feature_grad.cols(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = feature_grad.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[l + 1];
            let input = &trace.activations[l];
            // rectifier derivative, taken as 0 at the kink
            for (g, &o) in upstream.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let weights = upstream.t_matmul(input)?;
            let mut bias = vec![0.0; layer.out_dim()];
            for row in upstream.row_iter() {
                for (b, &g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            let next = if l > 0 {
                Some(upstream.matmul(&layer.weights)?)
            } else {
                None
            };
            grads.push(LayerGrad { weights, bias });
            if let Some(next) = next {
                upstream = next;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(LabError::Dimension {
                context: "extractor input dimension",
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    fn layer_forward(layer: &DenseLayer, h: &Matrix) -> Result<Matrix> {
        let mut out = h.matmul_t(&layer.weights)?;
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
                *v = (*v + b).max(0.0);
            }
        }
        Ok(out)
    }
}

/// `f(z; W) = W·z` with one prototype row per class and no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Matrix,
}

impl LinearClassifier {
    pub fn new(weights: Matrix) -> Self {
        Self { weights }
    }

    /// Uniform `±1/√d` weights.
    pub fn init<R: Rng>(classes: usize, feature_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let data = (0..classes * feature_dim).map(|_| dist.sample(rng)).collect();
        Self {
            weights: Matrix::from_vec(classes, feature_dim, data).expect("sized"),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.weights.row(class)
    }
}

/// Learnable parameters `Φ = {θ, W}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub extractor: FeatureExtractor,
    pub classifier: LinearClassifier,
}

/// Layer sizes for [`ModelBundle::init`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl ModelBundle {
    pub fn new(extractor: FeatureExtractor, classifier: LinearClassifier) -> Result<Self> {
        if extractor.feature_dim() != classifier.feature_dim() {
            return Err(LabError::Dimension {
                context: "classifier feature dimension",
                expected: extractor.feature_dim(),
                actual: classifier.feature_dim(),
            });
        }
        Ok(Self { extractor, classifier })
    }

    pub fn init(shape: &ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = FeatureExtractor::init(shape.input_dim, &shape.hidden, shape.feature_dim, &mut rng);
        let classifier = LinearClassifier::init(shape.classes, shape.feature_dim, &mut rng);
        Self { extractor, classifier }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.class_count()
    }

    /// `θ ← θ − λ·g` for every parameter. Nothing is modified if any gradient
    /// tensor is non-finite.
    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(LabError::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        grads.check_congruent(self)?;
        grads.check_finite()?;
        if lr == 0.0 {
            return Ok(());
        }
        for (layer, g) in self.extractor.layers.iter_mut().zip(&grads.layers) {
            layer.weights.add_scaled(&g.weights, -lr)?;
            for (b, &gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        self.classifier.weights.add_scaled(&grads.classifier, -lr)?;
        Ok(())
    }

    /// Visits every parameter tensor as a flat slice, in the same order as
    /// [`GradientBundle::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (l, layer) in self.extractor.layers.iter_mut().enumerate() {
            out.push((format!("extractor.layer{l}.weights"), layer.weights.as_mut_slice()));
            out.push((format!("extractor.layer{l}.bias"), layer.bias.as_mut_slice()));
        }
        out.push(("classifier.weights".to_string(), self.classifier.weights.as_mut_slice()));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    pub classifier: Matrix,
}

impl GradientBundle {
    pub fn zeros_like(model: &ModelBundle) -> Self {
        Self {
            layers: model
                .extractor
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            classifier: Matrix::zeros(model.class_count(), model.feature_dim()),
        }
    }

    /// `self += factor · other`
    pub fn add_scaled(&mut self, other: &GradientBundle, factor: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(LabError::Dimension {
                context: "gradient layer count",
                expected: self.layers.len(),
                actual: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(&b.weights, factor)?;
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
        self.classifier.add_scaled(&other.classifier, factor)
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for l in &mut self.layers {
            l.weights.scale(factor);
            for b in &mut l.bias {
                *b *= factor;
            }
        }
        self.classifier.scale(factor);
        self
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (l, g) in self.layers.iter().enumerate() {
            out.push((format!("extractor.layer{l}.weights"), g.weights.as_slice()));
            out.push((format!("extractor.layer{l}.bias"), g.bias.as_slice()));
        }
        out.push(("classifier.weights".to_string(), self.classifier.as_slice()));
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &GradientBundle) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NonFinite { tensor: name });
            }
        }
        Ok(())
    }

    fn check_congruent(&self, model: &ModelBundle) -> Result<()> {
        let ok = self.layers.len() == model.extractor.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.extractor.layers)
                .all(|(g, l)| g.weights.shape() == l.weights.shape() && g.bias.len() == l.bias.len())
            && self.classifier.shape() == model.classifier.weights.shape();
        if ok {
            Ok(())
        } else {
            Err(LabError::Dimension {
                context: "gradient bundle shape",
                expected: model.extractor.layers.len(),
                actual: self.layers.len(),
            })
        }
    }
}

/// Output of [`masked_cross_entropy`].
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `∂L/∂W`, full `C_total × d`; rows outside the class set are zero.
    pub classifier_grad: Matrix,
    /// `∂L/∂z`, `n × d`, already divided by the batch size.
    pub feature_grad: Matrix,
    /// Softmax over `class_set`, one row per sample, columns in `class_set` order.
    pub probs: Matrix,
}

/// Mean softmax cross-entropy with logits `(w_c ⊙ m) · (z ⊙ m)` restricted
/// to `class_set`.
pub fn masked_cross_entropy(
    features: &Matrix,
    labels: &[usize],
    classifier: &LinearClassifier,
    mask: &FeatureMask,
    class_set: &[usize],
) -> Result<CrossEntropy> {
    let n = features.rows();
    let d = features.cols();
    if n == 0 || labels.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(LabError::Dimension {
            context: "label count",
            expected: n,
            actual: labels.len(),
        });
    }
    if d != classifier.feature_dim() {
        return Err(LabError::Dimension {
            context: "feature dimension",
            expected: classifier.feature_dim(),
            actual: d,
        });
    }
    if mask.dim() != d {
        return Err(LabError::Dimension {
            context: "mask length",
            expected: d,
            actual: mask.dim(),
        });
    }
    if class_set.is_empty() {
        return Err(LabError::Empty("class set"));
    }
    if let Some(&c) = class_set.iter().find(|&&c| c >= classifier.class_count()) {
        return Err(LabError::InvalidLabel { label: c });
    }
    let targets = labels
        .iter()
        .map(|&y| {
            class_set
                .iter()
                .position(|&c| c == y)
                .ok_or(LabError::InvalidLabel { label: y })
        })
        .collect::<Result<Vec<_>>>()?;

    let m = mask.weights();
    let prototypes: Vec<Vec<f64>> = class_set
        .iter()
        .map(|&c| mask.apply(classifier.prototype(c)).expect("dims checked"))
        .collect();

    let k = class_set.len();
    let inv_n = 1.0 / n as f64;
    let mut probs = Matrix::zeros(n, k);
    let mut feature_grad = Matrix::zeros(n, d);
    let mut classifier_grad = Matrix::zeros(classifier.class_count(), d);
    let mut loss = 0.0;
    let mut zm = vec![0.0; d];

    for s in 0..n {
        for ((o, &z), &w) in zm.iter_mut().zip(features.row(s)).zip(&m) {
            *o = z * w;
        }
        let logits: Vec<f64> = prototypes.iter().map(|w| dot(w, &zm)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - logits[targets[s]];

        let p_row = probs.row_mut(s);
        for (p, e) in p_row.iter_mut().zip(&exps) {
            *p = e / sum;
        }
        // coefficient (p_c − 1[c = y]) / n
        let coeffs: Vec<f64> = (0..k)
            .map(|j| (p_row[j] - if j == targets[s] { 1.0 } else { 0.0 }) * inv_n)
            .collect();

        let fg = feature_grad.row_mut(s);
        for (j, &coef) in coeffs.iter().enumerate() {
            for (g, &w) in fg.iter_mut().zip(&prototypes[j]) {
                *g += coef * w;
            }
        }
        for (j, &c) in class_set.iter().enumerate() {
            let coef = coeffs[j];
            for (g, &z) in classifier_grad.row_mut(c).iter_mut().zip(&zm) {
                *g += coef * z;
            }
        }
    }

    Ok(CrossEntropy {
        loss: loss * inv_n,
        classifier_grad,
        feature_grad,
        probs,
    })
}

/// Loss, gradient and probabilities for one masked batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: GradientBundle,
    pub probs: Matrix,
    pub features: Matrix,
    pub feature_grad: Matrix,
}

/// Holds the retained forward pass between a loss evaluation and its
/// backward sweep.
#[derive(Debug, Default)]
pub struct LossGraph {
    trace: Option<ForwardTrace>,
    ce: Option<CrossEntropy>,
}

impl LossGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward pass plus masked cross-entropy; returns the loss.
    pub fn forward(
        &mut self,
        model: &ModelBundle,
        x: &Matrix,
        labels: &[usize],
        mask: &FeatureMask,
        class_set: &[usize],
    ) -> Result<f64> {
        let trace = model.extractor.forward_traced(x)?;
        let ce = masked_cross_entropy(trace.features(), labels, &model.classifier, mask, class_set)?;
        let loss = ce.loss;
        self.trace = Some(trace);
        self.ce = Some(ce);
        Ok(loss)
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.trace.as_ref().map(ForwardTrace::features)
    }

    pub fn cross_entropy(&self) -> Option<&CrossEntropy> {
        self.ce.as_ref()
    }

    /// Analytic gradients of the last forward loss with respect to every parameter.
    pub fn backward(&self, model: &ModelBundle) -> Result<GradientBundle> {
        let (trace, ce) = match (&self.trace, &self.ce) {
            (Some(t), Some(c)) => (t, c),
            _ => return Err(LabError::NoForwardContext),
        };
        let layers = model.extractor.backward(trace, &ce.feature_grad)?;
        Ok(GradientBundle {
            layers,
            classifier: ce.classifier_grad.clone(),
        })
    }

    /// Consumes the retained pass, producing a [`BatchLoss`].
    pub fn finish(self, model: &ModelBundle) -> Result<BatchLoss> {
        let grads = self.backward(model)?;
        let trace = self.trace.expect("checked by backward");
        let ce = self.ce.expect("checked by backward");
        Ok(BatchLoss {
            loss: ce.loss,
            grads,
            probs: ce.probs,
            features: trace.activations.into_iter().last().expect("non-empty"),
            feature_grad: ce.feature_grad,
        })
    }
}

/// Forward, masked cross-entropy and backward in one call.
pub fn batch_loss(
    model: &ModelBundle,
    x: &Matrix,
    labels: &[usize],
    mask: &FeatureMask,
    class_set: &[usize],
) -> Result<BatchLoss> {
    let mut graph = LossGraph::new();
    graph.forward(model, x, labels, mask, class_set)?;
    graph.finish(model)
}
