//! Class-aware denoising: a small convolutional classifier assigns a noisy
//! image to a semantic class, and a registry dispatches it to that class's
//! specialized denoiser (falling back to a class-agnostic model).
//!
//! The classifier is a configurable conv trunk (3x3 convolutions, ReLU,
//! optional 2x downsampling per stage) followed by global average pooling
//! and a fully connected head with softmax. Dropout (inverted scaling)
//! regularizes the head during training only, so inference is
//! deterministic. An oracle mode bypasses the classifier with a known
//! label, which makes routing itself testable: with a fixed label, routed
//! denoising is bit-identical to calling the dispatched model directly.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::container::{self, Section};
use crate::error::{Error, Result};
use crate::eval::{denoise_image, psnr};
use crate::image_io::{to_net_range, GrayImage};
use crate::net::Network;
use crate::noise::{corrupt, fnv1a64, NoiseSpec, SeededRng};
use crate::tensor::{
    conv2d_backward, conv2d_forward, gemm_nn, gemm_nt, gemm_tn, relu_backward, relu_forward,
    ConvParams, Padding, Tensor,
};
use crate::train::{adam_flat, AdamConfig, AdamState, LossRecord};

/// Marks classifier files.
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"DCLS";

/// Registry key for the class-agnostic fallback denoiser.
pub const AGNOSTIC: &str = "agnostic";

/// A class a noisy image can be routed by.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: usize,
    pub name: String,
}

impl ClassLabel {
    pub fn new(index: usize, name: impl Into<String>) -> ClassLabel {
        ClassLabel {
            index,
            name: name.into(),
        }
    }
}

/// The five canonical semantic classes.
pub fn canonical_labels() -> Vec<ClassLabel> {
    ["face", "pet", "flower", "living-room", "street"]
        .iter()
        .enumerate()
        .map(|(i, n)| ClassLabel::new(i, *n))
        .collect()
}

/// One trunk stage: 3x3 convolution to `channels`, ReLU, and optionally a
/// 2x spatial downsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkStage {
    pub channels: usize,
    pub downsample: bool,
}

/// Classifier architecture and training-time regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Conv trunk stages, applied in order to the 1-channel input.
    pub trunk: Vec<TrunkStage>,
    /// Fully connected layer widths after global average pooling; the last
    /// entry must equal the class count.
    pub fc: Vec<usize>,
    /// Dropout keep probability on hidden fc activations (train only).
    pub keep_prob: f64,
    /// Images are bilinearly resized to this square side before the trunk.
    pub input_side: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::desk(5)
    }
}

impl ClassifierConfig {
    /// Desk-scale architecture for `n_classes` classes: a three-stage
    /// downsampling trunk and one hidden fc layer.
    pub fn desk(n_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            trunk: vec![
                TrunkStage {
                    channels: 8,
                    downsample: true,
                },
                TrunkStage {
                    channels: 16,
                    downsample: true,
                },
                TrunkStage {
                    channels: 32,
                    downsample: true,
                },
            ],
            fc: vec![64, n_classes],
            keep_prob: 0.5,
            input_side: 128,
            seed: 0,
        }
    }

    /// The full-scale head configuration: fc widths 1024, 1024, 1024,
    /// `n_classes`. Reference regime; not sized for desk training.
    pub fn reference(n_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            fc: vec![1024, 1024, 1024, n_classes],
            ..ClassifierConfig::desk(n_classes)
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(Error::Config("classifier trunk must have a stage".into()));
        }
        if self.trunk.iter().any(|s| s.channels == 0) {
            return Err(Error::Config("trunk channels must be >= 1".into()));
        }
        if self.fc.is_empty() || self.fc.iter().any(|&d| d == 0) {
            return Err(Error::Config("fc sizes must be nonempty and >= 1".into()));
        }
        if *self.fc.last().unwrap() != n_classes {
            return Err(Error::Config(format!(
                "last fc size {} must equal the class count {n_classes}",
                self.fc.last().unwrap()
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob {} outside (0, 1]",
                self.keep_prob
            )));
        }
        if self.input_side < 8 {
            return Err(Error::Config(format!(
                "input side {} too small",
                self.input_side
            )));
        }
        Ok(())
    }
}

/// Total classifier parameter count for a configuration.
pub fn classifier_param_count(cfg: &ClassifierConfig) -> usize {
    let mut c_in = 1;
    let mut total = 0;
    for s in &cfg.trunk {
        total += 9 * c_in * s.channels + s.channels;
        c_in = s.channels;
    }
    let mut d = c_in;
    for &f in &cfg.fc {
        total += d * f + f;
        d = f;
    }
    total
}

/// One dense layer: weights stored `in x out` row-major plus a bias.
#[derive(Debug, Clone, PartialEq)]
struct DenseParams {
    w: Vec<f64>,
    bias: Vec<f64>,
    in_dim: usize,
    out_dim: usize,
}

impl DenseParams {
    fn zeros(in_dim: usize, out_dim: usize) -> DenseParams {
        DenseParams {
            w: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// `out (b x out_dim) = x (b x in_dim) * w + bias`.
    fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut z = vec![0.0; batch * self.out_dim];
        gemm_nn(batch, self.in_dim, self.out_dim, x, &self.w, 0.0, &mut z);
        for row in z.chunks_exact_mut(self.out_dim) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }

    /// Gradients for inputs, weights, and bias given upstream `grad_out`.
    fn backward(&self, x: &[f64], grad_out: &[f64], batch: usize) -> (Vec<f64>, DenseParams) {
        let mut grads = DenseParams::zeros(self.in_dim, self.out_dim);
        gemm_tn(
            self.in_dim,
            batch,
            self.out_dim,
            x,
            grad_out,
            0.0,
            &mut grads.w,
        );
        for row in grad_out.chunks_exact(self.out_dim) {
            for (b, g) in grads.bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut grad_x = vec![0.0; batch * self.in_dim];
        gemm_nt(
            batch,
            self.out_dim,
            self.in_dim,
            grad_out,
            &self.w,
            0.0,
            &mut grad_x,
        );
        (grad_x, grads)
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    config: ClassifierConfig,
    classes: Vec<ClassLabel>,
    noise_spec: NoiseSpec,
    trained_steps: u64,
    final_loss: Option<f64>,
}

/// Trained (or initialized) image classifier bound to a class list and the
/// noise statistics it was trained under.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    classes: Vec<ClassLabel>,
    spec: NoiseSpec,
    trunk: Vec<ConvParams>,
    fc: Vec<DenseParams>,
    trained_steps: u64,
    final_loss: Option<f64>,
}

/// Per-layer activations kept for the backward pass.
struct ForwardCache {
    trunk_inputs: Vec<Tensor>,
    trunk_pre: Vec<Tensor>,
    feat: Tensor,
    fc_inputs: Vec<Vec<f64>>,
    fc_pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    batch: usize,
}

impl ForwardCache {
    fn logits(&self) -> &[f64] {
        self.fc_pre.last().expect("at least one fc layer")
    }
}

/// Gradients mirroring the classifier's parameters.
struct ClassifierGrads {
    trunk: Vec<ConvParams>,
    fc: Vec<DenseParams>,
}

/// Keeps rows `0, 2, 4, ...` in both spatial dimensions (the stride-2
/// reading of a stage's convolution).
fn decimate2(t: &Tensor) -> Tensor {
    let (n, h, w, c) = t.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(n, oh, ow, c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    *out.at_mut(b, y, x, ch) = t.at(b, 2 * y, 2 * x, ch);
                }
            }
        }
    }
    out
}

/// Adjoint of [`decimate2`]: scatters gradients back to the even
/// positions of an `h x w` tensor.
fn decimate2_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, oh, ow, c) = grad_out.shape();
    let mut out = Tensor::zeros(n, h, w, c);
    for b in 0..n {
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    *out.at_mut(b, 2 * y, 2 * x, ch) = grad_out.at(b, y, x, ch);
                }
            }
        }
    }
    out
}

/// Global average pooling to a `batch x channels` row-major matrix.
fn global_avg_pool(t: &Tensor) -> Vec<f64> {
    let (n, h, w, c) = t.shape();
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[b * c + ch] += t.at(b, y, x, ch);
                }
            }
        }
    }
    let scale = 1.0 / (h * w) as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}

fn global_avg_pool_backward(grad: &[f64], n: usize, h: usize, w: usize, c: usize) -> Tensor {
    let mut out = Tensor::zeros(n, h, w, c);
    let scale = 1.0 / (h * w) as f64;
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    *out.at_mut(b, y, x, ch) = grad[b * c + ch] * scale;
                }
            }
        }
    }
    out
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean categorical cross-entropy over a batch of logit rows, with the
/// gradient w.r.t. the logits (`(softmax − onehot) / batch`).
fn cross_entropy(logits: &[f64], labels: &[usize], n_classes: usize) -> (f64, Vec<f64>) {
    let batch = labels.len();
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * n_classes..(b + 1) * n_classes];
        let p = softmax(row);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        let drow = &mut dlogits[b * n_classes..(b + 1) * n_classes];
        for (d, &pi) in drow.iter_mut().zip(&p) {
            *d = pi / batch as f64;
        }
        drow[y] -= 1.0 / batch as f64;
    }
    (loss / batch as f64, dlogits)
}

/// Bilinearly resamples an image to `side x side` (pixel-center
/// alignment; linear images resample exactly, constants stay constant).
pub fn bilinear_resize(img: &GrayImage, side: usize) -> Result<GrayImage> {
    if side == 0 {
        return Err(Error::InvalidArg("resize target must be >= 1".into()));
    }
    let (h, w) = (img.height(), img.width());
    let scale_y = h as f64 / side as f64;
    let scale_x = w as f64 / side as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..side {
            let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let p = |yy: usize, xx: usize| img.pixels()[yy * w + xx];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    GrayImage::new(side, side, out)
}

impl Classifier {
    /// He-initialized classifier (weights drawn in serialization order
    /// from the config seed; biases zero).
    pub fn init(
        config: ClassifierConfig,
        classes: Vec<ClassLabel>,
        spec: NoiseSpec,
    ) -> Result<Classifier> {
        validate_classes(&classes)?;
        config.validate(classes.len())?;
        spec.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let mut trunk = Vec::with_capacity(config.trunk.len());
        let mut c_in = 1;
        for stage in &config.trunk {
            let mut p = ConvParams::zeros(c_in, stage.channels);
            let sd = (2.0 / (9.0 * c_in as f64)).sqrt();
            for v in p.weights.data_mut() {
                *v = sd * rng.normal();
            }
            trunk.push(p);
            c_in = stage.channels;
        }
        let mut fc = Vec::with_capacity(config.fc.len());
        let mut d = c_in;
        for &f in &config.fc {
            let mut p = DenseParams::zeros(d, f);
            let sd = (2.0 / d as f64).sqrt();
            for v in &mut p.w {
                *v = sd * rng.normal();
            }
            fc.push(p);
            d = f;
        }
        Ok(Classifier {
            config,
            classes,
            spec,
            trunk,
            fc,
            trained_steps: 0,
            final_loss: None,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn param_count(&self) -> usize {
        classifier_param_count(&self.config)
    }

    /// Parameters in serialization order: per trunk stage weights then
    /// bias, then per fc layer weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for p in &self.trunk {
            flat.extend_from_slice(p.weights.data());
            flat.extend_from_slice(&p.bias);
        }
        for p in &self.fc {
            flat.extend_from_slice(&p.w);
            flat.extend_from_slice(&p.bias);
        }
        flat
    }

    fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ModelFormat(format!(
                "classifier payload holds {} values, formula demands {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for p in &mut self.trunk {
            let nw = p.weights.len();
            p.weights.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = p.bias.len();
            p.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        for p in &mut self.fc {
            let nw = p.w.len();
            p.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = p.bias.len();
            p.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        debug_assert_eq!(off, flat.len());
        Ok(())
    }

    /// Runs the trunk and head on a net-range batch. `dropout_rng`
    /// enables inverted dropout on hidden fc activations (training only);
    /// mask draws happen layer by layer in activation order.
    fn forward_batch(
        &self,
        x0: &Tensor,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<ForwardCache> {
        let batch = x0.batch();
        let mut trunk_inputs = Vec::with_capacity(self.trunk.len());
        let mut trunk_pre = Vec::with_capacity(self.trunk.len());
        let mut cur = x0.clone();
        for (stage, params) in self.config.trunk.iter().zip(&self.trunk) {
            let z = conv2d_forward(&cur, params, Padding::Same)?;
            let a = relu_forward(&z);
            trunk_inputs.push(cur);
            trunk_pre.push(z);
            cur = if stage.downsample { decimate2(&a) } else { a };
        }
        let feat = cur;
        let gap = global_avg_pool(&feat);
        let mut fc_inputs = Vec::with_capacity(self.fc.len());
        let mut fc_pre = Vec::with_capacity(self.fc.len());
        let mut masks = Vec::with_capacity(self.fc.len().saturating_sub(1));
        let mut x = gap;
        let keep = self.config.keep_prob;
        for (j, layer) in self.fc.iter().enumerate() {
            let z = layer.forward(&x, batch);
            fc_inputs.push(x);
            let last = j + 1 == self.fc.len();
            if last {
                fc_pre.push(z);
                break;
            }
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            fc_pre.push(z);
            let mask = match (&mut dropout_rng, keep < 1.0) {
                (Some(rng), true) => {
                    let m: Vec<f64> = (0..a.len())
                        .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    for (v, mv) in a.iter_mut().zip(&m) {
                        *v *= mv;
                    }
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            x = a;
        }
        Ok(ForwardCache {
            trunk_inputs,
            trunk_pre,
            feat,
            fc_inputs,
            fc_pre,
            masks,
            batch,
        })
    }

    /// Backpropagates `dlogits` through the head and trunk.
    fn backward_batch(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<ClassifierGrads> {
        let batch = cache.batch;
        let mut fc_grads: Vec<DenseParams> = self
            .fc
            .iter()
            .map(|p| DenseParams::zeros(p.in_dim, p.out_dim))
            .collect();
        let mut g = dlogits.to_vec();
        for j in (0..self.fc.len()).rev() {
            let (gx, gp) = self.fc[j].backward(&cache.fc_inputs[j], &g, batch);
            fc_grads[j] = gp;
            if j == 0 {
                g = gx;
                break;
            }
            // Through the dropout mask and ReLU of the previous hidden
            // layer.
            let mut gh = gx;
            if let Some(mask) = &cache.masks[j - 1] {
                for (v, m) in gh.iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            let pre = &cache.fc_pre[j - 1];
            for (v, &z) in gh.iter_mut().zip(pre) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
            g = gh;
        }
        let (n, h, w, c) = cache.feat.shape();
        let mut grad = global_avg_pool_backward(&g, n, h, w, c);
        let mut trunk_grads: Vec<ConvParams> = self
            .trunk
            .iter()
            .map(|p| ConvParams::zeros(p.c_in(), p.c_out()))
            .collect();
        for i in (0..self.trunk.len()).rev() {
            let pre = &cache.trunk_pre[i];
            let g_act = if self.config.trunk[i].downsample {
                decimate2_backward(&grad, pre.height(), pre.width())
            } else {
                grad
            };
            let g_pre = relu_backward(pre, &g_act)?;
            let (g_in, g_par) =
                conv2d_backward(&cache.trunk_inputs[i], &self.trunk[i], &g_pre, Padding::Same)?;
            trunk_grads[i] = g_par;
            grad = g_in;
        }
        Ok(ClassifierGrads {
            trunk: trunk_grads,
            fc: fc_grads,
        })
    }

    /// Classifies a (typically noisy) image: bilinear resize to the input
    /// side, trunk + head forward, softmax. Returns the argmax label
    /// (lowest index on ties) and the full probability vector.
    pub fn classify(&self, img: &GrayImage) -> Result<(ClassLabel, Vec<f64>)> {
        if self.trained_steps == 0 {
            return Err(Error::InvalidArg(
                "classifier has not been trained; refusing to route by its output".into(),
            ));
        }
        let resized = bilinear_resize(img, self.config.input_side)?;
        let x = to_net_range(&resized);
        let cache = self.forward_batch(&x, None)?;
        let probs = softmax(cache.logits());
        let idx = argmax_lowest(&probs);
        Ok((self.classes[idx].clone(), probs))
    }

    /// Writes the classifier as a single-section `DCLS` container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let flat = self.flatten();
        if flat.len() != self.param_count() {
            return Err(Error::ModelFormat(format!(
                "refusing to save: {} parameters present, formula demands {}",
                flat.len(),
                self.param_count()
            )));
        }
        let meta = serde_json::to_string(&ClassifierMeta {
            config: self.config.clone(),
            classes: self.classes.clone(),
            noise_spec: self.spec,
            trained_steps: self.trained_steps,
            final_loss: self.final_loss,
        })?;
        container::write_sections(
            path.as_ref(),
            &[Section::new(CLASSIFIER_MAGIC, meta, flat)],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Classifier> {
        let sections = container::read_sections(path.as_ref(), CLASSIFIER_MAGIC)?;
        let section = sections
            .into_iter()
            .find(|s| s.magic == CLASSIFIER_MAGIC)
            .ok_or_else(|| Error::ModelFormat("no classifier section".into()))?;
        let meta: ClassifierMeta = serde_json::from_str(&section.metadata)?;
        let mut classifier = Classifier::init(meta.config, meta.classes, meta.noise_spec)?;
        classifier.assign_from_flat(&section.payload)?;
        classifier.trained_steps = meta.trained_steps;
        classifier.final_loss = meta.final_loss;
        Ok(classifier)
    }
}

fn validate_classes(classes: &[ClassLabel]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Config("no classes given".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for (i, c) in classes.iter().enumerate() {
        if c.index != i {
            return Err(Error::Config(format!(
                "class {:?} has index {} but sits at position {i}",
                c.name, c.index
            )));
        }
        if !names.insert(c.name.as_str()) {
            return Err(Error::Config(format!("duplicate class name {:?}", c.name)));
        }
    }
    Ok(())
}

/// Classifier training schedule. ADAM constants default to the denoiser
/// trainer's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 400,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            log_every: 10,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "steps, batch_size, and log_every must be >= 1".into(),
            ));
        }
        let a = &self.adam;
        if a.alpha <= 0.0 || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2)
            || a.eps <= 0.0
        {
            return Err(Error::Config(format!("bad ADAM constants {a:?}")));
        }
        Ok(())
    }
}

/// A trained classifier plus its loss trajectory.
#[derive(Debug)]
pub struct ClassifierOutcome {
    pub classifier: Classifier,
    pub loss_log: Vec<LossRecord>,
}

/// Trains a classifier on `(image, label index)` pairs: per step, sample a
/// batch, corrupt each image with `spec`, resize, and take one ADAM step
/// on the softmax cross-entropy (dropout active on hidden fc layers).
///
/// Step randomness comes from `tcfg.seed` derived per step; within a step
/// the draw order is: per slot (corpus index, then noise values), then the
/// dropout masks during the forward pass.
pub fn train_classifier(
    samples: &[(GrayImage, usize)],
    classes: &[ClassLabel],
    cfg: &ClassifierConfig,
    tcfg: &ClassifierTrainConfig,
    spec: &NoiseSpec,
) -> Result<ClassifierOutcome> {
    validate_classes(classes)?;
    cfg.validate(classes.len())?;
    tcfg.validate()?;
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArg("empty labeled corpus".into()));
    }
    let n = classes.len();
    if n == 1 {
        log::warn!("single-class corpus: the classifier will be degenerate");
    }
    let mut counts = vec![0usize; n];
    for (img, label) in samples {
        if *label >= n {
            return Err(Error::InvalidArg(format!(
                "label {label} on {} outside 0..{n}",
                img.id()
            )));
        }
        counts[*label] += 1;
    }
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::InvalidArg(format!(
                "class {:?} has no training examples",
                classes[i].name
            )));
        }
    }
    let mut classifier = Classifier::init(cfg.clone(), classes.to_vec(), *spec)?;
    let mut state = AdamState::new(classifier.param_count());
    let root = SeededRng::new(tcfg.seed);
    let started = std::time::Instant::now();
    let side = cfg.input_side;
    let mut loss_log = Vec::new();
    log::info!(
        "training classifier: {} params, {} classes, {} samples, {} steps",
        classifier.param_count(),
        n,
        samples.len(),
        tcfg.steps
    );
    for step in 1..=tcfg.steps {
        let mut rng = root.derive(step);
        let mut x0 = Tensor::zeros(tcfg.batch_size, side, side, 1);
        let mut labels = Vec::with_capacity(tcfg.batch_size);
        for slot in 0..tcfg.batch_size {
            let (img, label) = &samples[rng.index(samples.len())];
            let noisy = corrupt(img, spec, &mut rng)?;
            let resized = bilinear_resize(&noisy, side)?;
            for (dst, &v) in x0.elem_mut(slot).iter_mut().zip(resized.pixels()) {
                *dst = v - 0.5;
            }
            labels.push(*label);
        }
        let dropout = if cfg.keep_prob < 1.0 { Some(&mut rng) } else { None };
        let cache = classifier.forward_batch(&x0, dropout)?;
        let (loss, dlogits) = cross_entropy(cache.logits(), &labels, n);
        let grads = classifier.backward_batch(&cache, &dlogits)?;
        check_finite_grads(&grads)?;
        let mut flat = classifier.flatten();
        let gflat = flatten_grads(&grads);
        adam_flat(&mut flat, &gflat, &mut state, &tcfg.adam)?;
        classifier.assign_from_flat(&flat)?;
        classifier.final_loss = Some(loss);
        if step % tcfg.log_every == 0 || step == tcfg.steps {
            loss_log.push(LossRecord {
                step,
                loss,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        if step % 100 == 0 {
            log::info!("classifier step {step}/{}: loss {loss:.4}", tcfg.steps);
        }
    }
    classifier.trained_steps = tcfg.steps;
    Ok(ClassifierOutcome {
        classifier,
        loss_log,
    })
}

fn flatten_grads(grads: &ClassifierGrads) -> Vec<f64> {
    let mut flat = Vec::new();
    for p in &grads.trunk {
        flat.extend_from_slice(p.weights.data());
        flat.extend_from_slice(&p.bias);
    }
    for p in &grads.fc {
        flat.extend_from_slice(&p.w);
        flat.extend_from_slice(&p.bias);
    }
    flat
}

fn check_finite_grads(grads: &ClassifierGrads) -> Result<()> {
    for (i, p) in grads.trunk.iter().enumerate() {
        if p.weights.data().iter().chain(&p.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("trunk{}", i + 1)));
        }
    }
    for (i, p) in grads.fc.iter().enumerate() {
        if p.w.iter().chain(&p.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("fc{}", i + 1)));
        }
    }
    Ok(())
}

/// One registry row: a class (or [`AGNOSTIC`]) and noise spec mapped to a
/// model file. Relative paths resolve against the registry file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub class: String,
    pub noise: NoiseSpec,
    pub model: PathBuf,
}

/// Maps (class, noise spec) to denoiser models, with a mandatory
/// class-agnostic fallback per noise kind and lazy single-load model
/// caching.
#[derive(Debug)]
pub struct DenoiserRegistry {
    entries: Vec<RegistryEntry>,
    base: PathBuf,
    cache: Mutex<HashMap<PathBuf, Arc<Network>>>,
}

impl DenoiserRegistry {
    /// Builds a registry from entries; `base` anchors relative model
    /// paths. Every noise spec that appears must also have an
    /// [`AGNOSTIC`] entry.
    pub fn from_entries(entries: Vec<RegistryEntry>, base: impl Into<PathBuf>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Registry("empty registry".into()));
        }
        for e in &entries {
            e.noise.validate()?;
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.class == b.class && a.noise == b.noise {
                    return Err(Error::Registry(format!(
                        "duplicate entry for class {:?} with {}",
                        a.class,
                        a.noise.describe()
                    )));
                }
            }
        }
        for e in &entries {
            if !entries
                .iter()
                .any(|f| f.class == AGNOSTIC && f.noise == e.noise)
            {
                return Err(Error::Registry(format!(
                    "no {AGNOSTIC:?} fallback registered for {}",
                    e.noise.describe()
                )));
            }
        }
        Ok(DenoiserRegistry {
            entries,
            base: base.into(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Reads a registry JSON file: an array of
    /// `{"class": ..., "noise": {...}, "model": "path"}` objects.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<RegistryEntry> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_entries(entries, base)
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("registry entries serialize") + "\n"
    }

    /// Resolves a class and noise spec to a loaded model, falling back to
    /// the agnostic entry (with a warning) when the class has no model for
    /// that spec. Returns the model and the registry class actually used.
    pub fn lookup(&self, class: &str, spec: &NoiseSpec) -> Result<(Arc<Network>, String)> {
        let exact = self
            .entries
            .iter()
            .find(|e| e.class == class && e.noise == *spec);
        let entry = match exact {
            Some(e) => e,
            None => {
                let fallback = self
                    .entries
                    .iter()
                    .find(|e| e.class == AGNOSTIC && e.noise == *spec)
                    .ok_or_else(|| {
                        Error::Registry(format!(
                            "no model registered for {} (class {class:?}) and no {AGNOSTIC:?} fallback",
                            spec.describe()
                        ))
                    })?;
                if class != AGNOSTIC {
                    log::warn!(
                        "no {class:?} model for {}; routing to the {AGNOSTIC:?} denoiser",
                        spec.describe()
                    );
                }
                fallback
            }
        };
        Ok((self.load_cached(entry, spec)?, entry.class.clone()))
    }

    fn load_cached(&self, entry: &RegistryEntry, spec: &NoiseSpec) -> Result<Arc<Network>> {
        let path = if entry.model.is_absolute() {
            entry.model.clone()
        } else {
            self.base.join(&entry.model)
        };
        let mut cache = self.cache.lock().expect("registry cache lock");
        if let Some(net) = cache.get(&path) {
            return Ok(Arc::clone(net));
        }
        let (network, model_spec, _) = Network::load(&path)?;
        if model_spec != *spec {
            return Err(Error::Registry(format!(
                "registry maps {} to {}, but that file was trained for {}",
                spec.describe(),
                path.display(),
                model_spec.describe()
            )));
        }
        let net = Arc::new(network);
        cache.insert(path, Arc::clone(&net));
        Ok(net)
    }
}

/// How [`route_denoise`] picks the class.
pub enum RouteMode<'a> {
    /// Classify the noisy input first.
    Classifier(&'a Classifier),
    /// Trust a known label (the upper-bound comparison mode).
    Oracle(&'a ClassLabel),
}

/// What routing produced: the denoised image, the label that drove the
/// dispatch, the registry class actually used (may be [`AGNOSTIC`] after
/// fallback), and the probability vector when a classifier decided.
#[derive(Debug, Clone)]
pub struct RouteOutcome {
    pub image: GrayImage,
    pub label: ClassLabel,
    pub model_class: String,
    pub probabilities: Option<Vec<f64>>,
}

/// Two-stage denoising: pick a class (classifier or oracle), look up that
/// class's model for `spec`, and denoise. Pure dispatch: with a fixed
/// label this equals calling the dispatched model directly, bit for bit.
pub fn route_denoise(
    img: &GrayImage,
    registry: &DenoiserRegistry,
    mode: RouteMode,
    spec: &NoiseSpec,
    margin: usize,
) -> Result<RouteOutcome> {
    let (label, probabilities) = match mode {
        RouteMode::Oracle(label) => (label.clone(), None),
        RouteMode::Classifier(c) => {
            if c.spec() != spec {
                log::warn!(
                    "classifier was trained for {} but the input is {}",
                    c.spec().describe(),
                    spec.describe()
                );
            }
            let (label, probs) = c.classify(img)?;
            (label, Some(probs))
        }
    };
    let (net, model_class) = registry.lookup(&label.name, spec)?;
    let image = denoise_image(&net, img, margin)?;
    Ok(RouteOutcome {
        image,
        label,
        model_class,
        probabilities,
    })
}

/// One paired oracle-vs-classifier measurement on a shared noise
/// realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRouteRecord {
    pub image: String,
    pub realization: usize,
    pub oracle_class: String,
    pub predicted_class: String,
    pub psnr_oracle: f64,
    pub psnr_predicted: f64,
}

/// Scores oracle routing against classifier routing on identical noise
/// realizations, so PSNR differences are attributable to routing alone.
/// Noise streams are keyed by `(seed, image id, realization)` exactly like
/// the evaluation protocol.
pub fn paired_route_eval(
    samples: &[(GrayImage, usize)],
    classes: &[ClassLabel],
    registry: &DenoiserRegistry,
    classifier: &Classifier,
    spec: &NoiseSpec,
    realizations: usize,
    seed: u64,
    margin: usize,
) -> Result<Vec<PairedRouteRecord>> {
    validate_classes(classes)?;
    if realizations == 0 {
        return Err(Error::InvalidArg("realizations must be >= 1".into()));
    }
    let root = SeededRng::new(seed);
    let mut records = Vec::with_capacity(samples.len() * realizations);
    for (img, label) in samples {
        if *label >= classes.len() {
            return Err(Error::InvalidArg(format!(
                "label {label} on {} outside 0..{}",
                img.id(),
                classes.len()
            )));
        }
        let stream = root.derive(fnv1a64(img.id().as_bytes()));
        for r in 0..realizations {
            let mut rng = stream.derive(r as u64);
            let noisy = corrupt(img, spec, &mut rng)?;
            let oracle = route_denoise(
                &noisy,
                registry,
                RouteMode::Oracle(&classes[*label]),
                spec,
                margin,
            )?;
            let predicted =
                route_denoise(&noisy, registry, RouteMode::Classifier(classifier), spec, margin)?;
            records.push(PairedRouteRecord {
                image: img.id(),
                realization: r,
                oracle_class: oracle.label.name.clone(),
                predicted_class: predicted.label.name.clone(),
                psnr_oracle: psnr(img, &oracle.image)?,
                psnr_predicted: psnr(img, &predicted.image)?,
            });
        }
    }
    Ok(records)
}

/// Loads a labeled corpus laid out as one subdirectory per class
/// (`dir/<class-name>/*.png|pgm`). Class indices follow subdirectory
/// name order, so the same tree always yields the same labels.
pub fn load_labeled_corpus(
    dir: impl AsRef<Path>,
) -> Result<(Vec<(GrayImage, usize)>, Vec<ClassLabel>)> {
    let dir = dir.as_ref();
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no class subdirectories in {}",
            dir.display()
        )));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    for (index, class_dir) in class_dirs.iter().enumerate() {
        let name = class_dir
            .file_name()
            .map(|v| v.to_string_lossy().into_owned())
            .unwrap_or_default();
        for img in crate::image_io::load_corpus(class_dir)? {
            samples.push((img, index));
        }
        classes.push(ClassLabel::new(index, name));
    }
    Ok((samples, classes))
}
