//! The gradual-residual denoising network.
//!
//! Each layer applies two 3x3 convolutions to the same incoming tensor:
//! a feed convolution whose ReLU output is forwarded, and a single-channel
//! estimate convolution whose output is *not* forwarded — it is one layer's
//! estimate of the corruption. The final image is the input plus the sum of
//! all estimates, so with `depth` layers and `feed_channels` 63 the default
//! network performs 63 + 1 convolutions per layer and the output stays a
//! residual correction of the input at every depth.
//!
//! Without skip connections (the ablation variant) no per-layer estimates
//! exist: every layer forwards `feed_channels` channels and one final
//! convolution produces a single residual added to the input.
//!
//! Numeric conventions that tests pin down:
//!
//! - The estimate convolution of layer ℓ reads the same post-ReLU
//!   activation `a_{ℓ-1}` as the feed convolution (for ℓ = 1, the raw
//!   input).
//! - Estimates are summed layer 1 → depth as a left fold, and the output
//!   is `input + sum`, one rounding per pixel. Re-deriving that fold from a
//!   trace reproduces the output bit for bit.
//! - In skip mode the last layer's feed convolution feeds nothing; its
//!   parameters exist (and serialize) but forward skips computing it and
//!   its gradients are exactly zero.

use serde::{Deserialize, Serialize};

use crate::container::{self, Section};
use crate::error::{Error, Result};
use crate::image_io::GrayImage;
use crate::noise::{NoiseSpec, SeededRng, RNG_ALGORITHM};
use crate::tensor::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvParams, Padding, Tensor,
};

/// First bytes of a denoiser model file.
pub const MODEL_MAGIC: [u8; 4] = *b"DNET";

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Number of layers, 1..=64.
    pub depth: usize,
    /// Channels forwarded between layers (63 reproduces the reference
    /// architecture; with skip connections the layer performs
    /// `feed_channels + 1` convolutions).
    pub feed_channels: usize,
    /// `true`: per-layer estimates summed onto the input. `false`: plain
    /// feedforward stack closed by a single residual convolution.
    pub skip_connections: bool,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 20,
            feed_channels: 63,
            skip_connections: true,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 64 {
            return Err(Error::Config(format!(
                "depth must lie in 1..=64, got {}",
                self.depth
            )));
        }
        if self.feed_channels == 0 {
            return Err(Error::Config("feed_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Convolutions per layer as quoted in ablation tables: the estimate
    /// conv counts as one kernel when skip connections are on.
    pub fn kernels_per_layer(&self) -> usize {
        if self.skip_connections {
            self.feed_channels + 1
        } else {
            self.feed_channels
        }
    }

    /// Incoming channels of layer `l` (1-based).
    fn c_in(&self, l: usize) -> usize {
        if l == 1 {
            1
        } else {
            self.feed_channels
        }
    }
}

/// Closed-form scalar parameter count for a configuration.
///
/// Per layer: a feed conv `9·c_in·F + F` plus, with skip connections, an
/// estimate conv `9·c_in + 1`; without them a single final conv `9·F + 1`.
/// Defaults (depth 20, 63+1 kernels): 640 + 19·36,352 = 691,328.
pub fn param_count(config: &NetworkConfig) -> usize {
    let f = config.feed_channels;
    let mut total = 0;
    for l in 1..=config.depth {
        let c_in = config.c_in(l);
        total += 9 * c_in * f + f;
        if config.skip_connections {
            total += 9 * c_in + 1;
        }
    }
    if !config.skip_connections {
        total += 9 * f + 1;
    }
    total
}

/// All convolution parameters of a network, in serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    /// Feed convolution of each layer, `(3,3,c_in,feed_channels)`.
    pub feed: Vec<ConvParams>,
    /// Estimate convolution of each layer, `(3,3,c_in,1)`; empty without
    /// skip connections.
    pub estimates: Vec<ConvParams>,
    /// Final residual convolution `(3,3,feed_channels,1)`; present exactly
    /// when skip connections are off.
    pub final_conv: Option<ConvParams>,
}

impl NetworkWeights {
    /// Serializes every parameter: layers in order, feed weights then feed
    /// bias then (with skip) estimate weights and bias; the final conv
    /// last. This order is the model-file payload order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.feed.len() {
            let p = &self.feed[l];
            out.extend_from_slice(p.weights.data());
            out.extend_from_slice(&p.bias);
            if let Some(e) = self.estimates.get(l) {
                out.extend_from_slice(e.weights.data());
                out.extend_from_slice(&e.bias);
            }
        }
        if let Some(f) = &self.final_conv {
            out.extend_from_slice(f.weights.data());
            out.extend_from_slice(&f.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a given configuration.
    pub fn from_flat(config: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let expected = param_count(config);
        if flat.len() != expected {
            return Err(Error::ModelFormat(format!(
                "weight payload holds {} values but the configuration needs {expected}",
                flat.len()
            )));
        }
        let f = config.feed_channels;
        let mut cursor = flat;
        let mut next = |n: usize| -> &[f64] {
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            head
        };
        let mut feed = Vec::with_capacity(config.depth);
        let mut estimates = Vec::new();
        for l in 1..=config.depth {
            let c_in = config.c_in(l);
            let w = Tensor::from_vec(3, 3, c_in, f, next(9 * c_in * f).to_vec())?;
            let b = next(f).to_vec();
            feed.push(ConvParams::new(w, b)?);
            if config.skip_connections {
                let w = Tensor::from_vec(3, 3, c_in, 1, next(9 * c_in).to_vec())?;
                let b = next(1).to_vec();
                estimates.push(ConvParams::new(w, b)?);
            }
        }
        let final_conv = if config.skip_connections {
            None
        } else {
            let w = Tensor::from_vec(3, 3, f, 1, next(9 * f).to_vec())?;
            let b = next(1).to_vec();
            Some(ConvParams::new(w, b)?)
        };
        debug_assert!(cursor.is_empty());
        Ok(NetworkWeights {
            feed,
            estimates,
            final_conv,
        })
    }

    /// Total scalar parameters actually held.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for p in self
            .feed
            .iter()
            .chain(&self.estimates)
            .chain(&self.final_conv)
        {
            total += p.param_count();
        }
        total
    }

    /// Human-readable names aligned with [`flatten`](Self::flatten) blocks,
    /// for error reporting: `layer3.feed`, `layer3.estimate`, `final`.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.feed.len() {
            names.push(format!("layer{}.feed", l + 1));
            if l < self.estimates.len() {
                names.push(format!("layer{}.estimate", l + 1));
            }
        }
        if self.final_conv.is_some() {
            names.push("final".into());
        }
        names
    }

    /// Parameter blocks in the same order as [`block_names`](Self::block_names).
    pub fn blocks(&self) -> Vec<&ConvParams> {
        let mut blocks = Vec::new();
        for l in 0..self.feed.len() {
            blocks.push(&self.feed[l]);
            if let Some(e) = self.estimates.get(l) {
                blocks.push(e);
            }
        }
        if let Some(f) = &self.final_conv {
            blocks.push(f);
        }
        blocks
    }

    /// Mutable view of the blocks, same order as [`blocks`](Self::blocks).
    pub fn blocks_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut blocks = Vec::new();
        let mut est = self.estimates.iter_mut();
        for f in self.feed.iter_mut() {
            blocks.push(f);
            if let Some(e) = est.next() {
                blocks.push(e);
            }
        }
        if let Some(f) = self.final_conv.as_mut() {
            blocks.push(f);
        }
        blocks
    }
}

/// Record of how the weights were produced, stored inside model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    /// Optimizer steps the weights have seen (0 for a fresh init).
    pub steps: u64,
    /// Last recorded training loss, if any.
    pub final_loss: Option<f64>,
    /// Seed of the training run, if trained.
    pub train_seed: Option<u64>,
    /// Number of corpus images used.
    pub corpus_images: Option<usize>,
    /// RNG pipeline identifier the noise was drawn with.
    pub rng_algorithm: String,
}

impl Default for TrainingFingerprint {
    fn default() -> Self {
        TrainingFingerprint {
            steps: 0,
            final_loss: None,
            train_seed: None,
            corpus_images: None,
            rng_algorithm: RNG_ALGORITHM.to_owned(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: NetworkConfig,
    noise_spec: NoiseSpec,
    fingerprint: TrainingFingerprint,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per-layer single-channel noise estimates (empty without skip
    /// connections).
    pub estimates: Vec<Tensor>,
    /// `input + Σ estimates` (skip) or `input + final_conv(a_depth)`.
    pub output: Tensor,
    /// Post-ReLU activations `a_0 = input .. `, kept only when the caller
    /// asked to retain state for a backward pass.
    cache: Option<Vec<Tensor>>,
}

impl ForwardTrace {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// A configuration plus consistent weights.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    weights: NetworkWeights,
}

impl Network {
    /// He-initialized network: weights ~ N(0, 2/(9·c_in)), biases zero,
    /// drawn in serialization order from the config seed.
    pub fn init(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let mut he = |c_in: usize, c_out: usize| -> Result<ConvParams> {
            let sd = (2.0 / (9.0 * c_in as f64)).sqrt();
            let data = (0..9 * c_in * c_out).map(|_| sd * rng.normal()).collect();
            ConvParams::new(Tensor::from_vec(3, 3, c_in, c_out, data)?, vec![0.0; c_out])
        };
        let f = config.feed_channels;
        let mut feed = Vec::with_capacity(config.depth);
        let mut estimates = Vec::new();
        for l in 1..=config.depth {
            let c_in = config.c_in(l);
            feed.push(he(c_in, f)?);
            if config.skip_connections {
                estimates.push(he(c_in, 1)?);
            }
        }
        let final_conv = if config.skip_connections {
            None
        } else {
            Some(he(f, 1)?)
        };
        Network::new(
            config,
            NetworkWeights {
                feed,
                estimates,
                final_conv,
            },
        )
    }

    /// Binds weights to a config, checking structural consistency.
    pub fn new(config: NetworkConfig, weights: NetworkWeights) -> Result<Network> {
        config.validate()?;
        let f = config.feed_channels;
        if weights.feed.len() != config.depth {
            return Err(Error::shape(
                "Network::new",
                format!("{} feed convs for depth {}", weights.feed.len(), config.depth),
            ));
        }
        let want_est = if config.skip_connections {
            config.depth
        } else {
            0
        };
        if weights.estimates.len() != want_est {
            return Err(Error::shape(
                "Network::new",
                format!(
                    "{} estimate convs, expected {want_est}",
                    weights.estimates.len()
                ),
            ));
        }
        if weights.final_conv.is_some() == config.skip_connections {
            return Err(Error::shape(
                "Network::new",
                "final conv present iff skip connections are off".to_string(),
            ));
        }
        for l in 1..=config.depth {
            let c_in = config.c_in(l);
            let p = &weights.feed[l - 1];
            if p.c_in() != c_in || p.c_out() != f {
                return Err(Error::shape(
                    "Network::new",
                    format!(
                        "layer {l} feed conv is {}x{}, expected {c_in}x{f}",
                        p.c_in(),
                        p.c_out()
                    ),
                ));
            }
            if let Some(e) = weights.estimates.get(l - 1) {
                if e.c_in() != c_in || e.c_out() != 1 {
                    return Err(Error::shape(
                        "Network::new",
                        format!(
                            "layer {l} estimate conv is {}x{}, expected {c_in}x1",
                            e.c_in(),
                            e.c_out()
                        ),
                    ));
                }
            }
        }
        if let Some(fc) = &weights.final_conv {
            if fc.c_in() != f || fc.c_out() != 1 {
                return Err(Error::shape(
                    "Network::new",
                    format!("final conv is {}x{}, expected {f}x1", fc.c_in(), fc.c_out()),
                ));
            }
        }
        Ok(Network { config, weights })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    /// In-place weight access for the optimizer; shape changes are the
    /// caller's responsibility (use [`set_weights`](Self::set_weights) to
    /// revalidate).
    pub(crate) fn weights_mut(&mut self) -> &mut NetworkWeights {
        &mut self.weights
    }

    /// Replaces the weights, revalidating consistency.
    pub fn set_weights(&mut self, weights: NetworkWeights) -> Result<()> {
        *self = Network::new(self.config, weights)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Runs the network on `(n, h, w, 1)` input in net range. With
    /// `keep_cache` the trace retains activations for [`backward`](Self::backward).
    pub fn forward(&self, input: &Tensor, keep_cache: bool) -> Result<ForwardTrace> {
        let (_, _, _, c) = input.shape();
        if c != 1 {
            return Err(Error::shape(
                "Network::forward",
                format!("input must have 1 channel, got {c}"),
            ));
        }
        let depth = self.config.depth;
        let skip = self.config.skip_connections;
        let mut acts: Vec<Tensor> = vec![input.clone()];
        let mut estimates: Vec<Tensor> = Vec::with_capacity(if skip { depth } else { 0 });
        for l in 0..depth {
            let a_in = acts.last().expect("nonempty");
            if skip {
                estimates.push(conv2d_forward(a_in, &self.weights.estimates[l], Padding::Same)?);
            }
            // In skip mode the last feed conv's output feeds nothing.
            if !skip || l + 1 < depth {
                let z = conv2d_forward(a_in, &self.weights.feed[l], Padding::Same)?;
                acts.push(relu_forward(&z));
                if !keep_cache {
                    // Inference needs only the newest activation.
                    acts.remove(0);
                }
            }
        }
        // Residual: left fold of estimates (skip) or the final conv.
        let residual = if skip {
            let mut sum = estimates[0].clone();
            for e in &estimates[1..] {
                for (s, &v) in sum.data_mut().iter_mut().zip(e.data()) {
                    *s += v;
                }
            }
            sum
        } else {
            conv2d_forward(
                acts.last().expect("nonempty"),
                self.weights.final_conv.as_ref().expect("no-skip net"),
                Padding::Same,
            )?
        };
        let mut output = input.clone();
        for (o, &r) in output.data_mut().iter_mut().zip(residual.data()) {
            *o += r;
        }
        Ok(ForwardTrace {
            estimates,
            output,
            cache: keep_cache.then_some(acts),
        })
    }

    /// Exact gradients of `sum(grad_output ⊙ output)` with respect to every
    /// parameter, shaped like the weights.
    ///
    /// The residual sum routes `grad_output` straight into each estimate
    /// conv; the feed chain backpropagates through the ReLUs. Work per conv
    /// is windowed to the nonzero part of the incoming gradient, so a
    /// margin-masked loss keeps the backward pass proportional to the
    /// center region.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &Tensor) -> Result<NetworkWeights> {
        let acts = trace.cache.as_ref().ok_or_else(|| {
            Error::InvalidArg("backward needs a trace produced with keep_cache".into())
        })?;
        if grad_output.shape() != trace.output.shape() {
            return Err(Error::shape(
                "Network::backward",
                format!(
                    "grad_output {:?} vs output {:?}",
                    grad_output.shape(),
                    trace.output.shape()
                ),
            ));
        }
        let depth = self.config.depth;
        let skip = self.config.skip_connections;
        let mut gfeed: Vec<Option<ConvParams>> = (0..depth).map(|_| None).collect();
        let mut gest: Vec<Option<ConvParams>> = (0..depth).map(|_| None).collect();
        let mut gfinal = None;

        // g_next = gradient with respect to acts[l+1] while visiting layer l.
        let mut g_next: Option<Tensor> = if skip {
            None
        } else {
            let (gin, gf) = conv2d_backward(
                &acts[depth],
                self.weights.final_conv.as_ref().expect("no-skip net"),
                grad_output,
                Padding::Same,
            )?;
            gfinal = Some(gf);
            Some(gin)
        };
        for l in (0..depth).rev() {
            let mut g_l: Option<Tensor> = None;
            if skip {
                // Output = input + Σ e, so dL/de_l is grad_output itself.
                let (gin, ge) = conv2d_backward(
                    &acts[l],
                    &self.weights.estimates[l],
                    grad_output,
                    Padding::Same,
                )?;
                gest[l] = Some(ge);
                g_l = Some(gin);
            }
            let feed_alive = !skip || l + 1 < depth;
            if feed_alive {
                let gz = relu_backward(&acts[l + 1], g_next.as_ref().expect("chain grad"))?;
                let (gin, gf) =
                    conv2d_backward(&acts[l], &self.weights.feed[l], &gz, Padding::Same)?;
                gfeed[l] = Some(gf);
                g_l = Some(match g_l {
                    None => gin,
                    Some(mut acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(gin.data()) {
                            *a += v;
                        }
                        acc
                    }
                });
            } else {
                // Dead last-layer feed conv: parameters exist, gradient is 0.
                let c_in = self.config.c_in(l + 1);
                gfeed[l] = Some(ConvParams::zeros(c_in, self.config.feed_channels));
            }
            g_next = g_l;
        }
        Ok(NetworkWeights {
            feed: gfeed.into_iter().map(|g| g.expect("filled")).collect(),
            estimates: if skip {
                gest.into_iter().map(|g| g.expect("filled")).collect()
            } else {
                Vec::new()
            },
            final_conv: gfinal,
        })
    }

    /// Writes a model file: `DNET` container with JSON metadata (config,
    /// noise spec, fingerprint) and the flattened weights. Refuses to write
    /// if the actual parameter count disagrees with the closed-form count
    /// for the configuration.
    pub fn save(
        &self,
        noise_spec: &NoiseSpec,
        fingerprint: &TrainingFingerprint,
        path: impl AsRef<std::path::Path>,
    ) -> Result<()> {
        noise_spec.validate()?;
        let flat = self.weights.flatten();
        let expected = param_count(&self.config);
        if flat.len() != expected {
            return Err(Error::ModelFormat(format!(
                "refusing to save: {} parameters present, formula demands {expected}",
                flat.len()
            )));
        }
        let meta = serde_json::to_string(&ModelMeta {
            config: self.config,
            noise_spec: *noise_spec,
            fingerprint: fingerprint.clone(),
        })?;
        container::write_sections(path.as_ref(), &[Section::new(MODEL_MAGIC, meta, flat)])
    }

    /// Reads a model file back. Extra trailing sections (e.g. optimizer
    /// state in checkpoints) are ignored here.
    pub fn load(
        path: impl AsRef<std::path::Path>,
    ) -> Result<(Network, NoiseSpec, TrainingFingerprint)> {
        let sections = container::read_sections(path.as_ref(), MODEL_MAGIC)?;
        let section = sections
            .into_iter()
            .find(|s| s.magic == MODEL_MAGIC)
            .ok_or_else(|| Error::ModelFormat("no weight section".into()))?;
        let meta: ModelMeta = serde_json::from_str(&section.metadata)?;
        meta.noise_spec.validate()?;
        let weights = NetworkWeights::from_flat(&meta.config, &section.payload)?;
        Ok((
            Network::new(meta.config, weights)?,
            meta.noise_spec,
            meta.fingerprint,
        ))
    }
}

/// Renders selected per-layer noise estimates as images on a shared
/// symmetric scale: [−m, m] → [0,1] with m = max |e| over the selection, so
/// zero maps to mid-gray. Layers are 1-based.
pub fn visualize_estimates(trace: &ForwardTrace, layers: &[usize]) -> Result<Vec<GrayImage>> {
    if trace.estimates.is_empty() {
        return Err(Error::InvalidArg(
            "estimate visualization needs a skip-connected trace".into(),
        ));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArg("empty layer selection".into()));
    }
    let depth = trace.estimates.len();
    for &l in layers {
        if l == 0 || l > depth {
            return Err(Error::InvalidArg(format!(
                "layer {l} outside 1..={depth}"
            )));
        }
    }
    let (n, h, w, _) = trace.estimates[0].shape();
    if n != 1 {
        return Err(Error::InvalidArg(
            "estimate visualization expects a single-image trace".into(),
        ));
    }
    let m = layers
        .iter()
        .map(|&l| trace.estimates[l - 1].max_abs())
        .fold(0.0f64, f64::max);
    layers
        .iter()
        .map(|&l| {
            let e = &trace.estimates[l - 1];
            let pixels = e
                .data()
                .iter()
                .map(|&v| if m == 0.0 { 0.5 } else { 0.5 + v / (2.0 * m) })
                .collect();
            GrayImage::new(h, w, pixels)
        })
        .collect()
}
