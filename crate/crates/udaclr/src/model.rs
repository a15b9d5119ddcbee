//! Segmentation network and patch discriminators.
//!
//! The backbone is a pluggable contract: three outputs (per-class mask
//! probabilities, per-class edge probabilities, penultimate feature map) and
//! at least one dropout layer for Monte Carlo sampling. The default is a
//! small encoder-decoder: four stride-2 encoder levels, a decoder that stops
//! at half resolution, 1×1 prediction heads, and bilinear upsampling of both
//! logits and features back to input resolution. One spatial-dropout layer
//! sits between the features and the heads.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::datasets::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Var};

/// Outputs of one forward pass (batched NCHW).
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// Independent per-class probabilities, (N, 2, H, W) in [0,1].
    pub mask_probs: Array4<f32>,
    /// Per-class edge probabilities, (N, 2, H, W) in [0,1].
    pub edge_probs: Array4<f32>,
    /// Penultimate feature map upsampled to (N, D, H, W).
    pub features: Array4<f32>,
}

/// Patch logits from a discriminator, (N, 1, H', W').
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    pub logits: Array4<f32>,
}

/// Which prediction map a discriminator aligns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscKind {
    Mask,
    Edge,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub entries: Vec<(String, ArrayD<f32>)>,
}

impl ParamSet {
    fn push(&mut self, name: &str, t: ArrayD<f32>) {
        self.entries.push((name.to_string(), t));
    }

    pub fn index(&self, name: &str) -> usize {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        &self.entries[self.index(name)].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Mix all parameter bytes into one hash (used to detect accidental writes).
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Tape handles for a bound parameter set, parallel to `ParamSet::entries`.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Box-Muller.
    let u1: f32 = rng.random_range(f32::EPSILON..1.0);
    let u2: f32 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos() * std
}

fn conv_init(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> ArrayD<f32> {
    let std = (2.0 / (in_c * k * k) as f32).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[out_c, in_c, k, k]), |_| normal(rng, std))
}

/// Spatial (channel) dropout mask of shape (N, C, 1, 1): each channel kept
/// with probability `1 - rate` and scaled by `1/(1 - rate)`.
pub fn spatial_dropout_mask(n: usize, c: usize, rate: f32, rng: &mut ChaCha8Rng) -> Array4<f32> {
    let keep = 1.0 - rate;
    let mut mask = Array4::<f32>::zeros((n, c, 1, 1));
    for ni in 0..n {
        for ci in 0..c {
            let kept = if rate <= 0.0 {
                true
            } else {
                rng.random_range(0.0f32..1.0) >= rate
            };
            mask[(ni, ci, 0, 0)] = if kept { 1.0 / keep } else { 0.0 };
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Segmentation network
// ---------------------------------------------------------------------------

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegNetConfig {
    pub input_size: usize,
    /// Channel widths: stem plus four encoder levels.
    pub widths: [usize; 5],
    /// Spatial dropout rate before the prediction heads.
    pub dropout_rate: f32,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            input_size: 64,
            widths: [8, 16, 32, 64, 128],
            dropout_rate: 0.3,
        }
    }
}

/// Layer table: (name, in_c, out_c, kernel, stride, pad).
fn seg_layers(cfg: &SegNetConfig) -> Vec<(&'static str, usize, usize, usize, usize, usize)> {
    let [w0, w1, w2, w3, w4] = cfg.widths;
    vec![
        ("stem", 3, w0, 3, 1, 1),
        ("enc1a", w0, w1, 3, 2, 1),
        ("enc1b", w1, w1, 3, 1, 1),
        ("enc2a", w1, w2, 3, 2, 1),
        ("enc2b", w2, w2, 3, 1, 1),
        ("enc3a", w2, w3, 3, 2, 1),
        ("enc3b", w3, w3, 3, 1, 1),
        ("enc4a", w3, w4, 3, 2, 1),
        ("enc4b", w4, w4, 3, 1, 1),
        ("dec3", w4 + w3, w3, 3, 1, 1),
        ("dec2", w3 + w2, w2, 3, 1, 1),
        ("dec1", w2 + w1, w1, 3, 1, 1),
        ("head_mask", w1, NUM_CLASSES, 1, 1, 0),
        ("head_edge", w1, NUM_CLASSES, 1, 1, 0),
    ]
}

/// Encoder-decoder segmentation network with mask, edge and feature outputs.
pub struct SegNet {
    pub cfg: SegNetConfig,
    pub params: ParamSet,
}

impl SegNet {
    pub fn new(cfg: SegNetConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            cfg.input_size % 16 == 0,
            "input size must be divisible by 16"
        );
        let mut params = ParamSet::default();
        for (name, in_c, out_c, k, _, _) in seg_layers(&cfg) {
            params.push(&format!("{name}.w"), conv_init(rng, out_c, in_c, k));
            params.push(&format!("{name}.b"), Array1::<f32>::zeros(out_c).into_dyn());
        }
        SegNet { cfg, params }
    }

    /// Channel count of the penultimate feature map.
    pub fn feature_dim(&self) -> usize {
        self.cfg.widths[1]
    }

    pub fn validate_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.cfg.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::validation(format!(
                "expected input (N,3,{s},{s}), got {:?}",
                x.dim()
            )));
        }
        Ok(())
    }

    /// Insert all parameters as tape leaves (in `ParamSet` order).
    pub fn bind(&self, tape: &mut Tape<f32>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Differentiable forward pass on a tape. `dropout_mask`, when given,
    /// multiplies the half-resolution features before the heads.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<f32>,
        bound: &BoundParams,
        x: Var,
        dropout_mask: Option<&Array4<f32>>,
    ) -> SegTapeOutputs {
        let conv = |tape: &mut Tape<f32>, name: &str, x: Var, stride: usize, pad: usize| -> Var {
            let w = bound.vars[self.params.index(&format!("{name}.w"))];
            let b = bound.vars[self.params.index(&format!("{name}.b"))];
            tape.conv2d(x, w, b, stride, pad)
        };
        let relu_conv = |tape: &mut Tape<f32>, name: &str, x: Var, stride: usize| -> Var {
            let y = conv(tape, name, x, stride, 1);
            tape.relu(y)
        };

        let s0 = relu_conv(tape, "stem", x, 1);
        let e1 = {
            let a = relu_conv(tape, "enc1a", s0, 2);
            relu_conv(tape, "enc1b", a, 1)
        };
        let e2 = {
            let a = relu_conv(tape, "enc2a", e1, 2);
            relu_conv(tape, "enc2b", a, 1)
        };
        let e3 = {
            let a = relu_conv(tape, "enc3a", e2, 2);
            relu_conv(tape, "enc3b", a, 1)
        };
        let e4 = {
            let a = relu_conv(tape, "enc4a", e3, 2);
            relu_conv(tape, "enc4b", a, 1)
        };
        let d3 = {
            let up = tape.upsample_nearest2x(e4);
            let cat = tape.concat_channels(up, e3);
            relu_conv(tape, "dec3", cat, 1)
        };
        let d2 = {
            let up = tape.upsample_nearest2x(d3);
            let cat = tape.concat_channels(up, e2);
            relu_conv(tape, "dec2", cat, 1)
        };
        let feats_half = {
            let up = tape.upsample_nearest2x(d2);
            let cat = tape.concat_channels(up, e1);
            relu_conv(tape, "dec1", cat, 1)
        };
        let features = tape.upsample_bilinear2x(feats_half);

        let head_in = match dropout_mask {
            Some(m) => {
                let mv = tape.constant(m.clone().into_dyn());
                tape.mul(feats_half, mv)
            }
            None => feats_half,
        };
        let mask_logits_half = conv(tape, "head_mask", head_in, 1, 0);
        let edge_logits_half = conv(tape, "head_edge", head_in, 1, 0);
        let ml = tape.upsample_bilinear2x(mask_logits_half);
        let el = tape.upsample_bilinear2x(edge_logits_half);
        let mask_probs = tape.sigmoid(ml);
        let edge_probs = tape.sigmoid(el);
        SegTapeOutputs {
            mask_probs,
            edge_probs,
            features,
            feats_half,
        }
    }

    /// Half-resolution trunk features (plain arrays, no autodiff).
    fn trunk_plain(&self, x: &Array4<f32>) -> Array4<f32> {
        let conv = |name: &str, x: &ArrayD<f32>, stride: usize, pad: usize| -> ArrayD<f32> {
            let w = self.params.get(&format!("{name}.w"));
            let b = self.params.get(&format!("{name}.b"));
            let mut y = kernels::conv2d_forward(x, w, b, stride, pad);
            y.mapv_inplace(|v| v.max(0.0));
            y
        };
        let x = x.clone().into_dyn();
        let s0 = conv("stem", &x, 1, 1);
        let e1 = {
            let a = conv("enc1a", &s0, 2, 1);
            conv("enc1b", &a, 1, 1)
        };
        let e2 = {
            let a = conv("enc2a", &e1, 2, 1);
            conv("enc2b", &a, 1, 1)
        };
        let e3 = {
            let a = conv("enc3a", &e2, 2, 1);
            conv("enc3b", &a, 1, 1)
        };
        let e4 = {
            let a = conv("enc4a", &e3, 2, 1);
            conv("enc4b", &a, 1, 1)
        };
        let cat3 = concat_c(&kernels::upsample_nearest2x_forward(&e4), &e3);
        let d3 = conv("dec3", &cat3, 1, 1);
        let cat2 = concat_c(&kernels::upsample_nearest2x_forward(&d3), &e2);
        let d2 = conv("dec2", &cat2, 1, 1);
        let cat1 = concat_c(&kernels::upsample_nearest2x_forward(&d2), &e1);
        let d1 = conv("dec1", &cat1, 1, 1);
        d1.into_dimensionality().unwrap()
    }

    /// Apply heads to (possibly masked) half-resolution features.
    fn heads_plain(&self, feats_half: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let run = |name: &str| -> Array4<f32> {
            let w = self.params.get(&format!("{name}.w"));
            let b = self.params.get(&format!("{name}.b"));
            let logits = kernels::conv2d_forward(&feats_half.clone().into_dyn(), w, b, 1, 0);
            let mut up = kernels::upsample_bilinear2x_forward(&logits);
            up.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
            up.into_dimensionality().unwrap()
        };
        (run("head_mask"), run("head_edge"))
    }

    /// Inference forward pass. `dropout` draws one spatial-dropout mask;
    /// `None` is fully deterministic.
    pub fn forward(
        &self,
        x: &Array4<f32>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ModelOutputs> {
        self.validate_input(x)?;
        let feats_half = self.trunk_plain(x);
        let features: Array4<f32> =
            kernels::upsample_bilinear2x_forward(&feats_half.clone().into_dyn())
                .into_dimensionality()
                .unwrap();
        let head_in = match dropout {
            Some(rng) => {
                let (n, c, _, _) = feats_half.dim();
                let mask = spatial_dropout_mask(n, c, self.cfg.dropout_rate, rng);
                &feats_half * &mask
            }
            None => feats_half,
        };
        let (mask_probs, edge_probs) = self.heads_plain(&head_in);
        Ok(ModelOutputs {
            mask_probs,
            edge_probs,
            features,
        })
    }

    /// `m` stochastic dropout forward passes; returns the mask-probability
    /// samples. The trunk below the dropout layer is deterministic, so it is
    /// computed once and only the dropout + heads are resampled — bit-equal
    /// to recomputing the full pass per sample.
    pub fn mc_forward(
        &self,
        x: &Array4<f32>,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Array4<f32>>> {
        if m < 2 {
            return Err(Error::validation(format!(
                "mc_forward needs M >= 2 samples (std is undefined for M={m})"
            )));
        }
        self.validate_input(x)?;
        let feats_half = self.trunk_plain(x);
        self.mc_from_features(&feats_half, m, rng)
    }

    /// MC sampling given already-computed head-resolution features.
    pub fn mc_from_features(
        &self,
        feats_half: &Array4<f32>,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Array4<f32>>> {
        if m < 2 {
            return Err(Error::validation(format!(
                "mc_forward needs M >= 2 samples (std is undefined for M={m})"
            )));
        }
        let (n, c, _, _) = feats_half.dim();
        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            let mask = spatial_dropout_mask(n, c, self.cfg.dropout_rate, rng);
            let masked = feats_half * &mask;
            let (p_m, _) = self.heads_plain(&masked);
            samples.push(p_m);
        }
        Ok(samples)
    }
}

/// Tape handles of one segmentation forward pass.
pub struct SegTapeOutputs {
    pub mask_probs: Var,
    pub edge_probs: Var,
    /// Pre-dropout features, upsampled to input resolution.
    pub features: Var,
    /// Pre-dropout features at head resolution (for MC head resampling).
    pub feats_half: Var,
}

fn concat_c(a: &ArrayD<f32>, b: &ArrayD<f32>) -> ArrayD<f32> {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).unwrap()
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

/// Patch discriminator config: four stride-2 4x4 convolutions.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub input_size: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            in_channels: NUM_CLASSES,
            widths: [12, 24, 48],
            input_size: 64,
        }
    }
}

fn disc_layers(cfg: &DiscConfig) -> Vec<(&'static str, usize, usize)> {
    let [w0, w1, w2] = cfg.widths;
    vec![
        ("c1", cfg.in_channels, w0),
        ("c2", w0, w1),
        ("c3", w1, w2),
        ("c4", w2, 1),
    ]
}

/// Strided convolutional patch classifier with leaky-rectified activations.
pub struct Discriminator {
    pub cfg: DiscConfig,
    pub params: ParamSet,
}

const LEAKY_SLOPE: f32 = 0.2;

impl Discriminator {
    pub fn new(cfg: DiscConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::default();
        for (name, in_c, out_c) in disc_layers(&cfg) {
            params.push(&format!("{name}.w"), conv_init(rng, out_c, in_c, 4));
            params.push(&format!("{name}.b"), Array1::<f32>::zeros(out_c).into_dyn());
        }
        Discriminator { cfg, params }
    }

    /// Spatial size of the output patch grid (input/16 for 4 stride-2 layers).
    pub fn out_size(&self) -> usize {
        let mut s = self.cfg.input_size;
        for _ in 0..4 {
            s = kernels::conv_out_size(s, 4, 2, 1);
        }
        s
    }

    pub fn validate_input(&self, x: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::validation(format!(
                "expected discriminator input (N,{},{},{}), got {:?}",
                self.cfg.in_channels,
                self.cfg.input_size,
                self.cfg.input_size,
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<f32>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Insert parameters as constants: gradients flow to the inputs only
    /// (the generator step trains against frozen discriminators).
    pub fn bind_frozen(&self, tape: &mut Tape<f32>) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .entries
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect(),
        }
    }

    /// Differentiable forward: returns patch logits (N,1,H/16,W/16).
    pub fn forward_tape(&self, tape: &mut Tape<f32>, bound: &BoundParams, x: Var) -> Var {
        let mut cur = x;
        let layers = disc_layers(&self.cfg);
        let n_layers = layers.len();
        for (i, (name, _, _)) in layers.into_iter().enumerate() {
            let w = bound.vars[self.params.index(&format!("{name}.w"))];
            let b = bound.vars[self.params.index(&format!("{name}.b"))];
            cur = tape.conv2d(cur, w, b, 2, 1);
            if i + 1 < n_layers {
                cur = tape.leaky_relu(cur, LEAKY_SLOPE);
            }
        }
        cur
    }

    /// Inference forward pass with input validation.
    pub fn discriminate(&self, map: &Array4<f32>) -> Result<DiscriminatorOutput> {
        self.validate_input(map)?;
        let mut cur = map.clone().into_dyn();
        let layers = disc_layers(&self.cfg);
        let n_layers = layers.len();
        for (i, (name, _, _)) in layers.into_iter().enumerate() {
            let w = self.params.get(&format!("{name}.w"));
            let b = self.params.get(&format!("{name}.b"));
            cur = kernels::conv2d_forward(&cur, w, b, 2, 1);
            if i + 1 < n_layers {
                cur.mapv_inplace(|v| if v > 0.0 { v } else { v * LEAKY_SLOPE });
            }
        }
        Ok(DiscriminatorOutput {
            logits: cur.into_dimensionality().unwrap(),
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoint archive
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"UDCK";
const CKPT_VERSION: u32 = 1;

/// JSON metadata block stored inside a checkpoint.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
    pub metric_history: serde_json::Value,
    pub seg_config: SegNetConfig,
    pub disc_config: DiscConfig,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Everything needed to resume or evaluate.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub seg: SegNet,
    pub disc_mask: Discriminator,
    pub disc_edge: Discriminator,
}

fn write_params<W: Write>(w: &mut W, prefix: &str, params: &ParamSet) -> std::io::Result<()> {
    for (name, t) in &params.entries {
        let full = format!("{prefix}.{name}");
        w.write_all(&(full.len() as u16).to_le_bytes())?;
        w.write_all(full.as_bytes())?;
        w.write_all(&(t.ndim() as u8).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Save all parameter tensors keyed by layer path plus a JSON metadata block.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let meta =
        serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    let n_tensors = ckpt.seg.params.entries.len()
        + ckpt.disc_mask.params.entries.len()
        + ckpt.disc_edge.params.entries.len();
    buf.extend_from_slice(&(n_tensors as u32).to_le_bytes());
    write_params(&mut buf, "seg", &ckpt.seg.params)
        .and_then(|_| write_params(&mut buf, "disc_mask", &ckpt.disc_mask.params))
        .and_then(|_| write_params(&mut buf, "disc_edge", &ckpt.disc_edge.params))
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<u8>> {
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

/// Load a checkpoint archive written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::Cursor::new(&data);
    let magic = read_exact_vec(&mut r, 4).map_err(|e| Error::io(path, e))?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let ver = u32::from_le_bytes(
        read_exact_vec(&mut r, 4)
            .map_err(|e| Error::io(path, e))?
            .try_into()
            .unwrap(),
    );
    if ver != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {ver}")));
    }
    let meta_len = u64::from_le_bytes(
        read_exact_vec(&mut r, 8)
            .map_err(|e| Error::io(path, e))?
            .try_into()
            .unwrap(),
    ) as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(&read_exact_vec(&mut r, meta_len).map_err(|e| Error::io(path, e))?)
            .map_err(|e| Error::Checkpoint(format!("meta: {e}")))?;
    let n_tensors = u32::from_le_bytes(
        read_exact_vec(&mut r, 4)
            .map_err(|e| Error::io(path, e))?
            .try_into()
            .unwrap(),
    ) as usize;

    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(
            read_exact_vec(&mut r, 2)
                .map_err(|e| Error::io(path, e))?
                .try_into()
                .unwrap(),
        ) as usize;
        let name =
            String::from_utf8(read_exact_vec(&mut r, name_len).map_err(|e| Error::io(path, e))?)
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
        let ndim = read_exact_vec(&mut r, 1).map_err(|e| Error::io(path, e))?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(
                read_exact_vec(&mut r, 8)
                    .map_err(|e| Error::io(path, e))?
                    .try_into()
                    .unwrap(),
            ) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = read_exact_vec(&mut r, len * 4).map_err(|e| Error::io(path, e))?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|e| Error::Checkpoint(format!("tensor shape: {e}")))?,
        ));
    }

    let take = |prefix: &str| -> ParamSet {
        let mut set = ParamSet::default();
        for (name, t) in &tensors {
            if let Some(rest) = name.strip_prefix(&format!("{prefix}.")) {
                set.push(rest, t.clone());
            }
        }
        set
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seg = SegNet::new(meta.seg_config.clone(), &mut rng);
    seg.params = take("seg");
    let mut disc_mask = Discriminator::new(meta.disc_config.clone(), &mut rng);
    disc_mask.params = take("disc_mask");
    let mut disc_edge = Discriminator::new(meta.disc_config.clone(), &mut rng);
    disc_edge.params = take("disc_edge");
    Ok(Checkpoint {
        meta,
        seg,
        disc_mask,
        disc_edge,
    })
}
