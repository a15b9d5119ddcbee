//! Alternating adversarial training: one segmentation update on the weighted
//! total, then one SGD update per discriminator, with warm-up gating of the
//! category losses, step-decay learning-rate schedule, JSON-lines metrics,
//! and deterministic seeded RNG streams.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::datasets::{
    crop_roi, derive_edge_map, perturb, Dataset, PerturbConfig, CLASS_CUP, CLASS_DISC,
    NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossTerms, SumMode, SupLossForm};
use crate::model::{
    save_checkpoint, spatial_dropout_mask, Checkpoint, CheckpointMeta, DiscConfig, Discriminator,
    ParamSet, SegNet, SegNetConfig,
};
use crate::prototypes::{discriminative_loss_node, inter_domain_loss_node, prototype_node};
use crate::pseudo_uncertainty as pu;
use crate::tensor::Tape;

/// FNV-1a over a byte slice; used for config hashes and diagnostics.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(salt)))
}

const SALT_INIT: u64 = 1;
const SALT_SHUFFLE: u64 = 2;
const SALT_DROPOUT: u64 = 3;
const SALT_MC: u64 = 4;
const SALT_PERTURB: u64 = 5;

/// All training hyperparameters. Defaults are the full-scale values; the
/// desk preset rescales the schedule for the synthetic CPU benchmark while
/// preserving the 5:1 ratio of total epochs to decay interval.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Pseudo-label probability threshold.
    pub beta: f32,
    /// Uncertainty threshold for the consistency loss.
    pub mu: f32,
    /// Uncertainty threshold for prototype filtering.
    pub xi: f32,
    /// Disabling UGNA is equivalent to xi = infinity.
    pub ugna: bool,
    /// Distance margin of the discriminative loss.
    pub delta: f32,
    /// Number of MC dropout passes.
    pub m_passes: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub lambda4: f32,
    pub epochs: usize,
    pub seg_lr: f32,
    pub seg_lr_decay_factor: f32,
    pub seg_lr_decay_every: usize,
    pub disc_lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub input_size: usize,
    /// Category losses activate after this many epochs.
    pub warmup_epochs: usize,
    pub dropout_rate: f32,
    pub widths: [usize; 5],
    pub disc_widths: [usize; 3],
    pub sup_loss: SupLossForm,
    /// Mean-normalize pixel sums; false keeps raw sums.
    pub normalize_sums: bool,
    pub perturb: PerturbConfig,
    pub deterministic: bool,
    /// Evaluate on the validation split every this many epochs.
    pub eval_every: usize,
    /// Anchor the prototype alignment on detached source prototypes so the
    /// pull acts on target features only.
    pub inter_detach_source: bool,
    /// Minimum pixels behind a target prototype before it is trusted.
    pub proto_min_support: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.75,
            mu: 0.05,
            xi: 0.05,
            ugna: true,
            delta: 0.01,
            m_passes: 10,
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 0.01,
            lambda4: 0.01,
            epochs: 500,
            seg_lr: 1e-3,
            seg_lr_decay_factor: 0.2,
            seg_lr_decay_every: 100,
            disc_lr: 2e-5,
            batch_size: 8,
            seed: 1,
            input_size: 512,
            warmup_epochs: 5,
            dropout_rate: 0.3,
            widths: [8, 16, 32, 64, 128],
            disc_widths: [12, 24, 48],
            sup_loss: SupLossForm::DiceBce,
            normalize_sums: true,
            perturb: PerturbConfig::default(),
            deterministic: false,
            eval_every: 1,
            inter_detach_source: true,
            proto_min_support: 8,
        }
    }
}

/// Schedule preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected desk|paper)"
            ))),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 64x64 inputs, 20 epochs with decay every 4
    /// (same 5:1 epochs-to-decay ratio as the full schedule), warm-up 3.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            seg_lr_decay_every: 4,
            input_size: 64,
            warmup_epochs: 3,
            ..TrainConfig::default()
        }
    }

    pub fn with_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(msg.to_string()))
            }
        };
        check(
            self.beta > 0.0 && self.beta < 1.0,
            &format!("beta must be in (0,1), got {}", self.beta),
        )?;
        check(self.mu >= 0.0, &format!("mu must be >= 0, got {}", self.mu))?;
        check(self.xi >= 0.0, &format!("xi must be >= 0, got {}", self.xi))?;
        check(
            self.delta >= 0.0,
            &format!("delta must be >= 0, got {}", self.delta),
        )?;
        check(
            self.m_passes >= 2,
            &format!("m_passes must be >= 2, got {}", self.m_passes),
        )?;
        check(
            self.epochs >= 1,
            &format!("epochs must be >= 1, got {}", self.epochs),
        )?;
        check(self.seg_lr > 0.0, "seg_lr must be > 0")?;
        check(self.disc_lr > 0.0, "disc_lr must be > 0")?;
        check(
            self.seg_lr_decay_factor > 0.0,
            "seg_lr_decay_factor must be > 0",
        )?;
        check(self.seg_lr_decay_every >= 1, "seg_lr_decay_every must be >= 1")?;
        check(self.batch_size >= 1, "batch_size must be >= 1")?;
        check(
            self.input_size >= 16 && self.input_size % 16 == 0,
            &format!(
                "input_size must be a positive multiple of 16, got {}",
                self.input_size
            ),
        )?;
        check(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must be in [0,1)",
        )?;
        check(self.eval_every >= 1, "eval_every must be >= 1")?;
        for (i, l) in [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
            .iter()
            .enumerate()
        {
            check(
                l.is_finite() && *l >= 0.0,
                &format!("lambda{} must be finite and >= 0", i + 1),
            )?;
        }
        Ok(())
    }

    /// Apply one `key=value` override; keys address any config field, with
    /// dots for nested fields (e.g. `perturb.hue`).
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        let mut json = serde_json::to_value(&*self)
            .map_err(|e| Error::config(format!("serialize config: {e}")))?;
        let pointer = format!("/{}", key.replace('.', "/"));
        let slot = json
            .pointer_mut(&pointer)
            .ok_or_else(|| Error::config(format!("unknown config field `{key}`")))?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *slot = parsed;
        *self = serde_json::from_value(json)
            .map_err(|e| Error::config(format!("invalid value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    pub fn sum_mode(&self) -> SumMode {
        if self.normalize_sums {
            SumMode::Mean
        } else {
            SumMode::Raw
        }
    }

    /// Prototype-filter threshold with UGNA off mapped to infinity.
    pub fn effective_xi(&self) -> f32 {
        if self.ugna {
            self.xi
        } else {
            f32::INFINITY
        }
    }

    pub fn seg_net_config(&self) -> SegNetConfig {
        SegNetConfig {
            input_size: self.input_size,
            widths: self.widths,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            in_channels: NUM_CLASSES,
            widths: self.disc_widths,
            input_size: self.input_size,
        }
    }
}

/// Step-decay schedule: seg_lr · factor^⌊epoch / every⌋.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f32 {
    cfg.seg_lr
        * cfg
            .seg_lr_decay_factor
            .powi((epoch / cfg.seg_lr_decay_every) as i32)
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adaptive-moment estimation for the segmentation network.
struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamSet) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params
                .entries
                .iter()
                .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
                .collect(),
            v: params
                .entries
                .iter()
                .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
                .collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Option<&ArrayD<f32>>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in params.entries.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Plain stochastic gradient descent for the discriminators.
fn sgd_step(params: &mut ParamSet, grads: &[Option<&ArrayD<f32>>], lr: f32) {
    for (i, (_, p)) in params.entries.iter_mut().enumerate() {
        let Some(g) = grads[i] else { continue };
        ndarray::Zip::from(p).and(g).for_each(|p, &g| *p -= lr * g);
    }
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A labelled source batch (images, per-class masks, per-class edges).
pub struct SourceBatch {
    pub images: Array4<f32>,
    pub masks: Array4<f32>,
    pub edges: Array4<f32>,
}

/// An unlabelled target batch.
pub struct TargetBatch {
    pub images: Array4<f32>,
}

struct Prepared {
    images: Vec<Array3<f32>>,
    masks: Vec<Option<Array3<f32>>>,
    edges: Vec<Option<Array3<f32>>>,
}

fn prepare(samples: &Dataset, input_size: usize, need_labels: bool) -> Result<Prepared> {
    let mut images = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    let mut edges = Vec::with_capacity(samples.len());
    for s in &samples.samples {
        let s = if s.height() == input_size && s.width() == input_size {
            s.clone()
        } else if s.height() >= input_size && s.width() >= input_size {
            crop_roi(s, input_size)?
        } else {
            return Err(Error::validation(format!(
                "sample {} ({}x{}) is smaller than the configured input size {}",
                s.id,
                s.height(),
                s.width(),
                input_size
            )));
        };
        if need_labels {
            let m = s.masks.as_ref().ok_or_else(|| {
                Error::validation(format!("sample {} is missing its label masks", s.id))
            })?;
            let e = derive_edge_map(m)?;
            let mut m4 = Array3::<f32>::zeros((NUM_CLASSES, input_size, input_size));
            let mut e4 = Array3::<f32>::zeros((NUM_CLASSES, input_size, input_size));
            for c in 0..NUM_CLASSES {
                let mc = m.class(c);
                let ec = e.class(c);
                for y in 0..input_size {
                    for x in 0..input_size {
                        m4[(c, y, x)] = f32::from(mc[(y, x)]);
                        e4[(c, y, x)] = f32::from(ec[(y, x)]);
                    }
                }
            }
            masks.push(Some(m4));
            edges.push(Some(e4));
        } else {
            masks.push(None);
            edges.push(None);
        }
        images.push(s.image.clone());
    }
    Ok(Prepared {
        images,
        masks,
        edges,
    })
}

fn stack3(items: Vec<&Array3<f32>>) -> Array4<f32> {
    let (c, h, w) = items[0].dim();
    let mut out = Array4::<f32>::zeros((items.len(), c, h, w));
    for (i, a) in items.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(a);
    }
    out
}

fn gather_source(prep: &Prepared, idx: &[usize]) -> SourceBatch {
    SourceBatch {
        images: stack3(idx.iter().map(|&i| &prep.images[i]).collect()),
        masks: stack3(idx.iter().map(|&i| prep.masks[i].as_ref().unwrap()).collect()),
        edges: stack3(idx.iter().map(|&i| prep.edges[i].as_ref().unwrap()).collect()),
    }
}

fn gather_target(prep: &Prepared, idx: &[usize]) -> TargetBatch {
    TargetBatch {
        images: stack3(idx.iter().map(|&i| &prep.images[i]).collect()),
    }
}

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

/// Per-epoch evaluation record.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg_lr: f64,
    pub dice_disc: Option<f64>,
    pub dice_cup: Option<f64>,
    pub mean_dice: Option<f64>,
}

#[derive(serde::Serialize)]
struct StepRecord<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    step: usize,
    epoch: usize,
    seg_lr: f64,
    sup: f64,
    edge: f64,
    adv: f64,
    inter: f64,
    dis: f64,
    aug: f64,
    total: f64,
    skipped: &'a [String],
    d_mask: f64,
    d_edge: f64,
}

#[derive(serde::Serialize)]
struct EpochLine<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Mutable training state: networks, optimizer moments, RNG streams.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub seg: SegNet,
    pub disc_mask: Discriminator,
    pub disc_edge: Discriminator,
    adam: Adam,
    pub epoch: usize,
    pub step: usize,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    mc_rng: ChaCha8Rng,
    perturb_rng: ChaCha8Rng,
    pub best_metric: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// Cumulative count of skipped loss terms, by term name.
    pub skipped_counts: BTreeMap<String, usize>,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream_rng(cfg.seed, SALT_INIT);
        let seg = SegNet::new(cfg.seg_net_config(), &mut init_rng);
        let disc_mask = Discriminator::new(cfg.disc_config(), &mut init_rng);
        let disc_edge = Discriminator::new(cfg.disc_config(), &mut init_rng);
        let adam = Adam::new(&seg.params);
        Ok(TrainState {
            shuffle_rng: stream_rng(cfg.seed, SALT_SHUFFLE),
            dropout_rng: stream_rng(cfg.seed, SALT_DROPOUT),
            mc_rng: stream_rng(cfg.seed, SALT_MC),
            perturb_rng: stream_rng(cfg.seed, SALT_PERTURB),
            cfg,
            seg,
            disc_mask,
            disc_edge,
            adam,
            epoch: 0,
            step: 0,
            best_metric: None,
            history: Vec::new(),
            skipped_counts: BTreeMap::new(),
        })
    }
}

fn to_f32_mask(m: &Array4<u8>) -> ArrayD<f32> {
    m.mapv(f32::from).into_dyn()
}

/// Plain (no-grad) mean of feats (N,D,H,W) over a (N,1,H,W) selection mask.
fn detached_prototype(feats: &ArrayD<f32>, sel: &ArrayD<f32>) -> Option<ArrayD<f32>> {
    let shape = feats.shape();
    let (n, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut sums = vec![0.0f64; d];
    let mut count = 0usize;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if sel[[ni, 0, y, x]] > 0.5 {
                    count += 1;
                    for k in 0..d {
                        sums[k] += feats[[ni, k, y, x]] as f64;
                    }
                }
            }
        }
    }
    if count == 0 {
        return None;
    }
    Some(
        ndarray::Array1::from_iter(sums.iter().map(|&s| (s / count as f64) as f32)).into_dyn(),
    )
}

/// One alternating update: segmentation step on the weighted total with the
/// discriminators frozen, then one SGD step per discriminator (on detached
/// prediction maps). Returns the loss report plus both discriminator losses.
pub fn train_step(
    state: &mut TrainState,
    src: &SourceBatch,
    tgt: &TargetBatch,
    dump_dir: Option<&Path>,
) -> Result<(LossReport, f64, f64)> {
    let cfg = state.cfg.clone();
    let mode = cfg.sum_mode();
    let category_on = state.epoch >= cfg.warmup_epochs;
    let l1 = cfg.lambda1;
    let l2 = if category_on { cfg.lambda2 } else { 0.0 };
    let l3 = if category_on { cfg.lambda3 } else { 0.0 };
    let l4 = if category_on { cfg.lambda4 } else { 0.0 };

    let mut tape = Tape::<f32>::new();
    let seg_bound = state.seg.bind(&mut tape);
    let feat_c = state.seg.feature_dim();

    // Source pass with training dropout.
    let n_src = src.images.dim().0;
    let src_drop = (cfg.dropout_rate > 0.0)
        .then(|| spatial_dropout_mask(n_src, feat_c, cfg.dropout_rate, &mut state.dropout_rng));
    let xs = tape.constant(src.images.clone().into_dyn());
    let out_s = state
        .seg
        .forward_tape(&mut tape, &seg_bound, xs, src_drop.as_ref());
    let y_m = tape.constant(src.masks.clone().into_dyn());
    let y_e = tape.constant(src.edges.clone().into_dyn());
    let sup = losses::supervised_loss(&mut tape, out_s.mask_probs, y_m, cfg.sup_loss)?;
    let edge = losses::edge_loss(&mut tape, out_s.edge_probs, y_e, mode)?;

    // Target clean pass (dropout off): adversarial outputs, features for
    // prototypes, and the base for pseudo-labels.
    let need_target = l1 > 0.0 || l2 > 0.0 || l4 > 0.0;
    let out_t = need_target.then(|| {
        let xt = tape.constant(tgt.images.clone().into_dyn());
        state.seg.forward_tape(&mut tape, &seg_bound, xt, None)
    });

    let mut adv = None;
    if l1 > 0.0 {
        let ot = out_t.as_ref().unwrap();
        let dm_bound = state.disc_mask.bind_frozen(&mut tape);
        let dm = state
            .disc_mask
            .forward_tape(&mut tape, &dm_bound, ot.mask_probs);
        let de_bound = state.disc_edge.bind_frozen(&mut tape);
        let de = state
            .disc_edge
            .forward_tape(&mut tape, &de_bound, ot.edge_probs);
        adv = Some(losses::adversarial_generator_loss(&mut tape, dm, de));
    }

    // MC uncertainty on the detached target features.
    struct Pseudo {
        proto_sel: Array4<u8>,  // hard (MC mean at beta) AND reliable at xi
        clean_hard: Array4<u8>, // dropout-off pseudo-labels for consistency
        reliable_mu: Array4<u8>,
    }
    let mut pseudo = None;
    if l2 > 0.0 || l4 > 0.0 {
        let ot = out_t.as_ref().unwrap();
        let feats_half: Array4<f32> = tape
            .value(ot.feats_half)
            .clone()
            .into_dimensionality()
            .unwrap();
        let samples = state
            .seg
            .mc_from_features(&feats_half, cfg.m_passes, &mut state.mc_rng)?;
        let bundle = pu::from_mc_samples(&samples, cfg.beta, cfg.effective_xi())?;
        let p_clean: Array4<f32> = tape
            .value(ot.mask_probs)
            .clone()
            .into_dimensionality()
            .unwrap();
        let clean_hard = pu::pseudo_label(&p_clean, cfg.beta)?;
        let reliable_mu = pu::reliability_mask(&bundle.uncertainty, cfg.mu)?;
        let mut proto_sel = bundle.hard.clone();
        ndarray::Zip::from(&mut proto_sel)
            .and(&bundle.reliable)
            .for_each(|a, &r| *a &= r);
        pseudo = Some(Pseudo {
            proto_sel,
            clean_hard,
            reliable_mu,
        });
    }

    // Inter-domain prototype alignment (object classes only). The target
    // prototype must clear a minimum support, and the source prototype is
    // detached by default so the pull anchors on the supervised domain.
    let mut inter = None;
    if l2 > 0.0 {
        let ot = out_t.as_ref().unwrap();
        let ps = pseudo.as_ref().unwrap();
        let (n_tgt, _, h, w) = tgt.images.dim();
        let mut acc = None;
        for c in [CLASS_DISC, CLASS_CUP] {
            let sel_t = ArrayD::from_shape_fn(IxDyn(&[n_tgt, 1, h, w]), |ix| {
                f32::from(ps.proto_sel[(ix[0], c, ix[2], ix[3])])
            });
            let sel_s = ArrayD::from_shape_fn(IxDyn(&[n_src, 1, h, w]), |ix| {
                src.masks[(ix[0], c, ix[2], ix[3])]
            });
            let ft = match prototype_node(&mut tape, ot.features, &sel_t) {
                Some((ft, support)) if support >= cfg.proto_min_support.max(1) => ft,
                _ => continue,
            };
            let fs = if cfg.inter_detach_source {
                let feats = tape.value(out_s.features);
                match detached_prototype(feats, &sel_s) {
                    Some(v) => tape.constant(v),
                    None => continue,
                }
            } else {
                match prototype_node(&mut tape, out_s.features, &sel_s) {
                    Some((fs, _)) => fs,
                    None => continue,
                }
            };
            let l = inter_domain_loss_node(&mut tape, fs, ft);
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l),
            });
        }
        inter = acc;
    }

    // Source discriminative loss from ground-truth selections.
    let mut dis = None;
    if l3 > 0.0 {
        let (_, _, h, w) = src.images.dim();
        let mut acc = None;
        for c in [CLASS_DISC, CLASS_CUP] {
            let obj = ArrayD::from_shape_fn(IxDyn(&[n_src, 1, h, w]), |ix| {
                src.masks[(ix[0], c, ix[2], ix[3])]
            });
            let bg = obj.mapv(|v| 1.0 - v);
            let fo = prototype_node(&mut tape, out_s.features, &obj);
            let fb = prototype_node(&mut tape, out_s.features, &bg);
            if let (Some((fo, _)), Some((fb, _))) = (fo, fb) {
                let l = discriminative_loss_node(
                    &mut tape,
                    out_s.features,
                    &obj,
                    &bg,
                    fo,
                    fb,
                    cfg.delta,
                    cfg.normalize_sums,
                );
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l),
                });
            }
        }
        dis = acc;
    }

    // Augmented consistency on a perturbed target pass (training dropout).
    let mut aug = None;
    if l4 > 0.0 {
        let ps = pseudo.as_ref().unwrap();
        let (n_tgt, _, h, w) = tgt.images.dim();
        let mut pert = Array4::<f32>::zeros((n_tgt, 3, h, w));
        for i in 0..n_tgt {
            let img = tgt
                .images
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let p = perturb(&img, &cfg.perturb, &mut state.perturb_rng);
            pert.index_axis_mut(ndarray::Axis(0), i).assign(&p);
        }
        let pert_drop = (cfg.dropout_rate > 0.0)
            .then(|| spatial_dropout_mask(n_tgt, feat_c, cfg.dropout_rate, &mut state.dropout_rng));
        let xp = tape.constant(pert.into_dyn());
        let out_p = state
            .seg
            .forward_tape(&mut tape, &seg_bound, xp, pert_drop.as_ref());
        let hard = to_f32_mask(&ps.clean_hard);
        let rel = to_f32_mask(&ps.reliable_mu);
        aug = losses::consistency_loss(&mut tape, out_p.mask_probs, &hard, &rel, mode)?;
    }

    let terms = LossTerms {
        sup,
        edge,
        adv,
        inter,
        dis,
        aug,
    };
    let (total, report) = losses::assemble_total(&mut tape, &terms, [l1, l2, l3, l4])
        .map_err(|e| dump_diagnostics(e, state, src, tgt, dump_dir))?;
    for name in &report.skipped_terms {
        *state.skipped_counts.entry(name.clone()).or_insert(0) += 1;
    }

    // Segmentation update.
    let lr = lr_schedule(&cfg, state.epoch);
    let grads = tape.backward(total);
    let gvec: Vec<Option<&ArrayD<f32>>> =
        seg_bound.vars.iter().map(|v| grads.get(*v)).collect();
    state.adam.step(&mut state.seg.params, &gvec, lr);

    // Discriminator updates on detached prediction maps.
    let (d_mask_loss, d_edge_loss) = if l1 > 0.0 {
        let ot = out_t.as_ref().unwrap();
        let p_m_s = tape.value(out_s.mask_probs).clone();
        let p_m_t = tape.value(ot.mask_probs).clone();
        let p_e_s = tape.value(out_s.edge_probs).clone();
        let p_e_t = tape.value(ot.edge_probs).clone();
        drop(grads);
        drop(tape);
        let dm = disc_step(&mut state.disc_mask, &p_m_s, &p_m_t, cfg.disc_lr)?;
        let de = disc_step(&mut state.disc_edge, &p_e_s, &p_e_t, cfg.disc_lr)?;
        (dm, de)
    } else {
        (0.0, 0.0)
    };

    state.step += 1;
    Ok((report, d_mask_loss, d_edge_loss))
}

fn disc_step(
    disc: &mut Discriminator,
    p_src: &ArrayD<f32>,
    p_tgt: &ArrayD<f32>,
    lr: f32,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let bound = disc.bind(&mut tape);
    let s = tape.constant(p_src.clone());
    let t = tape.constant(p_tgt.clone());
    let ls = disc.forward_tape(&mut tape, &bound, s);
    let lt = disc.forward_tape(&mut tape, &bound, t);
    let loss = losses::discriminator_loss(&mut tape, ls, lt);
    let v = tape.scalar(loss) as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            term: "discriminator".to_string(),
            dump: "-".to_string(),
        });
    }
    let grads = tape.backward(loss);
    let gvec: Vec<Option<&ArrayD<f32>>> = bound.vars.iter().map(|v| grads.get(*v)).collect();
    sgd_step(&mut disc.params, &gvec, lr);
    Ok(v)
}

fn dump_diagnostics(
    err: Error,
    state: &TrainState,
    src: &SourceBatch,
    tgt: &TargetBatch,
    dump_dir: Option<&Path>,
) -> Error {
    let Error::NonFinite { term, .. } = &err else {
        return err;
    };
    let hash = |a: &Array4<f32>| -> String {
        let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
        format!("{:016x}", fnv1a64(&bytes))
    };
    let diag = serde_json::json!({
        "term": term,
        "step": state.step,
        "epoch": state.epoch,
        "source_batch_hash": hash(&src.images),
        "target_batch_hash": hash(&tgt.images),
        "seg_param_hash": format!("{:016x}", state.seg.params.content_hash()),
    });
    let path = match dump_dir {
        Some(dir) => {
            let p = dir.join(format!("nonfinite_step{}.json", state.step));
            let _ = fs::write(&p, serde_json::to_vec_pretty(&diag).unwrap());
            p.display().to_string()
        }
        None => "-".to_string(),
    };
    Error::NonFinite {
        term: term.clone(),
        dump: path,
    }
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

/// Artifacts of one training run.
pub struct FitResult {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_metric: Option<f64>,
}

fn write_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config_hash: state.cfg.config_hash(),
        epoch: state.epoch,
        step: state.step,
        best_metric: state.best_metric,
        metric_history: serde_json::to_value(&state.history).unwrap_or_default(),
        seg_config: state.seg.cfg.clone(),
        disc_config: state.disc_mask.cfg.clone(),
        extra: serde_json::json!({
            "train_config": &state.cfg,
            "skipped_counts": &state.skipped_counts,
        }),
    };
    // Assemble a borrowed view without cloning parameters.
    let ckpt = Checkpoint {
        meta,
        seg: SegNet {
            cfg: state.seg.cfg.clone(),
            params: state.seg.params.clone(),
        },
        disc_mask: Discriminator {
            cfg: state.disc_mask.cfg.clone(),
            params: state.disc_mask.params.clone(),
        },
        disc_edge: Discriminator {
            cfg: state.disc_edge.cfg.clone(),
            params: state.disc_edge.params.clone(),
        },
    };
    save_checkpoint(path, &ckpt)
}

/// Train on a labelled source set and an unlabelled target set. When a
/// labelled validation split is given, Dice is evaluated each `eval_every`
/// epochs (benchmarking only; labels never reach any loss) and the best
/// checkpoint by mean Dice is kept. Writes `checkpoints/`, `metrics.jsonl`
/// and `config.resolved.json` under `out_dir`.
pub fn fit(
    cfg: &TrainConfig,
    source: &Dataset,
    target_train: &Dataset,
    target_val: Option<&Dataset>,
    out_dir: &Path,
) -> Result<FitResult> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::validation("source dataset is empty"));
    }
    if target_train.is_empty() {
        return Err(Error::validation("target dataset is empty"));
    }
    if !source.is_labeled() {
        return Err(Error::validation("source dataset must be fully labelled"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(
        out_dir.join("config.resolved.json"),
        serde_json::to_vec_pretty(cfg).expect("config serializes"),
    )
    .map_err(|e| Error::io(out_dir.join("config.resolved.json"), e))?;

    let prep_src = prepare(source, cfg.input_size, true)?;
    let prep_tgt = prepare(target_train, cfg.input_size, false)?;

    let mut state = TrainState::new(cfg.clone())?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );

    let ckpt_dir = out_dir.join("checkpoints");
    let best_path = ckpt_dir.join("best.ckpt");
    let final_path = ckpt_dir.join("final.ckpt");
    let mut have_best = false;

    let n_src = prep_src.images.len();
    let n_tgt = prep_tgt.images.len();
    let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
    tgt_order.shuffle(&mut state.shuffle_rng);
    let mut tgt_cursor = 0usize;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = lr_schedule(cfg, epoch) as f64;
        let mut order: Vec<usize> = (0..n_src).collect();
        order.shuffle(&mut state.shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let src_batch = gather_source(&prep_src, chunk);
            let mut tgt_idx = Vec::with_capacity(chunk.len());
            for _ in 0..chunk.len() {
                if tgt_cursor >= n_tgt {
                    tgt_order.shuffle(&mut state.shuffle_rng);
                    tgt_cursor = 0;
                }
                tgt_idx.push(tgt_order[tgt_cursor]);
                tgt_cursor += 1;
            }
            let tgt_batch = gather_target(&prep_tgt, &tgt_idx);
            let step_idx = state.step;
            let (report, d_mask, d_edge) =
                train_step(&mut state, &src_batch, &tgt_batch, Some(out_dir))?;
            let line = StepRecord {
                kind: "step",
                step: step_idx,
                epoch,
                seg_lr: lr,
                sup: report.sup,
                edge: report.edge,
                adv: report.adv,
                inter: report.inter,
                dis: report.dis,
                aug: report.aug,
                total: report.total,
                skipped: &report.skipped_terms,
                d_mask,
                d_edge,
            };
            serde_json::to_writer(&mut metrics, &line)
                .map_err(|e| Error::Checkpoint(format!("metrics: {e}")))?;
            metrics
                .write_all(b"\n")
                .map_err(|e| Error::io(&metrics_path, e))?;
        }

        if let Some(val) = target_val {
            if val.is_labeled() && (epoch + 1) % cfg.eval_every == 0 {
                let r = crate::evaluation::evaluate_model(&state.seg, val, cfg.beta)?;
                let mean = 0.5 * (r.dice_disc + r.dice_cup);
                let rec = EpochRecord {
                    epoch,
                    seg_lr: lr,
                    dice_disc: Some(r.dice_disc),
                    dice_cup: Some(r.dice_cup),
                    mean_dice: Some(mean),
                };
                serde_json::to_writer(
                    &mut metrics,
                    &EpochLine {
                        kind: "epoch",
                        record: &rec,
                    },
                )
                .map_err(|e| Error::Checkpoint(format!("metrics: {e}")))?;
                metrics
                    .write_all(b"\n")
                    .map_err(|e| Error::io(&metrics_path, e))?;
                state.history.push(rec);
                if state.best_metric.map(|b| mean > b).unwrap_or(true) {
                    state.best_metric = Some(mean);
                    write_checkpoint(&state, &best_path)?;
                    have_best = true;
                }
            }
        } else {
            let rec = EpochRecord {
                epoch,
                seg_lr: lr,
                dice_disc: None,
                dice_cup: None,
                mean_dice: None,
            };
            state.history.push(rec);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    write_checkpoint(&state, &final_path)?;

    Ok(FitResult {
        final_checkpoint: final_path,
        best_checkpoint: have_best.then_some(best_path),
        metrics_path,
        history: state.history.clone(),
        best_metric: state.best_metric,
    })
}

/// Pick the checkpoint the spec's model-selection rule prefers: best
/// validation Dice when it exists, else the final epoch.
pub fn selected_checkpoint(result: &FitResult) -> &Path {
    result
        .best_checkpoint
        .as_deref()
        .unwrap_or(&result.final_checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_benchmark, ShiftPreset};

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.input_size = 32;
        cfg.widths = [4, 6, 8, 10, 12];
        cfg.disc_widths = [6, 8, 10];
        cfg.batch_size = 2;
        cfg.epochs = 1;
        cfg.warmup_epochs = 0;
        cfg.m_passes = 3;
        cfg
    }

    fn tiny_data(n_src: usize, n_tgt: usize) -> (Dataset, Dataset) {
        let b = generate_benchmark(ShiftPreset::Mild, n_src, n_tgt, 0, 32, 9).unwrap();
        (b.source, b.target_train)
    }

    #[test]
    fn lr_schedule_matches_step_decay() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 1e-3);
        assert!((lr_schedule(&cfg, 100) - 2e-4).abs() < 1e-9);
        assert!((lr_schedule(&cfg, 250) - 4e-5).abs() < 1e-9);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::desk();
        cfg.beta = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.m_passes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::desk();
        cfg.input_size = 50;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn set_field_overrides_nested_and_flat() {
        let mut cfg = TrainConfig::desk();
        cfg.set_field("lambda2", "0").unwrap();
        assert_eq!(cfg.lambda2, 0.0);
        cfg.set_field("ugna", "false").unwrap();
        assert!(!cfg.ugna);
        cfg.set_field("perturb.hue", "0.1").unwrap();
        assert!((cfg.perturb.hue - 0.1).abs() < 1e-7);
        cfg.set_field("sup_loss", "\"bce\"").unwrap();
        assert_eq!(cfg.sup_loss, SupLossForm::Bce);
        assert!(cfg.set_field("no_such_field", "1").is_err());
    }

    #[test]
    fn ablation_degenerate_step_ignores_target() {
        // With every lambda at 0, the target batch must not affect anything.
        let mut cfg = tiny_cfg();
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        cfg.lambda3 = 0.0;
        cfg.lambda4 = 0.0;
        let (src, tgt) = tiny_data(2, 2);
        let prep_src = prepare(&src, 32, true).unwrap();
        let prep_tgt = prepare(&tgt, 32, false).unwrap();
        let sb = gather_source(&prep_src, &[0, 1]);
        let tb1 = gather_target(&prep_tgt, &[0, 1]);
        let tb2 = TargetBatch {
            images: Array4::from_elem(tb1.images.dim(), 0.123),
        };

        let mut s1 = TrainState::new(cfg.clone()).unwrap();
        let (r1, dm1, de1) = train_step(&mut s1, &sb, &tb1, None).unwrap();
        let mut s2 = TrainState::new(cfg).unwrap();
        let (r2, dm2, de2) = train_step(&mut s2, &sb, &tb2, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!((dm1, de1), (dm2, de2));
        assert_eq!(
            s1.seg.params.content_hash(),
            s2.seg.params.content_hash(),
            "all-zero lambdas must reduce to supervised+edge training"
        );
        assert!(r1.skipped_terms.contains(&"adv".to_string()));
    }

    #[test]
    fn deterministic_steps_are_identical() {
        let cfg = tiny_cfg();
        let (src, tgt) = tiny_data(2, 2);
        let prep_src = prepare(&src, 32, true).unwrap();
        let prep_tgt = prepare(&tgt, 32, false).unwrap();
        let sb = gather_source(&prep_src, &[0, 1]);
        let tb = gather_target(&prep_tgt, &[0, 1]);
        let run = || {
            let mut s = TrainState::new(cfg.clone()).unwrap();
            let (r, dm, de) = train_step(&mut s, &sb, &tb, None).unwrap();
            (r, dm, de, s.seg.params.content_hash())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.3, b.3);
        assert_eq!((a.1, a.2), (b.1, b.2));
    }

    #[test]
    fn disc_updates_do_not_touch_seg_and_vice_versa() {
        let cfg = tiny_cfg();
        let (src, tgt) = tiny_data(2, 2);
        let prep_src = prepare(&src, 32, true).unwrap();
        let prep_tgt = prepare(&tgt, 32, false).unwrap();
        let sb = gather_source(&prep_src, &[0, 1]);
        let tb = gather_target(&prep_tgt, &[0, 1]);
        let mut s = TrainState::new(cfg).unwrap();
        let seg_before = s.seg.params.content_hash();
        let dm_before = s.disc_mask.params.content_hash();
        let de_before = s.disc_edge.params.content_hash();
        train_step(&mut s, &sb, &tb, None).unwrap();
        assert_ne!(s.seg.params.content_hash(), seg_before, "seg must update");
        assert_ne!(s.disc_mask.params.content_hash(), dm_before);
        assert_ne!(s.disc_edge.params.content_hash(), de_before);

        // A pure discriminator step leaves segmentation parameters alone.
        let seg_mid = s.seg.params.content_hash();
        let p = ArrayD::from_elem(IxDyn(&[2, 2, 32, 32]), 0.5f32);
        disc_step(&mut s.disc_mask, &p, &p, 1e-3).unwrap();
        assert_eq!(s.seg.params.content_hash(), seg_mid);
    }

    #[test]
    fn descent_on_fixed_batch_reduces_supervised_loss() {
        // Run-and-assert over 5 seeds: after a few supervised-only steps on
        // one tiny batch, the supervised loss must drop for most seeds.
        let mut improved = 0;
        for seed in 0..5 {
            let mut cfg = tiny_cfg();
            cfg.lambda1 = 0.0;
            cfg.lambda2 = 0.0;
            cfg.lambda3 = 0.0;
            cfg.lambda4 = 0.0;
            cfg.dropout_rate = 0.0;
            cfg.seed = seed;
            let (src, tgt) = tiny_data(2, 2);
            let prep_src = prepare(&src, 32, true).unwrap();
            let prep_tgt = prepare(&tgt, 32, false).unwrap();
            let sb = gather_source(&prep_src, &[0, 1]);
            let tb = gather_target(&prep_tgt, &[0, 1]);
            let mut s = TrainState::new(cfg).unwrap();
            let (first, _, _) = train_step(&mut s, &sb, &tb, None).unwrap();
            for _ in 0..4 {
                train_step(&mut s, &sb, &tb, None).unwrap();
            }
            let (last, _, _) = train_step(&mut s, &sb, &tb, None).unwrap();
            if last.sup < first.sup {
                improved += 1;
            }
        }
        assert!(improved >= 4, "sup loss fell in only {improved}/5 seeds");
    }

    #[test]
    fn fit_smoke_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let (src, tgt) = tiny_data(2, 2);
        let val = src.clone();
        let result = fit(&cfg, &src, &tgt, Some(&val), dir.path()).unwrap();
        assert!(result.final_checkpoint.exists());
        assert!(result.metrics_path.exists());
        assert!(dir.path().join("config.resolved.json").exists());
        let metrics = fs::read_to_string(&result.metrics_path).unwrap();
        assert!(metrics.lines().count() >= 2);
        assert!(metrics.contains("\"type\":\"step\""));
        assert!(metrics.contains("\"type\":\"epoch\""));
        // model selection prefers best-val when labels exist
        assert!(result.best_checkpoint.is_some());
        assert_eq!(selected_checkpoint(&result), result.best_checkpoint.as_deref().unwrap());
    }

    #[test]
    fn fit_rejects_empty_or_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let (src, mut tgt) = tiny_data(2, 2);
        let empty = Dataset::default();
        assert!(fit(&cfg, &empty, &tgt, None, dir.path()).is_err());
        assert!(fit(&cfg, &src, &empty, None, dir.path()).is_err());
        for s in &mut tgt.samples {
            s.masks = None;
        }
        // unlabeled source is rejected
        assert!(fit(&cfg, &tgt, &src, None, dir.path()).is_err());
    }

    #[test]
    fn target_labels_never_influence_training() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        let (src, tgt) = tiny_data(3, 3);
        let mut tgt_zeroed = tgt.clone();
        for s in &mut tgt_zeroed.samples {
            if let Some(m) = &mut s.masks {
                m.disc.fill(0);
                m.cup.fill(0);
            }
        }
        fit(&cfg, &src, &tgt, None, dir1.path()).unwrap();
        fit(&cfg, &src, &tgt_zeroed, None, dir2.path()).unwrap();
        let m1 = fs::read(dir1.path().join("metrics.jsonl")).unwrap();
        let m2 = fs::read(dir2.path().join("metrics.jsonl")).unwrap();
        assert_eq!(m1, m2, "loss sequences must be identical");
    }

    #[test]
    fn rerun_with_same_seed_reproduces_metrics() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let (src, tgt) = tiny_data(3, 2);
        let val = src.clone();
        fit(&cfg, &src, &tgt, Some(&val), dir1.path()).unwrap();
        fit(&cfg, &src, &tgt, Some(&val), dir2.path()).unwrap();
        let m1 = fs::read(dir1.path().join("metrics.jsonl")).unwrap();
        let m2 = fs::read(dir2.path().join("metrics.jsonl")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn warmup_skips_category_terms() {
        let mut cfg = tiny_cfg();
        cfg.warmup_epochs = 5;
        let (src, tgt) = tiny_data(2, 2);
        let prep_src = prepare(&src, 32, true).unwrap();
        let prep_tgt = prepare(&tgt, 32, false).unwrap();
        let sb = gather_source(&prep_src, &[0, 1]);
        let tb = gather_target(&prep_tgt, &[0, 1]);
        let mut s = TrainState::new(cfg).unwrap();
        let (r, _, _) = train_step(&mut s, &sb, &tb, None).unwrap();
        for term in ["inter", "dis", "aug"] {
            assert!(r.skipped_terms.contains(&term.to_string()), "{term}");
        }
        assert!(!r.skipped_terms.contains(&"adv".to_string()));
    }
}
