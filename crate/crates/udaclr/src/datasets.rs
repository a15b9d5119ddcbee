//! Synthetic domain-shifted benchmark generation, real-data ingestion,
//! edge-label derivation, and the photometric perturbation function.
//!
//! Images are H×W×3 `f32` in [0,1] (stored CHW); masks are per-class binary
//! maps with the nested convention cup ⊆ disc. Mask PNG coding is
//! 0 = background, 128 = disc only, 255 = cup (cup pixels also count as disc).

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Class indices used throughout the crate.
pub const CLASS_DISC: usize = 0;
pub const CLASS_CUP: usize = 1;
pub const NUM_CLASSES: usize = 2;

/// Default side length of generated benchmark images.
pub const DEFAULT_SYNTH_SIZE: usize = 64;

/// Which domain a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

/// Per-class binary masks, nested: cup ⊆ disc.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    pub disc: Array2<u8>,
    pub cup: Array2<u8>,
}

impl Masks {
    pub fn shape(&self) -> (usize, usize) {
        self.disc.dim()
    }

    pub fn class(&self, c: usize) -> &Array2<u8> {
        match c {
            CLASS_DISC => &self.disc,
            CLASS_CUP => &self.cup,
            _ => panic!("unknown class index {c}"),
        }
    }

    /// Pixelwise nestedness check.
    pub fn is_nested(&self) -> bool {
        self.disc
            .iter()
            .zip(self.cup.iter())
            .all(|(&d, &c)| c == 0 || d == 1)
    }
}

/// One image, optionally labelled.
#[derive(Clone, Debug)]
pub struct Sample {
    /// CHW, 3 channels, values in [0,1].
    pub image: Array3<f32>,
    pub masks: Option<Masks>,
    pub domain_tag: DomainTag,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}

/// Per-class boundary maps (4-connected inner boundary).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub disc: Array2<u8>,
    pub cup: Array2<u8>,
}

impl EdgeMap {
    pub fn class(&self, c: usize) -> &Array2<u8> {
        match c {
            CLASS_DISC => &self.disc,
            CLASS_CUP => &self.cup,
            _ => panic!("unknown class index {c}"),
        }
    }
}

/// Photometric/texture knobs controlling one synthetic domain.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    /// Additive brightness offset applied after rendering.
    pub brightness_shift: f32,
    /// Multiplicative contrast about 0.5; must be > 0.
    pub contrast_scale: f32,
    /// Hue rotation in radians (RGB rotation about the gray axis).
    pub hue_rotation: f32,
    /// Gaussian blur sigma in pixels; must be ≥ 0.
    pub blur_sigma: f32,
    /// Seed for the background texture field.
    pub texture_seed: u64,
    /// Scales geometric randomness of the ellipses; must be ≥ 0.
    pub shape_jitter: f32,
}

impl DomainSpec {
    /// Neutral spec: no photometric change, moderate shape variety.
    pub fn identity() -> Self {
        DomainSpec {
            brightness_shift: 0.0,
            contrast_scale: 1.0,
            hue_rotation: 0.0,
            blur_sigma: 0.0,
            texture_seed: 11,
            shape_jitter: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_scale > 0.0) {
            return Err(Error::validation(format!(
                "contrast_scale must be > 0, got {}",
                self.contrast_scale
            )));
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::validation(format!(
                "blur_sigma must be >= 0, got {}",
                self.blur_sigma
            )));
        }
        if self.shape_jitter < 0.0 {
            return Err(Error::validation(format!(
                "shape_jitter must be >= 0, got {}",
                self.shape_jitter
            )));
        }
        Ok(())
    }
}

/// Source/target spec pair for one benchmark difficulty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPreset {
    Mild,
    Strong,
}

impl ShiftPreset {
    pub fn source_spec(self) -> DomainSpec {
        DomainSpec {
            texture_seed: 101,
            ..DomainSpec::identity()
        }
    }

    pub fn target_spec(self) -> DomainSpec {
        match self {
            ShiftPreset::Mild => DomainSpec {
                brightness_shift: -0.05,
                contrast_scale: 0.85,
                hue_rotation: 0.25,
                blur_sigma: 0.4,
                texture_seed: 202,
                shape_jitter: 1.0,
            },
            // Appearance-heavy gap: strong hue/brightness/contrast shift and
            // different texture, moderate blur so the cup stays detectable.
            ShiftPreset::Strong => DomainSpec {
                brightness_shift: -0.14,
                contrast_scale: 0.65,
                hue_rotation: 0.7,
                blur_sigma: 0.6,
                texture_seed: 303,
                shape_jitter: 1.0,
            },
        }
    }
}

impl std::str::FromStr for ShiftPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(ShiftPreset::Mild),
            "strong" => Ok(ShiftPreset::Strong),
            other => Err(Error::config(format!(
                "unknown shift preset `{other}` (expected mild|strong)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    rot: f32,
}

impl Ellipse {
    /// Normalized squared radius: < 1 inside.
    fn q(&self, x: f32, y: f32) -> f32 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.rot.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

/// Generate one sample at the default size. Deterministic in `(spec, seed)`.
pub fn generate_synthetic_sample(spec: &DomainSpec, rng_seed: u64) -> Result<Sample> {
    generate_synthetic_sample_sized(spec, rng_seed, DEFAULT_SYNTH_SIZE)
}

/// Generate one sample of side `size`.
///
/// Geometry (disc ellipse with a strictly interior cup ellipse, vessel
/// curves) is drawn from `rng_seed`; the background texture field comes from
/// `texture_seed ^ rng_seed`; photometric fields are applied afterwards so
/// that masks are independent of them.
pub fn generate_synthetic_sample_sized(
    spec: &DomainSpec,
    rng_seed: u64,
    size: usize,
) -> Result<Sample> {
    spec.validate()?;
    let s = size as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let j = spec.shape_jitter;

    // Disc ellipse near the centre.
    let disc = Ellipse {
        cx: s * (0.5 + 0.10 * j * rng.random_range(-1.0f32..1.0)),
        cy: s * (0.5 + 0.10 * j * rng.random_range(-1.0f32..1.0)),
        rx: s * (0.24 + 0.05 * j * rng.random_range(-1.0f32..1.0)),
        ry: s * (0.24 + 0.05 * j * rng.random_range(-1.0f32..1.0)),
        rot: rng.random_range(0.0..PI),
    };
    // Cup: same orientation, scaled radii, small interior offset.
    let ratio = 0.42 + 0.12 * j.min(1.5) * rng.random_range(-1.0f32..1.0);
    let ratio = ratio.clamp(0.25, 0.68);
    let rmin = disc.rx.min(disc.ry);
    let max_off = (1.0 - ratio) * 0.5 * rmin;
    let off_ang = rng.random_range(0.0..2.0 * PI);
    let off_mag = rng.random_range(0.0..max_off);
    let cup = Ellipse {
        cx: disc.cx + off_mag * off_ang.cos(),
        cy: disc.cy + off_mag * off_ang.sin(),
        rx: disc.rx * ratio,
        ry: disc.ry * ratio,
        rot: disc.rot,
    };

    // Rasterize masks from pixel centres; cup is forced inside disc.
    let mut disc_mask = Array2::<u8>::zeros((size, size));
    let mut cup_mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            if disc.q(fx, fy) < 1.0 {
                disc_mask[(y, x)] = 1;
                if cup.q(fx, fy) < 1.0 {
                    cup_mask[(y, x)] = 1;
                }
            }
        }
    }

    // Background texture: low-frequency sinusoid mixture + fine grain.
    let mut trng = ChaCha8Rng::seed_from_u64(spec.texture_seed ^ rng_seed.rotate_left(17));
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                trng.random_range(0.5..2.5) * 2.0 * PI / s,
                trng.random_range(0.5..2.5) * 2.0 * PI / s,
                trng.random_range(0.0..2.0 * PI),
                trng.random_range(0.02..0.05),
            )
        })
        .collect();

    let bg = [0.58f32, 0.30, 0.13];
    let disc_col = [0.88f32, 0.68, 0.38];
    let cup_col = [0.97f32, 0.87, 0.58];
    let mut image = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut tex = 0.0f32;
            for &(kx, ky, ph, amp) in &waves {
                tex += amp * (kx * fx + ky * fy + ph).sin();
            }
            tex += trng.random_range(-0.015f32..0.015);
            // Soft 1.5px rim so the boundary is not a hard step.
            let qd = disc.q(fx, fy);
            let qc = cup.q(fx, fy);
            let rim = |q: f32| ((1.0 - q) * 6.0).clamp(0.0, 1.0);
            let wd = rim(qd);
            let wc = rim(qc);
            for ch in 0..3 {
                let mut v = bg[ch] + tex;
                v = v * (1.0 - wd) + (disc_col[ch] + 0.5 * tex) * wd;
                v = v * (1.0 - wc) + (cup_col[ch] + 0.3 * tex) * wc;
                image[(ch, y, x)] = v.clamp(0.0, 1.0);
            }
        }
    }

    // Vessel-like dark curves radiating from near the disc centre.
    let n_vessels = rng.random_range(4..=7);
    for _ in 0..n_vessels {
        let mut px = disc.cx + rng.random_range(-2.0f32..2.0);
        let mut py = disc.cy + rng.random_range(-2.0f32..2.0);
        let mut ang = rng.random_range(0.0..2.0 * PI);
        let curl = rng.random_range(-0.12f32..0.12);
        let steps = (s * 0.9) as usize;
        let thick = rng.random_range(0.6f32..1.3);
        for _ in 0..steps {
            ang += curl + rng.random_range(-0.05f32..0.05);
            px += ang.cos() * 0.8;
            py += ang.sin() * 0.8;
            if px < 0.0 || py < 0.0 || px >= s || py >= s {
                break;
            }
            let r = thick.ceil() as isize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (px as isize + dx, py as isize + dy);
                    if qx < 0 || qy < 0 || qx >= size as isize || qy >= size as isize {
                        continue;
                    }
                    let d2 = (dx * dx + dy * dy) as f32;
                    if d2 <= thick * thick {
                        for (ch, f) in [0.55f32, 0.42, 0.40].iter().enumerate() {
                            let v = &mut image[(ch, qy as usize, qx as usize)];
                            *v *= f;
                        }
                    }
                }
            }
        }
    }

    // Photometric fields of the spec, applied after geometry.
    apply_contrast(&mut image, spec.contrast_scale);
    apply_brightness(&mut image, spec.brightness_shift);
    apply_hue_rotation(&mut image, spec.hue_rotation);
    if spec.blur_sigma > 0.0 {
        gaussian_blur(&mut image, spec.blur_sigma);
    }
    clip01(&mut image);

    Ok(Sample {
        image,
        masks: Some(Masks {
            disc: disc_mask,
            cup: cup_mask,
        }),
        domain_tag: DomainTag::Source,
        id: format!("synth_{rng_seed}"),
    })
}

// ---------------------------------------------------------------------------
// Photometric primitives
// ---------------------------------------------------------------------------

fn clip01(img: &mut Array3<f32>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn apply_brightness(img: &mut Array3<f32>, shift: f32) {
    if shift != 0.0 {
        img.mapv_inplace(|v| v + shift);
    }
}

fn apply_contrast(img: &mut Array3<f32>, scale: f32) {
    if scale != 1.0 {
        img.mapv_inplace(|v| (v - 0.5) * scale + 0.5);
    }
}

/// Scale saturation: blend each pixel with its luma.
fn apply_saturation(img: &mut Array3<f32>, scale: f32) {
    if scale == 1.0 {
        return;
    }
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let r = img[(0, y, x)];
            let g = img[(1, y, x)];
            let b = img[(2, y, x)];
            let luma = 0.299 * r + 0.587 * g + 0.114 * b;
            img[(0, y, x)] = luma + (r - luma) * scale;
            img[(1, y, x)] = luma + (g - luma) * scale;
            img[(2, y, x)] = luma + (b - luma) * scale;
        }
    }
}

/// Rotate RGB about the gray axis by `angle` radians (hue shift).
fn apply_hue_rotation(img: &mut Array3<f32>, angle: f32) {
    if angle == 0.0 {
        return;
    }
    let c = angle.cos();
    let s = angle.sin();
    let third = 1.0 / 3.0;
    let sq = (1.0f32 / 3.0).sqrt();
    // Rodrigues rotation matrix about (1,1,1)/sqrt(3).
    let m = [
        [
            c + (1.0 - c) * third,
            third * (1.0 - c) - sq * s,
            third * (1.0 - c) + sq * s,
        ],
        [
            third * (1.0 - c) + sq * s,
            c + third * (1.0 - c),
            third * (1.0 - c) - sq * s,
        ],
        [
            third * (1.0 - c) - sq * s,
            third * (1.0 - c) + sq * s,
            c + third * (1.0 - c),
        ],
    ];
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let v = [img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]];
            for ch in 0..3 {
                img[(ch, y, x)] = m[ch][0] * v[0] + m[ch][1] * v[1] + m[ch][2] * v[2];
            }
        }
    }
}

/// Separable Gaussian blur with replicate padding (constants stay constant).
fn gaussian_blur(img: &mut Array3<f32>, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-((i * i) as f64) / (2.0 * sigma as f64 * sigma as f64)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let (ch, h, w) = img.dim();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..ch {
        // horizontal
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let xi = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                    acc += kv * img[(c, y, xi as usize)] as f64;
                }
                tmp[y * w + x] = acc as f32;
            }
        }
        // vertical
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let yi = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                    acc += kv * tmp[yi as usize * w + x] as f64;
                }
                img[(c, y, x)] = acc as f32;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Perturbation function (target-side consistency augmentation)
// ---------------------------------------------------------------------------

/// Ranges for the random photometric perturbation. All-zero ranges give the
/// identity. Purely photometric: labels transfer unchanged.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbConfig {
    /// Max multiplicative brightness deviation (factor in [1-b, 1+b]).
    pub brightness: f32,
    /// Max multiplicative contrast deviation.
    pub contrast: f32,
    /// Max multiplicative saturation deviation.
    pub saturation: f32,
    /// Max hue rotation in radians.
    pub hue: f32,
    /// Gaussian blur sigma drawn from [0, max_blur_sigma].
    pub max_blur_sigma: f32,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.35,
            max_blur_sigma: 1.2,
        }
    }
}

impl PerturbConfig {
    pub fn identity() -> Self {
        PerturbConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            max_blur_sigma: 0.0,
        }
    }
}

/// Apply random colour jitter then Gaussian blur. Output clipped to [0,1];
/// geometry untouched.
pub fn perturb(image: &Array3<f32>, cfg: &PerturbConfig, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut out = image.clone();
    let b = 1.0 + cfg.brightness * rng.random_range(-1.0f32..1.0);
    let c = 1.0 + cfg.contrast * rng.random_range(-1.0f32..1.0);
    let s = 1.0 + cfg.saturation * rng.random_range(-1.0f32..1.0);
    let h = cfg.hue * rng.random_range(-1.0f32..1.0);
    if b != 1.0 {
        out.mapv_inplace(|v| v * b);
    }
    apply_contrast(&mut out, c);
    apply_saturation(&mut out, s);
    apply_hue_rotation(&mut out, h);
    let sigma = if cfg.max_blur_sigma > 0.0 {
        rng.random_range(0.0..cfg.max_blur_sigma)
    } else {
        0.0
    };
    gaussian_blur(&mut out, sigma);
    clip01(&mut out);
    out
}

// ---------------------------------------------------------------------------
// Edge labels
// ---------------------------------------------------------------------------

fn mask_boundary(mask: &Array2<u8>) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    for &v in mask.iter() {
        if v > 1 {
            return Err(Error::validation(format!(
                "edge derivation expects binary masks, found value {v}"
            )));
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] == 0 {
                continue;
            }
            let mut boundary = false;
            if y > 0 && mask[(y - 1, x)] != 1 {
                boundary = true;
            }
            if !boundary && y + 1 < h && mask[(y + 1, x)] != 1 {
                boundary = true;
            }
            if !boundary && x > 0 && mask[(y, x - 1)] != 1 {
                boundary = true;
            }
            if !boundary && x + 1 < w && mask[(y, x + 1)] != 1 {
                boundary = true;
            }
            if boundary {
                out[(y, x)] = 1;
            }
        }
    }
    Ok(out)
}

/// Inner 4-connected boundary of each class mask. Out-of-bounds neighbours do
/// not count as differing, so an all-ones mask has an empty edge map.
pub fn derive_edge_map(masks: &Masks) -> Result<EdgeMap> {
    Ok(EdgeMap {
        disc: mask_boundary(&masks.disc)?,
        cup: mask_boundary(&masks.cup)?,
    })
}

// ---------------------------------------------------------------------------
// ROI cropping
// ---------------------------------------------------------------------------

/// Square crop of side `size` centred on the disc-mask centroid when masks
/// exist (image centre otherwise), clamped to image bounds.
pub fn crop_roi(sample: &Sample, size: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if size > h.min(w) {
        return Err(Error::validation(format!(
            "crop size {size} exceeds image bounds {h}x{w}"
        )));
    }
    let (cy, cx) = match &sample.masks {
        Some(m) => {
            let mut sy = 0usize;
            let mut sx = 0usize;
            let mut n = 0usize;
            for ((y, x), &v) in m.disc.indexed_iter() {
                if v == 1 {
                    sy += y;
                    sx += x;
                    n += 1;
                }
            }
            if n == 0 {
                (h / 2, w / 2)
            } else {
                (sy / n, sx / n)
            }
        }
        None => (h / 2, w / 2),
    };
    let y0 = cy.saturating_sub(size / 2).min(h - size);
    let x0 = cx.saturating_sub(size / 2).min(w - size);

    let image = sample
        .image
        .slice(ndarray::s![.., y0..y0 + size, x0..x0 + size])
        .to_owned();
    let masks = sample.masks.as_ref().map(|m| Masks {
        disc: m
            .disc
            .slice(ndarray::s![y0..y0 + size, x0..x0 + size])
            .to_owned(),
        cup: m
            .cup
            .slice(ndarray::s![y0..y0 + size, x0..x0 + size])
            .to_owned(),
    });
    Ok(Sample {
        image,
        masks,
        domain_tag: sample.domain_tag,
        id: sample.id.clone(),
    })
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Decode a grayscale mask plane with the 0/128/255 coding.
pub fn decode_mask(gray: &Array2<u8>) -> Result<Masks> {
    let (h, w) = gray.dim();
    let mut disc = Array2::<u8>::zeros((h, w));
    let mut cup = Array2::<u8>::zeros((h, w));
    for ((y, x), &v) in gray.indexed_iter() {
        match v {
            0 => {}
            128 => disc[(y, x)] = 1,
            255 => {
                disc[(y, x)] = 1;
                cup[(y, x)] = 1;
            }
            other => {
                return Err(Error::validation(format!(
                    "unknown mask value {other} at ({y},{x}); expected 0, 128 or 255"
                )))
            }
        }
    }
    Ok(Masks { disc, cup })
}

/// Encode nested masks back to the 0/128/255 coding.
pub fn encode_mask(masks: &Masks) -> Array2<u8> {
    let (h, w) = masks.disc.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] = if masks.cup[(y, x)] == 1 {
                255
            } else if masks.disc[(y, x)] == 1 {
                128
            } else {
                0
            };
        }
    }
    out
}

fn read_png_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn read_png_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = p.0[0];
    }
    Ok(out)
}

/// Load a sample from an RGB image file and an optional mask file.
pub fn load_sample(image_path: &Path, mask_path: Option<&Path>) -> Result<Sample> {
    let image = read_png_rgb(image_path)?;
    let (_, h, w) = image.dim();
    let masks = match mask_path {
        Some(mp) => {
            let gray = read_png_gray(mp)?;
            if gray.dim() != (h, w) {
                return Err(Error::validation(format!(
                    "mask size {:?} does not match image size ({h},{w})",
                    gray.dim()
                )));
            }
            Some(decode_mask(&gray)?)
        }
        None => None,
    };
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string());
    Ok(Sample {
        image,
        masks,
        domain_tag: DomainTag::Source,
        id,
    })
}

/// Write a sample's image (and mask, if present) as 8-bit PNGs.
pub fn save_sample(sample: &Sample, image_path: &Path, mask_path: Option<&Path>) -> Result<()> {
    let (_, h, w) = sample.image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] =
                (sample.image[(c, y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    if let Some(dir) = image_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(image_path).map_err(|e| Error::Image {
        path: image_path.to_path_buf(),
        source: e,
    })?;
    if let (Some(mp), Some(masks)) = (mask_path, &sample.masks) {
        let coded = encode_mask(masks);
        let mut mbuf = image::GrayImage::new(w as u32, h as u32);
        for (x, y, p) in mbuf.enumerate_pixels_mut() {
            p.0[0] = coded[(y as usize, x as usize)];
        }
        if let Some(dir) = mp.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        mbuf.save(mp).map_err(|e| Error::Image {
            path: mp.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset directory handling
// ---------------------------------------------------------------------------

/// An in-memory set of samples from one domain.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.masks.is_some())
    }

    /// Load `<dir>/{images,masks}/<id>.png`; masks are optional per sample.
    pub fn load_dir(dir: &Path, domain: DomainTag) -> Result<Dataset> {
        let images_dir = dir.join("images");
        let masks_dir = dir.join("masks");
        let mut entries: Vec<PathBuf> = fs::read_dir(&images_dir)
            .map_err(|e| Error::io(&images_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        entries.sort();
        let mut samples = Vec::with_capacity(entries.len());
        for img_path in entries {
            let stem = img_path.file_stem().unwrap().to_string_lossy().into_owned();
            let mask_path = masks_dir.join(format!("{stem}.png"));
            let mask = mask_path.exists().then_some(mask_path);
            let mut sample = load_sample(&img_path, mask.as_deref())?;
            sample.domain_tag = domain;
            samples.push(sample);
        }
        Ok(Dataset { samples })
    }

    /// Write samples under `<dir>/{images,masks}/`.
    pub fn save_dir(&self, dir: &Path, with_masks: bool) -> Result<()> {
        for sample in &self.samples {
            let img = dir.join("images").join(format!("{}.png", sample.id));
            let mask = with_masks.then(|| dir.join("masks").join(format!("{}.png", sample.id)));
            save_sample(sample, &img, mask.as_deref())?;
        }
        Ok(())
    }
}

/// The full synthetic benchmark: labelled source and target train sets plus
/// a labelled target test set.
pub struct SynthBenchmark {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

pub fn generate_benchmark(
    preset: ShiftPreset,
    n_source: usize,
    n_target: usize,
    n_test: usize,
    size: usize,
    seed: u64,
) -> Result<SynthBenchmark> {
    let src_spec = preset.source_spec();
    let tgt_spec = preset.target_spec();
    let mut source = Vec::with_capacity(n_source);
    for i in 0..n_source {
        let mut s = generate_synthetic_sample_sized(&src_spec, seed.wrapping_add(i as u64), size)?;
        s.id = format!("src_{i:04}");
        s.domain_tag = DomainTag::Source;
        source.push(s);
    }
    let mut target_train = Vec::with_capacity(n_target);
    for i in 0..n_target {
        let mut s = generate_synthetic_sample_sized(
            &tgt_spec,
            seed.wrapping_add(100_000 + i as u64),
            size,
        )?;
        s.id = format!("tgt_{i:04}");
        s.domain_tag = DomainTag::Target;
        target_train.push(s);
    }
    let mut target_test = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let mut s = generate_synthetic_sample_sized(
            &tgt_spec,
            seed.wrapping_add(200_000 + i as u64),
            size,
        )?;
        s.id = format!("tst_{i:04}");
        s.domain_tag = DomainTag::Target;
        target_test.push(s);
    }
    Ok(SynthBenchmark {
        source: Dataset { samples: source },
        target_train: Dataset {
            samples: target_train,
        },
        target_test: Dataset {
            samples: target_test,
        },
    })
}
