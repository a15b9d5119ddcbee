//! Pseudo-labels, Monte Carlo uncertainty, and reliability filtering.
//!
//! All functions are pure transforms over batched (N,C,H,W) probability maps.
//! Uncertainty is the per-pixel population standard deviation over the MC
//! samples; a pixel is reliable when its uncertainty is strictly below the
//! threshold. Thresholding a probability at β is inclusive (p ≥ β).

use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};

/// Thresholded predictions with their uncertainty and reliability masks.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    /// Hard labels 1[p ≥ β], (N,C,H,W).
    pub hard: Array4<u8>,
    /// Per-pixel population std over MC samples.
    pub uncertainty: Array4<f32>,
    /// 1[S < threshold].
    pub reliable: Array4<u8>,
}

/// Hard labels 1[p ≥ β] per class.
pub fn pseudo_label(p: &Array4<f32>, beta: f32) -> Result<Array4<u8>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::validation(format!(
            "pseudo-label threshold must be in (0,1), got {beta}"
        )));
    }
    Ok(p.mapv(|v| u8::from(v >= beta)))
}

/// Per-pixel population standard deviation of the MC probability samples.
pub fn uncertainty(samples: &[Array4<f32>]) -> Result<Array4<f32>> {
    if samples.len() < 2 {
        return Err(Error::validation(format!(
            "uncertainty needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].dim();
    for s in samples.iter() {
        if s.dim() != shape {
            return Err(Error::validation(format!(
                "uncertainty samples must share a shape: {:?} vs {:?}",
                s.dim(),
                shape
            )));
        }
    }
    // f64 accumulation: identical samples give an exactly-zero std.
    let m = samples.len() as f64;
    let mut mean = Array4::<f64>::zeros(shape);
    for s in samples {
        ndarray::Zip::from(&mut mean)
            .and(s)
            .for_each(|a, &b| *a += b as f64);
    }
    mean.mapv_inplace(|v| v / m);
    let mut var = Array4::<f64>::zeros(shape);
    for s in samples {
        ndarray::Zip::from(&mut var)
            .and(s)
            .and(&mean)
            .for_each(|a, &b, &mu| {
                let d = b as f64 - mu;
                *a += d * d;
            });
    }
    Ok(var.mapv(|v| (v / m).sqrt() as f32))
}

/// Mean of the MC probability samples.
pub fn mc_mean(samples: &[Array4<f32>]) -> Result<Array4<f32>> {
    if samples.is_empty() {
        return Err(Error::validation("mc_mean needs at least one sample"));
    }
    let m = samples.len() as f32;
    let mut mean = Array4::<f32>::zeros(samples[0].dim());
    for s in samples {
        mean += s;
    }
    mean.mapv_inplace(|v| v / m);
    Ok(mean)
}

/// Reliability indicator 1[S < threshold] (strict).
pub fn reliability_mask(s: &Array4<f32>, threshold: f32) -> Result<Array4<u8>> {
    if threshold < 0.0 || threshold.is_nan() {
        return Err(Error::validation(format!(
            "uncertainty threshold must be >= 0, got {threshold}"
        )));
    }
    Ok(s.mapv(|v| u8::from(v < threshold)))
}

/// Build the full pseudo-label bundle from MC samples: hard labels from the
/// MC mean at β, uncertainty from the sample std, reliability at `threshold`.
pub fn from_mc_samples(samples: &[Array4<f32>], beta: f32, threshold: f32) -> Result<PseudoLabel> {
    let mean = mc_mean(samples)?;
    let hard = pseudo_label(&mean, beta)?;
    let s = uncertainty(samples)?;
    let reliable = reliability_mask(&s, threshold)?;
    Ok(PseudoLabel {
        hard,
        uncertainty: s,
        reliable,
    })
}

/// Write per-class uncertainty heatmaps as 16-bit grayscale PNGs,
/// mapping S ∈ [0, 0.5] (the max possible std of values in [0,1]) to the
/// full u16 range. One file per image and class: `<id>_c<k>.png`.
pub fn dump_uncertainty_png(s: &Array4<f32>, dir: &Path, id: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, c, h, w) = s.dim();
    for ni in 0..n {
        for ci in 0..c {
            let mut img =
                image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for (x, y, p) in img.enumerate_pixels_mut() {
                let v = s[(ni, ci, y as usize, x as usize)].clamp(0.0, 0.5);
                p.0[0] = (v * 2.0 * 65535.0).round() as u16;
            }
            let suffix = if n > 1 {
                format!("{id}_{ni}_c{ci}.png")
            } else {
                format!("{id}_c{ci}.png")
            };
            let path = dir.join(suffix);
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
        }
    }
    Ok(())
}
