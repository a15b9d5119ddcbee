//! Dice evaluation, prediction export, the ablation runner, and SVG/Markdown
//! reports.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array2, Array4};

use crate::datasets::{encode_mask, Dataset, Masks, CLASS_CUP, CLASS_DISC};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, SegNet};
use crate::trainer::{fit, selected_checkpoint, TrainConfig};

/// Dice coefficient 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty.
pub fn dice(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::validation(format!(
            "dice: shape mismatch {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if pred.iter().chain(truth.iter()).any(|&v| v > 1) {
        return Err(Error::validation("dice expects binary masks"));
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&a, &b) in pred.iter().zip(truth.iter()) {
        inter += u64::from(a & b);
        total += u64::from(a) + u64::from(b);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Per-image Dice scores.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PerImageDice {
    pub id: String,
    pub dice_disc: f64,
    pub dice_cup: f64,
}

/// Aggregate evaluation of one model on one labelled dataset.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub dice_disc: f64,
    pub dice_cup: f64,
    pub per_image: Vec<PerImageDice>,
    pub config_id: String,
}

/// Binarize per-class probabilities at `beta` into nested-friendly masks.
pub fn binarize(probs: &Array4<f32>, beta: f32, image_index: usize) -> Masks {
    let (_, _, h, w) = probs.dim();
    let mut disc = Array2::<u8>::zeros((h, w));
    let mut cup = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            disc[(y, x)] = u8::from(probs[(image_index, CLASS_DISC, y, x)] >= beta);
            cup[(y, x)] = u8::from(probs[(image_index, CLASS_CUP, y, x)] >= beta);
        }
    }
    Masks { disc, cup }
}

/// Evaluate a segmentation network on a labelled dataset: probabilities are
/// binarized at `beta`, per-image and mean Dice computed per class.
pub fn evaluate_model(seg: &SegNet, dataset: &Dataset, beta: f32) -> Result<EvalResult> {
    if !dataset.is_labeled() {
        return Err(Error::validation(
            "evaluation requires a fully labelled dataset",
        ));
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    let size = seg.cfg.input_size;
    for chunk in dataset.samples.chunks(8) {
        let mut batch = Array4::<f32>::zeros((chunk.len(), 3, size, size));
        for (i, s) in chunk.iter().enumerate() {
            let s = if s.height() == size && s.width() == size {
                s.clone()
            } else {
                crate::datasets::crop_roi(s, size)?
            };
            batch.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
        }
        let out = seg.forward(&batch, None)?;
        for (i, s) in chunk.iter().enumerate() {
            let s = if s.height() == size && s.width() == size {
                s.clone()
            } else {
                crate::datasets::crop_roi(s, size)?
            };
            let pred = binarize(&out.mask_probs, beta, i);
            let truth = s.masks.as_ref().unwrap();
            per_image.push(PerImageDice {
                id: s.id.clone(),
                dice_disc: dice(&pred.disc, &truth.disc)?,
                dice_cup: dice(&pred.cup, &truth.cup)?,
            });
        }
    }
    let n = per_image.len() as f64;
    Ok(EvalResult {
        dice_disc: per_image.iter().map(|p| p.dice_disc).sum::<f64>() / n,
        dice_cup: per_image.iter().map(|p| p.dice_cup).sum::<f64>() / n,
        per_image,
        config_id: String::new(),
    })
}

/// Evaluate a checkpoint file; optionally dump predicted masks as PNGs
/// (rendered nested: disc ∪ cup at 128/255) and uncertainty heatmaps.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Dataset,
    beta: f32,
    dump_masks: Option<&Path>,
    dump_uncertainty: Option<&Path>,
) -> Result<EvalResult> {
    let ckpt = load_checkpoint(checkpoint)?;
    let result = evaluate_model(&ckpt.seg, dataset, beta)?;
    let size = ckpt.seg.cfg.input_size;
    if dump_masks.is_some() || dump_uncertainty.is_some() {
        for s in &dataset.samples {
            let s = if s.height() == size && s.width() == size {
                s.clone()
            } else {
                crate::datasets::crop_roi(&s, size)?
            };
            let mut batch = Array4::<f32>::zeros((1, 3, size, size));
            batch.index_axis_mut(ndarray::Axis(0), 0).assign(&s.image);
            if let Some(dir) = dump_masks {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let out = ckpt.seg.forward(&batch, None)?;
                let mut pred = binarize(&out.mask_probs, beta, 0);
                // render nested: every cup pixel is also disc
                for (d, &c) in pred.disc.iter_mut().zip(pred.cup.iter()) {
                    *d |= c;
                }
                let coded = encode_mask(&pred);
                let mut img = image::GrayImage::new(size as u32, size as u32);
                for (x, y, p) in img.enumerate_pixels_mut() {
                    p.0[0] = coded[(y as usize, x as usize)];
                }
                let path = dir.join(format!("{}.png", s.id));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    source: e,
                })?;
            }
            if let Some(dir) = dump_uncertainty {
                let mut rng = rand::SeedableRng::seed_from_u64(0xD15EA5E);
                let samples = ckpt.seg.mc_forward(&batch, 10, &mut rng)?;
                let s_map = crate::pseudo_uncertainty::uncertainty(&samples)?;
                crate::pseudo_uncertainty::dump_uncertainty_png(&s_map, dir, &s.id)?;
            }
        }
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

/// One ablation configuration (a row of the toggle table).
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Source-domain category regularization (λ₃ on).
    pub src_reg: bool,
    /// Target-domain category regularization (λ₄ on).
    pub trg_reg: bool,
    /// Inter-domain category regularization (λ₂ on).
    pub inter_reg: bool,
    /// Uncertainty filtering of pseudo-labels for prototypes.
    pub ugna: bool,
}

impl AblationRow {
    pub fn new(name: &str, src_reg: bool, trg_reg: bool, inter_reg: bool, ugna: bool) -> Self {
        AblationRow {
            name: name.to_string(),
            src_reg,
            trg_reg,
            inter_reg,
            ugna,
        }
    }

    /// Derive the row's training config from a base config: toggles only
    /// zero the corresponding λ's (or disable UGNA); nothing else changes.
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        if !self.src_reg {
            cfg.lambda3 = 0.0;
        }
        if !self.trg_reg {
            cfg.lambda4 = 0.0;
        }
        if !self.inter_reg {
            cfg.lambda2 = 0.0;
        }
        cfg.ugna = self.ugna;
        cfg.seed = seed;
        cfg
    }
}

/// The eight toggle combinations of the component ablation.
pub fn table2_grid() -> Vec<AblationRow> {
    vec![
        AblationRow::new("baseline", false, false, false, true),
        AblationRow::new("src_reg", true, false, false, true),
        AblationRow::new("trg_reg", false, true, false, true),
        AblationRow::new("inter_reg", false, false, true, true),
        AblationRow::new("src_trg", true, true, false, true),
        AblationRow::new("src_inter", true, false, true, true),
        AblationRow::new("trg_inter", false, true, true, true),
        AblationRow::new("full", true, true, true, true),
    ]
}

/// The UGNA on/off pair for inter-domain regularization.
pub fn table3_pair() -> Vec<AblationRow> {
    vec![
        AblationRow::new("inter_reg_no_ugna", false, false, true, false),
        AblationRow::new("inter_reg_ugna", false, false, true, true),
    ]
}

/// Keys allowed to differ between an ablation row's config and the base.
const ALLOWED_DIFF_KEYS: &[&str] = &["lambda2", "lambda3", "lambda4", "ugna", "seed"];

fn config_diff_keys(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    let (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) = (va, vb) else {
        unreachable!("config is a JSON object");
    };
    let mut keys = Vec::new();
    for (k, v) in &ma {
        if mb.get(k) != Some(v) {
            keys.push(k.clone());
        }
    }
    keys
}

/// One trained-and-evaluated ablation cell.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub seed: u64,
    pub test: EvalResult,
    pub run_dir: PathBuf,
}

/// Train every (row, seed) combination with shared seeds and evaluate on the
/// target test set. `jobs` > 1 runs cells on that many worker threads (each
/// cell is fully independent, so results are identical either way).
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &TrainConfig,
    grid: &[AblationRow],
    seeds: &[u64],
    source: &Dataset,
    target_train: &Dataset,
    target_val: Option<&Dataset>,
    target_test: &Dataset,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<AblationOutcome>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::validation("ablation needs >= 1 row and >= 1 seed"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Config audit: every row config differs from the base only in the
    // toggled loss terms (plus the seed).
    for row in grid {
        let cfg = row.apply(base, base.seed);
        for key in config_diff_keys(base, &cfg) {
            if !ALLOWED_DIFF_KEYS.contains(&key.as_str()) {
                return Err(Error::config(format!(
                    "ablation row `{}` changed unexpected config key `{key}`",
                    row.name
                )));
            }
        }
    }

    let mut cells: Vec<(usize, AblationRow, u64)> = Vec::new();
    for row in grid {
        for &seed in seeds {
            cells.push((cells.len(), row.clone(), seed));
        }
    }

    let queue = Mutex::new(cells.clone().into_iter().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<Result<AblationOutcome>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());

    let worker = |queue: &Mutex<Vec<(usize, AblationRow, u64)>>,
                  results: &Mutex<Vec<Option<Result<AblationOutcome>>>>| {
        loop {
            let Some((idx, row, seed)) = queue.lock().unwrap().pop() else {
                break;
            };
            let cfg = row.apply(base, seed);
            let run_dir = out_dir.join(format!("{}_seed{}", row.name, seed));
            let outcome = (|| -> Result<AblationOutcome> {
                let fitres = fit(&cfg, source, target_train, target_val, &run_dir)?;
                let ckpt = selected_checkpoint(&fitres);
                let mut test = evaluate_checkpoint(ckpt, target_test, cfg.beta, None, None)?;
                test.config_id = format!("{}_seed{}", row.name, seed);
                Ok(AblationOutcome {
                    row: row.clone(),
                    seed,
                    test,
                    run_dir: run_dir.clone(),
                })
            })();
            results.lock().unwrap()[idx] = Some(outcome);
        }
    };

    if jobs <= 1 {
        worker(&queue, &results);
    } else {
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| worker(&queue, &results));
            }
        });
    }

    let mut outcomes = Vec::with_capacity(cells.len());
    for slot in results.into_inner().unwrap() {
        outcomes.push(slot.expect("worker filled every slot")?);
    }

    write_ablation_csv(&outcomes, &out_dir.join("ablation.csv"))?;
    write_ablation_report(&outcomes, out_dir)?;
    Ok(outcomes)
}

fn write_ablation_csv(outcomes: &[AblationOutcome], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(
        f,
        "config,seed,src_reg,trg_reg,inter_reg,ugna,dice_disc,dice_cup"
    )
    .map_err(|e| Error::io(path, e))?;
    for o in outcomes {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.6},{:.6}",
            o.row.name,
            o.seed,
            o.row.src_reg,
            o.row.trg_reg,
            o.row.inter_reg,
            o.row.ugna,
            o.test.dice_disc,
            o.test.dice_cup
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Mean and population std per row name, in first-appearance order.
pub fn summarize(outcomes: &[AblationOutcome]) -> Vec<(String, f64, f64, f64, f64)> {
    let mut names: Vec<String> = Vec::new();
    for o in outcomes {
        if !names.contains(&o.row.name) {
            names.push(o.row.name.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let vals: Vec<(f64, f64)> = outcomes
                .iter()
                .filter(|o| o.row.name == name)
                .map(|o| (o.test.dice_disc, o.test.dice_cup))
                .collect();
            let n = vals.len() as f64;
            let md = vals.iter().map(|v| v.0).sum::<f64>() / n;
            let mc = vals.iter().map(|v| v.1).sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v.0 - md).powi(2)).sum::<f64>() / n).sqrt();
            let sc = (vals.iter().map(|v| (v.1 - mc).powi(2)).sum::<f64>() / n).sqrt();
            (name, md, sd, mc, sc)
        })
        .collect()
}

fn write_ablation_report(outcomes: &[AblationOutcome], out_dir: &Path) -> Result<()> {
    let rows = summarize(outcomes);
    let plot_dir = out_dir.join("plots");
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.0.clone(), r.3)).collect();
    plots::bar_chart(
        &plot_dir.join("ablation_cup_dice.svg"),
        "Mean target-test cup Dice by configuration",
        &bars,
    )?;
    let bars_disc: Vec<(String, f64)> = rows.iter().map(|r| (r.0.clone(), r.1)).collect();
    plots::bar_chart(
        &plot_dir.join("ablation_disc_dice.svg"),
        "Mean target-test disc Dice by configuration",
        &bars_disc,
    )?;

    let path = out_dir.join("summary.md");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "# Ablation summary\n").map_err(|e| Error::io(&path, e))?;
    writeln!(f, "| config | dice disc (mean±std) | dice cup (mean±std) |")
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "|---|---|---|").map_err(|e| Error::io(&path, e))?;
    for (name, md, sd, mc, sc) in &rows {
        writeln!(f, "| {name} | {md:.4}±{sd:.4} | {mc:.4}±{sc:.4} |")
            .map_err(|e| Error::io(&path, e))?;
    }
    writeln!(f, "\nPlots: `plots/ablation_cup_dice.svg`, `plots/ablation_disc_dice.svg`.")
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Render loss curves and Dice-vs-epoch plots plus a Markdown report from a
/// run directory containing `metrics.jsonl`.
pub fn render_run_report(run_dir: &Path) -> Result<()> {
    let metrics_path = run_dir.join("metrics.jsonl");
    let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut total_curve = Vec::new();
    let mut sup_curve = Vec::new();
    let mut dice_disc = Vec::new();
    let mut dice_cup = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Checkpoint(format!("metrics line: {e}")))?;
        match v.get("type").and_then(|t| t.as_str()) {
            Some("step") => {
                let step = v["step"].as_f64().unwrap_or(0.0);
                total_curve.push((step, v["total"].as_f64().unwrap_or(f64::NAN)));
                sup_curve.push((step, v["sup"].as_f64().unwrap_or(f64::NAN)));
            }
            Some("epoch") => {
                let epoch = v["epoch"].as_f64().unwrap_or(0.0);
                if let Some(d) = v["dice_disc"].as_f64() {
                    dice_disc.push((epoch, d));
                }
                if let Some(d) = v["dice_cup"].as_f64() {
                    dice_cup.push((epoch, d));
                }
            }
            _ => {}
        }
    }
    let plot_dir = run_dir.join("plots");
    plots::line_chart(
        &plot_dir.join("loss_curves.svg"),
        "Training losses",
        &[
            ("total".to_string(), total_curve),
            ("sup".to_string(), sup_curve),
        ],
    )?;
    if !dice_disc.is_empty() {
        plots::line_chart(
            &plot_dir.join("dice_vs_epoch.svg"),
            "Validation Dice",
            &[
                ("disc".to_string(), dice_disc),
                ("cup".to_string(), dice_cup),
            ],
        )?;
    }
    let report = run_dir.join("report.md");
    let mut f = fs::File::create(&report).map_err(|e| Error::io(&report, e))?;
    writeln!(
        f,
        "# Training report\n\n- metrics: `metrics.jsonl`\n- loss curves: `plots/loss_curves.svg`\n- validation Dice: `plots/dice_vs_epoch.svg` (when labels were available)\n"
    )
    .map_err(|e| Error::io(&report, e))?;
    Ok(())
}

/// Tiny dependency-free SVG charts.
pub mod plots {
    use super::*;

    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    fn svg_header(title: &str) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
            W / 2.0,
            title
        )
    }

    fn finite_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in vals.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            (0.0, 1.0)
        } else if (hi - lo).abs() < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    }

    /// Polyline chart of one or more (x, y) series.
    pub fn line_chart(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (x0, x1) = finite_range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
        let (y0, y1) = finite_range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
        let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
        let mut svg = svg_header(title);
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{m}\" y=\"{lb}\" font-family=\"sans-serif\" font-size=\"11\">{x0:.1}</text>\n\
             <text x=\"{r}\" y=\"{lb}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{x1:.1}</text>\n\
             <text x=\"6\" y=\"{b}\" font-family=\"sans-serif\" font-size=\"11\">{y0:.3}</text>\n\
             <text x=\"6\" y=\"{tt}\" font-family=\"sans-serif\" font-size=\"11\">{y1:.3}</text>\n",
            m = MARGIN,
            b = H - MARGIN,
            r = W - MARGIN,
            t = MARGIN,
            lb = H - MARGIN + 16.0,
            tt = MARGIN + 4.0,
        ));
        for (i, (label, pts)) in series.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let color = COLORS[i % COLORS.len()];
            let coords: Vec<String> = pts
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
                 <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
                coords.join(" "),
                W - MARGIN - 90.0,
                MARGIN + 16.0 * (i as f64 + 1.0),
            ));
        }
        svg.push_str("</svg>\n");
        fs::write(path, svg).map_err(|e| Error::io(path, e))
    }

    /// Labelled vertical bar chart.
    pub fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (_, hi) = finite_range(bars.iter().map(|b| b.1));
        let hi = hi.max(1e-9);
        let n = bars.len().max(1) as f64;
        let bw = (W - 2.0 * MARGIN) / n;
        let mut svg = svg_header(title);
        for (i, (label, v)) in bars.iter().enumerate() {
            let x = MARGIN + i as f64 * bw;
            let bh = (v / hi) * (H - 2.0 * MARGIN);
            let y = H - MARGIN - bh;
            let color = COLORS[i % COLORS.len()];
            svg.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{color}\" opacity=\"0.8\"/>\n\
                 <text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" transform=\"rotate(30 {:.2} {})\">{label}</text>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>\n",
                x + bw * 0.1,
                bw * 0.8,
                x + bw * 0.5,
                H - MARGIN + 14.0,
                x + bw * 0.5,
                H - MARGIN + 14.0,
                x + bw * 0.5,
                y - 4.0,
            ));
        }
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n</svg>\n",
            m = MARGIN,
            b = H - MARGIN,
            r = W - MARGIN,
        ));
        fs::write(path, svg).map_err(|e| Error::io(path, e))
    }
}
