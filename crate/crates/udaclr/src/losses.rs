//! Training objectives: supervised mask loss, edge regression, augmented
//! consistency, adversarial generator/discriminator losses, and assembly of
//! the weighted total.
//!
//! All builders construct nodes on a [`Tape`] so the same code path serves
//! training (f32) and finite-difference gradient checks (f64). Probabilities
//! are clamped to [1e-7, 1-1e-7] before any logarithm. Pixel sums are
//! mean-normalized by default; `SumMode::Raw` keeps the paper's plain sums.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Probability clamp bound before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Smoothing constant of the soft-Dice denominator/numerator.
pub const DICE_EPS: f64 = 1e-6;

/// Normalization convention for pixel sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumMode {
    /// Divide every pixel/patch sum by its element count.
    Mean,
    /// Keep raw sums (resolution-dependent magnitudes).
    Raw,
}

/// Form of the supervised segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupLossForm {
    /// Mean over classes of (BCE + soft-Dice)/2.
    DiceBce,
    Bce,
    Dice,
}

fn check_same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    let sa = tape.value(a).shape();
    let sb = tape.value(b).shape();
    if sa != sb {
        return Err(Error::validation(format!(
            "{what}: shape mismatch {sa:?} vs {sb:?}"
        )));
    }
    Ok(())
}

fn norm_factor<T: Scalar>(mode: SumMode, count: usize) -> T {
    match mode {
        SumMode::Mean if count > 0 => T::one() / T::from_f64_c(count as f64),
        _ => T::one(),
    }
}

/// Elementwise clamped binary cross-entropy −[y ln p + (1−y) ln(1−p)].
fn bce_elem<T: Scalar>(tape: &mut Tape<T>, p: Var, y: Var) -> Var {
    let lo = T::from_f64_c(PROB_EPS);
    let hi = T::one() - T::from_f64_c(PROB_EPS);
    let pc = tape.clamp(p, lo, hi);
    let lp = tape.ln(pc);
    let t1 = tape.mul(y, lp);
    let one_m_p = {
        let n = tape.neg(pc);
        tape.add_scalar(n, T::one())
    };
    let one_m_y = {
        let n = tape.neg(y);
        tape.add_scalar(n, T::one())
    };
    let lq = tape.ln(one_m_p);
    let t2 = tape.mul(one_m_y, lq);
    let s = tape.add(t1, t2);
    tape.neg(s)
}

/// Stable softplus ln(1 + e^x) = relu(x) + ln(1 + e^-|x|).
fn softplus<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let a = tape.abs(x);
    let na = tape.neg(a);
    let e = tape.exp(na);
    let e1 = tape.add_scalar(e, T::one());
    let l = tape.ln(e1);
    let r = tape.relu(x);
    tape.add(r, l)
}

/// Mean BCE-with-logits against a constant label (1.0 or 0.0):
/// softplus(z) − z·y, averaged over all patches.
fn bce_logits_mean<T: Scalar>(tape: &mut Tape<T>, logits: Var, label_one: bool) -> Var {
    let sp = softplus(tape, logits);
    let per_elem = if label_one {
        tape.sub(sp, logits)
    } else {
        sp
    };
    tape.mean_all(per_elem)
}

/// Supervised loss on source predictions vs binary masks:
/// mean over classes of (BCE + soft-Dice)/2 by default.
pub fn supervised_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_m: Var,
    y: Var,
    form: SupLossForm,
) -> Result<Var> {
    check_same_shape(tape, p_m, y, "supervised_loss")?;
    let yshape = tape.value(y);
    if yshape.iter().any(|v| *v != T::zero() && *v != T::one()) {
        return Err(Error::validation(
            "supervised_loss expects binary label masks",
        ));
    }
    let classes = tape.value(p_m).shape()[1];
    let mut acc: Option<Var> = None;
    for c in 0..classes {
        let pc = tape.slice_channels(p_m, c, 1);
        let yc = tape.slice_channels(y, c, 1);
        let bce = {
            let e = bce_elem(tape, pc, yc);
            tape.mean_all(e)
        };
        let dice = {
            let eps = T::from_f64_c(DICE_EPS);
            let py = tape.mul(pc, yc);
            let inter = tape.sum_all(py);
            let num = {
                let two = tape.scale(inter, T::from_f64_c(2.0));
                tape.add_scalar(two, eps)
            };
            let sp = tape.sum_all(pc);
            let sy = tape.sum_all(yc);
            let den = {
                let s = tape.add(sp, sy);
                tape.add_scalar(s, eps)
            };
            let ratio = tape.div(num, den);
            let n = tape.neg(ratio);
            tape.add_scalar(n, T::one())
        };
        let class_loss = match form {
            SupLossForm::DiceBce => {
                let s = tape.add(bce, dice);
                tape.scale(s, T::from_f64_c(0.5))
            }
            SupLossForm::Bce => bce,
            SupLossForm::Dice => dice,
        };
        acc = Some(match acc {
            None => class_loss,
            Some(a) => tape.add(a, class_loss),
        });
    }
    let total = acc.expect("at least one class");
    Ok(tape.scale(total, T::one() / T::from_f64_c(classes as f64)))
}

/// Edge regression loss: squared error between edge probabilities and edge
/// labels, mean-normalized under `SumMode::Mean`.
pub fn edge_loss<T: Scalar>(tape: &mut Tape<T>, p_e: Var, y_e: Var, mode: SumMode) -> Result<Var> {
    check_same_shape(tape, p_e, y_e, "edge_loss")?;
    let diff = tape.sub(y_e, p_e);
    let sq = tape.mul(diff, diff);
    let n = tape.value(p_e).len();
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, norm_factor::<T>(mode, n)))
}

/// Augmented consistency loss: BCE between predictions on the perturbed
/// image and the hard pseudo-labels of the unperturbed image, restricted to
/// reliable pixels. Returns `None` (term skipped) when no pixel is reliable.
pub fn consistency_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p_pert: Var,
    hard: &ArrayD<T>,
    reliable: &ArrayD<T>,
    mode: SumMode,
) -> Result<Option<Var>> {
    if tape.value(p_pert).shape() != hard.shape() || hard.shape() != reliable.shape() {
        return Err(Error::validation(format!(
            "consistency_loss: shape mismatch {:?} vs {:?} vs {:?}",
            tape.value(p_pert).shape(),
            hard.shape(),
            reliable.shape()
        )));
    }
    let n_reliable = reliable
        .iter()
        .filter(|v| **v > T::from_f64_c(0.5))
        .count();
    if n_reliable == 0 {
        return Ok(None);
    }
    let y = tape.constant(hard.clone());
    let e = bce_elem(tape, p_pert, y);
    let m = tape.constant(reliable.clone());
    let masked = tape.mul(e, m);
    let s = tape.sum_all(masked);
    Ok(Some(tape.scale(s, norm_factor::<T>(mode, n_reliable))))
}

/// Generator-side adversarial loss: BCE of both discriminators' patch logits
/// on target predictions against label 1 (fool the discriminators).
pub fn adversarial_generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d_out_mask: Var,
    d_out_edge: Var,
) -> Var {
    let lm = bce_logits_mean(tape, d_out_mask, true);
    let le = bce_logits_mean(tape, d_out_edge, true);
    tape.add(lm, le)
}

/// Discriminator objective: BCE(source patches, 1) + BCE(target patches, 0),
/// patch-averaged.
pub fn discriminator_loss<T: Scalar>(tape: &mut Tape<T>, d_source: Var, d_target: Var) -> Var {
    let ls = bce_logits_mean(tape, d_source, true);
    let lt = bce_logits_mean(tape, d_target, false);
    tape.add(ls, lt)
}

/// Per-step component report written to `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub edge: f64,
    pub adv: f64,
    pub inter: f64,
    pub dis: f64,
    pub aug: f64,
    pub total: f64,
    pub skipped_terms: Vec<String>,
}

/// Nodes of the individual objectives; `None` marks a skipped term.
pub struct LossTerms {
    pub sup: Var,
    pub edge: Var,
    pub adv: Option<Var>,
    pub inter: Option<Var>,
    pub dis: Option<Var>,
    pub aug: Option<Var>,
}

/// Weighted total per the training objective:
/// total = sup + edge + λ₁·adv + λ₂·inter + λ₃·dis + λ₄·aug.
///
/// Terms that are `None` are recorded in `skipped_terms` and contribute
/// nothing; terms with λ = 0 are not added to the graph at all, so the total
/// is exactly independent of their inputs. Non-finite components abort.
pub fn assemble_total<T: Scalar>(
    tape: &mut Tape<T>,
    terms: &LossTerms,
    lambdas: [T; 4],
) -> Result<(Var, LossReport)> {
    let read = |tape: &Tape<T>, v: Var, name: &str| -> Result<f64> {
        let x = tape.scalar(v).to_f64_c();
        if !x.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                dump: String::new(),
            });
        }
        Ok(x)
    };

    let sup_v = read(tape, terms.sup, "sup")?;
    let edge_v = read(tape, terms.edge, "edge")?;
    let mut skipped = Vec::new();
    let mut component = |tape: &Tape<T>, term: &Option<Var>, name: &str| -> Result<f64> {
        match term {
            Some(v) => read(tape, *v, name),
            None => {
                skipped.push(name.to_string());
                Ok(0.0)
            }
        }
    };
    let adv_v = component(tape, &terms.adv, "adv")?;
    let inter_v = component(tape, &terms.inter, "inter")?;
    let dis_v = component(tape, &terms.dis, "dis")?;
    let aug_v = component(tape, &terms.aug, "aug")?;

    let mut total = tape.add(terms.sup, terms.edge);
    for (term, lambda) in [
        (terms.adv, lambdas[0]),
        (terms.inter, lambdas[1]),
        (terms.dis, lambdas[2]),
        (terms.aug, lambdas[3]),
    ] {
        if let Some(v) = term {
            if lambda != T::zero() {
                let scaled = tape.scale(v, lambda);
                total = tape.add(total, scaled);
            }
        }
    }
    let total_v = read(tape, total, "total")?;
    Ok((
        total,
        LossReport {
            sup: sup_v,
            edge: edge_v,
            adv: adv_v,
            inter: inter_v,
            dis: dis_v,
            aug: aug_v,
            total: total_v,
            skipped_terms: skipped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn arr(shape: &[usize], vals: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
    }

    fn rand_binary(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| f64::from(rng.random_range(0..2)))
    }

    #[test]
    fn perfect_prediction_has_tiny_supervised_loss() {
        let y = rand_binary(&[1, 2, 4, 4], 1);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(y.clone());
        let yv = tape.constant(y);
        let l = supervised_loss(&mut tape, p, yv, SupLossForm::DiceBce).unwrap();
        assert!(tape.scalar(l) < 0.01, "got {}", tape.scalar(l));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let y = rand_binary(&[1, 2, 4, 4], 2);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 0.5));
        let yv = tape.constant(y);
        let l = supervised_loss(&mut tape, p, yv, SupLossForm::Bce).unwrap();
        assert!((tape.scalar(l) - LN2).abs() < 1e-9);
    }

    #[test]
    fn supervised_loss_symmetric_in_class_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| rng.random_range(0.05..0.95));
        let y0 = rand_binary(&[1, 2, 3, 3], 4);
        let swap = |a: &ArrayD<f64>| -> ArrayD<f64> {
            let mut b = a.clone();
            for y in 0..3 {
                for x in 0..3 {
                    b[[0, 0, y, x]] = a[[0, 1, y, x]];
                    b[[0, 1, y, x]] = a[[0, 0, y, x]];
                }
            }
            b
        };
        let run = |p: &ArrayD<f64>, y: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let pv = tape.leaf(p.clone());
            let yv = tape.constant(y.clone());
            let l = supervised_loss(&mut tape, pv, yv, SupLossForm::DiceBce).unwrap();
            tape.scalar(l)
        };
        let a = run(&p0, &y0);
        let b = run(&swap(&p0), &swap(&y0));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn supervised_rejects_shape_mismatch_and_nonbinary() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.5));
        let y_bad = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 3]), 1.0));
        assert!(supervised_loss(&mut tape, p, y_bad, SupLossForm::DiceBce).is_err());
        let y_nonbin = tape.constant(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.5));
        assert!(supervised_loss(&mut tape, p, y_nonbin, SupLossForm::DiceBce).is_err());
    }

    #[test]
    fn edge_loss_zero_at_exact_match() {
        let y = rand_binary(&[1, 2, 4, 4], 5);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(y.clone());
        let yv = tape.constant(y);
        let l = edge_loss(&mut tape, p, yv, SumMode::Mean).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn edge_loss_is_one_for_inverted_binary() {
        let y = rand_binary(&[1, 2, 4, 4], 6);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(y.mapv(|v| 1.0 - v));
        let yv = tape.constant(y);
        let l = edge_loss(&mut tape, p, yv, SumMode::Mean).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn edge_loss_single_offset_pixel() {
        // One pixel off by 0.5 among N elements -> 0.25/N under mean mode.
        let n = 4usize;
        let y = arr(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let mut p = y.clone();
        p[[0, 0, 0, 1]] = 0.5;
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(p);
        let yv = tape.constant(y);
        let l = edge_loss(&mut tape, pv, yv, SumMode::Mean).unwrap();
        assert!((tape.scalar(l) - 0.25 / n as f64).abs() < 1e-12);
        // raw mode keeps the bare sum
        let y2 = arr(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let mut p2v = y2.clone();
        p2v[[0, 0, 0, 1]] = 0.5;
        let mut tape2 = Tape::<f64>::new();
        let pv2 = tape2.leaf(p2v);
        let yv2 = tape2.constant(y2);
        let l2 = edge_loss(&mut tape2, pv2, yv2, SumMode::Raw).unwrap();
        assert!((tape2.scalar(l2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn consistency_skipped_when_nothing_reliable() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.6));
        let hard = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        let rel = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
        let l = consistency_loss(&mut tape, p, &hard, &rel, SumMode::Mean).unwrap();
        assert!(l.is_none());
    }

    #[test]
    fn consistency_small_when_predictions_match() {
        let hard = rand_binary(&[1, 2, 3, 3], 7);
        let rel = ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 1.0);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(hard.clone());
        let l = consistency_loss(&mut tape, p, &hard, &rel, SumMode::Mean)
            .unwrap()
            .unwrap();
        assert!(tape.scalar(l) < 0.01);
    }

    #[test]
    fn consistency_single_reliable_pixel_ln2() {
        let hard = arr(&[1, 1, 1, 2], vec![1.0, 0.0]);
        let rel = arr(&[1, 1, 1, 2], vec![1.0, 0.0]);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(arr(&[1, 1, 1, 2], vec![0.5, 0.9]));
        let l = consistency_loss(&mut tape, p, &hard, &rel, SumMode::Mean)
            .unwrap()
            .unwrap();
        assert!((tape.scalar(l) - LN2).abs() < 1e-9);
    }

    #[test]
    fn consistency_gradient_zero_at_unreliable_pixels() {
        let hard = rand_binary(&[1, 2, 3, 3], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rel = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| {
            f64::from(rng.random_range(0..2))
        });
        let p0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |_| rng.random_range(0.2..0.8));
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(p0);
        let l = consistency_loss(&mut tape, p, &hard, &rel, SumMode::Mean)
            .unwrap()
            .unwrap();
        let grads = tape.backward(l);
        let g = grads.get(p).unwrap();
        for (gi, ri) in g.iter().zip(rel.iter()) {
            if *ri == 0.0 {
                assert_eq!(*gi, 0.0, "unreliable pixel must have zero gradient");
            } else {
                assert!(*gi != 0.0);
            }
        }
    }

    #[test]
    fn generator_loss_at_uniform_logits_is_two_ln2() {
        let mut tape = Tape::<f64>::new();
        let dm = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let de = tape.leaf(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let l = adversarial_generator_loss(&mut tape, dm, de);
        assert!((tape.scalar(l) - 2.0 * LN2).abs() < 1e-9);
    }

    #[test]
    fn generator_loss_vanishes_for_confident_logits() {
        let mut tape = Tape::<f64>::new();
        let dm = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 30.0));
        let de = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 30.0));
        let l = adversarial_generator_loss(&mut tape, dm, de);
        assert!(tape.scalar(l) < 1e-9);
    }

    #[test]
    fn generator_loss_monotone_in_logits() {
        let mut prev = f64::INFINITY;
        for z in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            let mut tape = Tape::<f64>::new();
            let dm = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), z));
            let de = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), z));
            let l = adversarial_generator_loss(&mut tape, dm, de);
            let v = tape.scalar(l);
            assert!(v < prev, "loss must decrease in every patch logit");
            prev = v;
        }
    }

    #[test]
    fn discriminator_loss_uniform_is_two_ln2() {
        let mut tape = Tape::<f64>::new();
        let ds = tape.leaf(ArrayD::zeros(IxDyn(&[2, 1, 4, 4])));
        let dt = tape.leaf(ArrayD::zeros(IxDyn(&[2, 1, 4, 4])));
        let l = discriminator_loss(&mut tape, ds, dt);
        assert!((tape.scalar(l) - 2.0 * LN2).abs() < 1e-9);
    }

    #[test]
    fn discriminator_loss_perfect_discrimination_near_zero() {
        let mut tape = Tape::<f64>::new();
        let ds = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 30.0));
        let dt = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), -30.0));
        let l = discriminator_loss(&mut tape, ds, dt);
        assert!(tape.scalar(l) < 0.01);
    }

    #[test]
    fn discriminator_loss_symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = ArrayD::from_shape_fn(IxDyn(&[1, 1, 3, 3]), |_| rng.random_range(-2.0..2.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[1, 1, 3, 3]), |_| rng.random_range(-2.0..2.0));
        // swapping inputs while negating labels is the same as swapping the
        // sign of every logit in both slots
        let run = |s: &ArrayD<f64>, t: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let ds = tape.leaf(s.clone());
            let dt = tape.leaf(t.clone());
            let l = discriminator_loss(&mut tape, ds, dt);
            tape.scalar(l)
        };
        let direct = run(&a, &b);
        let swapped = run(&b.mapv(|v| -v), &a.mapv(|v| -v));
        assert!((direct - swapped).abs() < 1e-12);
    }

    fn scalar_leaf(tape: &mut Tape<f64>, v: f64) -> Var {
        tape.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    #[test]
    fn assemble_all_zero_components() {
        let mut tape = Tape::<f64>::new();
        let z = scalar_leaf(&mut tape, 0.0);
        let terms = LossTerms {
            sup: z,
            edge: z,
            adv: Some(z),
            inter: Some(z),
            dis: Some(z),
            aug: Some(z),
        };
        let (total, report) = assemble_total(&mut tape, &terms, [0.01; 4]).unwrap();
        assert_eq!(tape.scalar(total), 0.0);
        assert_eq!(report.total, 0.0);
        assert!(report.skipped_terms.is_empty());
    }

    #[test]
    fn assemble_sup_is_unweighted() {
        let mut tape = Tape::<f64>::new();
        let one = scalar_leaf(&mut tape, 1.0);
        let z = scalar_leaf(&mut tape, 0.0);
        let terms = LossTerms {
            sup: one,
            edge: z,
            adv: None,
            inter: None,
            dis: None,
            aug: None,
        };
        let (total, report) = assemble_total(&mut tape, &terms, [0.01; 4]).unwrap();
        assert_eq!(tape.scalar(total), 1.0);
        assert_eq!(report.skipped_terms.len(), 4);
    }

    #[test]
    fn assemble_weights_inter_linearly() {
        let mut tape = Tape::<f64>::new();
        let z = scalar_leaf(&mut tape, 0.0);
        let two = scalar_leaf(&mut tape, 2.0);
        let terms = LossTerms {
            sup: z,
            edge: z,
            adv: None,
            inter: Some(two),
            dis: None,
            aug: None,
        };
        let (total, report) = assemble_total(&mut tape, &terms, [0.0, 0.01, 0.0, 0.0]).unwrap();
        assert!((tape.scalar(total) - 0.02).abs() < 1e-15);
        assert!((report.total - 0.02).abs() < 1e-15);
        assert_eq!(report.inter, 2.0);
    }

    #[test]
    fn zero_lambda_total_is_exactly_independent_of_term_inputs() {
        let run = |aug_value: f64| -> f64 {
            let mut tape = Tape::<f64>::new();
            let sup = scalar_leaf(&mut tape, 0.37);
            let edge = scalar_leaf(&mut tape, 0.11);
            let aug = scalar_leaf(&mut tape, aug_value);
            let terms = LossTerms {
                sup,
                edge,
                adv: None,
                inter: None,
                dis: None,
                aug: Some(aug),
            };
            let (total, _) = assemble_total(&mut tape, &terms, [0.0, 0.0, 0.0, 0.0]).unwrap();
            tape.scalar(total)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = run(rng.random_range(-10.0..10.0));
        for _ in 0..10 {
            assert_eq!(run(rng.random_range(-10.0..10.0)), base);
        }
    }

    #[test]
    fn non_finite_component_aborts_with_name() {
        let mut tape = Tape::<f64>::new();
        let z = scalar_leaf(&mut tape, 0.0);
        let bad = scalar_leaf(&mut tape, f64::NAN);
        let terms = LossTerms {
            sup: z,
            edge: z,
            adv: None,
            inter: Some(bad),
            dis: None,
            aug: None,
        };
        let err = assemble_total(&mut tape, &terms, [0.01; 4]).unwrap_err();
        assert!(err.to_string().contains("inter"), "got: {err}");
    }

    #[test]
    fn report_total_matches_weighted_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let vals: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0)).collect();
            let mut tape = Tape::<f64>::new();
            let leaves: Vec<Var> = vals.iter().map(|&v| scalar_leaf(&mut tape, v)).collect();
            let terms = LossTerms {
                sup: leaves[0],
                edge: leaves[1],
                adv: Some(leaves[2]),
                inter: Some(leaves[3]),
                dis: Some(leaves[4]),
                aug: Some(leaves[5]),
            };
            let l = [0.01, 0.02, 0.03, 0.04];
            let (_, report) = assemble_total(&mut tape, &terms, l).unwrap();
            let expect = vals[0]
                + vals[1]
                + l[0] * vals[2]
                + l[1] * vals[3]
                + l[2] * vals[4]
                + l[3] * vals[5];
            assert!((report.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_loss_gradient_vanishes_at_optimum() {
        // The one smooth loss whose optimum is interior.
        let y = rand_binary(&[1, 2, 3, 3], 13);
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(y.clone());
        let yv = tape.constant(y);
        let l = edge_loss(&mut tape, p, yv, SumMode::Mean).unwrap();
        let grads = tape.backward(l);
        for &g in grads.get(p).unwrap().iter() {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn losses_nonnegative_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..10 {
            let p0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.random_range(0.0..1.0));
            let y = rand_binary(&[1, 2, 4, 4], 20 + trial);
            let mut tape = Tape::<f64>::new();
            let p = tape.leaf(p0);
            let yv = tape.constant(y.clone());
            let sup = supervised_loss(&mut tape, p, yv, SupLossForm::DiceBce).unwrap();
            let e = edge_loss(&mut tape, p, yv, SumMode::Mean).unwrap();
            let rel = ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 1.0);
            let aug = consistency_loss(&mut tape, p, &y, &rel, SumMode::Mean)
                .unwrap()
                .unwrap();
            for v in [sup, e, aug] {
                let x = tape.scalar(v);
                assert!(x.is_finite() && x >= 0.0, "loss {x} invalid");
            }
        }
    }
}
