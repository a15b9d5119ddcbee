//! Class prototypes and the two prototype-based losses.
//!
//! A prototype is the arithmetic mean feature vector of the selected pixels
//! of one class in one domain. The inter-domain loss is the Euclidean
//! distance between same-class prototypes of the two domains (object classes
//! only). The source discriminative loss is a per-pixel hinge pushing each
//! feature closer to its own class prototype than to the other class's by a
//! margin δ.
//!
//! Plain-array versions serve the spec operations and tests; the `*_node`
//! builders construct the same math on a [`Tape`] so gradients flow through
//! both the features and the prototype means.

use ndarray::{Array2, Array3, ArrayD};

use crate::datasets::DomainTag;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Class a prototype summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeClass {
    Disc,
    Cup,
    Background,
}

/// Mean feature vector of one class in one domain.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub vector: Vec<f32>,
    pub class_id: PrototypeClass,
    pub domain: DomainTag,
    /// Number of pixels averaged; 0 marks an invalid prototype.
    pub support: usize,
}

impl Prototype {
    pub fn is_valid(&self) -> bool {
        self.support >= 1
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Mean of `h` (D,H,W) over the pixels selected by `selection` (H,W).
/// An empty selection yields an invalid prototype, not an error.
pub fn class_prototype(
    h: &Array3<f32>,
    selection: &Array2<u8>,
    class_id: PrototypeClass,
    domain: DomainTag,
) -> Result<Prototype> {
    let (d, fh, fw) = h.dim();
    if selection.dim() != (fh, fw) {
        return Err(Error::validation(format!(
            "selection {:?} does not match feature map spatial size ({fh},{fw})",
            selection.dim()
        )));
    }
    let support = selection.iter().filter(|&&v| v == 1).count();
    let mut vector = vec![0.0f32; d];
    if support > 0 {
        for ((y, x), &sel) in selection.indexed_iter() {
            if sel == 1 {
                for (k, item) in vector.iter_mut().enumerate() {
                    *item += h[(k, y, x)];
                }
            }
        }
        for v in &mut vector {
            *v /= support as f32;
        }
    }
    Ok(Prototype {
        vector,
        class_id,
        domain,
        support,
    })
}

/// Euclidean distance between same-class prototypes of the two domains.
/// Returns `None` (skipped) when either prototype is invalid.
pub fn inter_domain_loss(f_s: &Prototype, f_t: &Prototype) -> Result<Option<f32>> {
    if f_s.dim() != f_t.dim() {
        return Err(Error::validation(format!(
            "prototype dimensions differ: {} vs {}",
            f_s.dim(),
            f_t.dim()
        )));
    }
    if f_s.class_id != f_t.class_id {
        return Err(Error::validation(format!(
            "prototype classes differ: {:?} vs {:?}",
            f_s.class_id, f_t.class_id
        )));
    }
    if !f_s.is_valid() || !f_t.is_valid() {
        return Ok(None);
    }
    let d2: f32 = f_s
        .vector
        .iter()
        .zip(f_t.vector.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(Some(d2.sqrt()))
}

/// Hinge discriminative loss for one binary class view (plain arrays).
///
/// Over object pixels: max(‖h−f_obj‖ − ‖h−f_bg‖ + δ, 0); mirrored over
/// background pixels. `normalize` divides each sum by its pixel count.
/// Returns `None` (skipped) when either prototype is invalid.
pub fn discriminative_loss(
    h: &Array3<f32>,
    y_mask: &Array2<u8>,
    f_obj: &Prototype,
    f_bg: &Prototype,
    delta: f32,
    normalize: bool,
) -> Result<Option<f32>> {
    if delta < 0.0 {
        return Err(Error::validation(format!(
            "margin delta must be >= 0, got {delta}"
        )));
    }
    let (d, fh, fw) = h.dim();
    if y_mask.dim() != (fh, fw) {
        return Err(Error::validation(format!(
            "mask {:?} does not match feature map spatial size ({fh},{fw})",
            y_mask.dim()
        )));
    }
    if f_obj.dim() != d || f_bg.dim() != d {
        return Err(Error::validation(
            "prototype dimension does not match feature channels",
        ));
    }
    if !f_obj.is_valid() || !f_bg.is_valid() {
        return Ok(None);
    }
    let dist = |y: usize, x: usize, f: &Prototype| -> f32 {
        let mut acc = 0.0f32;
        for k in 0..d {
            let diff = h[(k, y, x)] - f.vector[k];
            acc += diff * diff;
        }
        acc.sqrt()
    };
    let mut obj_sum = 0.0f32;
    let mut bg_sum = 0.0f32;
    let mut n_obj = 0usize;
    let mut n_bg = 0usize;
    for ((y, x), &m) in y_mask.indexed_iter() {
        let d_obj = dist(y, x, f_obj);
        let d_bg = dist(y, x, f_bg);
        if m == 1 {
            obj_sum += (d_obj - d_bg + delta).max(0.0);
            n_obj += 1;
        } else {
            bg_sum += (d_bg - d_obj + delta).max(0.0);
            n_bg += 1;
        }
    }
    let loss = if normalize {
        let o = if n_obj > 0 { obj_sum / n_obj as f32 } else { 0.0 };
        let b = if n_bg > 0 { bg_sum / n_bg as f32 } else { 0.0 };
        o + b
    } else {
        obj_sum + bg_sum
    };
    Ok(Some(loss))
}

// ---------------------------------------------------------------------------
// Tape builders (batched)
// ---------------------------------------------------------------------------

/// Prototype over a batch: mean of `h` (N,D,H,W) over pixels where the
/// constant selection mask (N,1,H,W) is 1. Returns the (D) vector node and
/// the support count; `None` when the selection is empty.
pub fn prototype_node<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    selection: &ArrayD<T>,
) -> Option<(Var, usize)> {
    let support = selection
        .iter()
        .filter(|v| **v > T::from_f64_c(0.5))
        .count();
    if support == 0 {
        return None;
    }
    let sel = tape.constant(selection.clone());
    let masked = tape.mul(h, sel);
    let summed = tape.sum_axes(masked, &[0, 2, 3], false);
    let mean = tape.scale(summed, T::one() / T::from_f64_c(support as f64));
    Some((mean, support))
}

/// Euclidean distance between two (D) prototype nodes.
pub fn inter_domain_loss_node<T: Scalar>(tape: &mut Tape<T>, f_s: Var, f_t: Var) -> Var {
    let diff = tape.sub(f_s, f_t);
    let sq = tape.mul(diff, diff);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

/// Per-pixel Euclidean distance map ‖h − f‖ of shape (N,1,H,W).
fn distance_map<T: Scalar>(tape: &mut Tape<T>, h: Var, f: Var) -> Var {
    let d = tape.value(f).len();
    let f4 = tape.reshape(f, &[1, d, 1, 1]);
    let diff = tape.sub(h, f4);
    let sq = tape.mul(diff, diff);
    let summed = tape.sum_axes(sq, &[1], true);
    tape.sqrt(summed)
}

/// Batched hinge discriminative loss for one binary class view on the tape.
/// `obj_mask`/`bg_mask` are complementary constant (N,1,H,W) indicator maps.
pub fn discriminative_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    obj_mask: &ArrayD<T>,
    bg_mask: &ArrayD<T>,
    f_obj: Var,
    f_bg: Var,
    delta: T,
    normalize: bool,
) -> Var {
    let d_obj = distance_map(tape, h, f_obj);
    let d_bg = distance_map(tape, h, f_bg);
    let n_obj = obj_mask.iter().filter(|v| **v > T::from_f64_c(0.5)).count();
    let n_bg = bg_mask.iter().filter(|v| **v > T::from_f64_c(0.5)).count();

    let term = |tape: &mut Tape<T>, da: Var, db: Var, mask: &ArrayD<T>, n: usize| -> Option<Var> {
        if n == 0 {
            return None;
        }
        let diff = tape.sub(da, db);
        let shifted = tape.add_scalar(diff, delta);
        let hinge = tape.relu(shifted);
        let m = tape.constant(mask.clone());
        let masked = tape.mul(hinge, m);
        let sum = tape.sum_all(masked);
        Some(if normalize {
            tape.scale(sum, T::one() / T::from_f64_c(n as f64))
        } else {
            sum
        })
    };

    let obj_term = term(tape, d_obj, d_bg, obj_mask, n_obj);
    let bg_term = term(tape, d_bg, d_obj, bg_mask, n_bg);
    match (obj_term, bg_term) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => tape.scalar_constant(T::zero()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_features(d: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((d, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_pixel_selection_equals_that_feature() {
        let h = rand_features(4, 3, 3, 1);
        let mut sel = Array2::<u8>::zeros((3, 3));
        sel[(1, 2)] = 1;
        let p = class_prototype(&h, &sel, PrototypeClass::Disc, DomainTag::Source).unwrap();
        assert_eq!(p.support, 1);
        for k in 0..4 {
            assert_eq!(p.vector[k], h[(k, 1, 2)]);
        }
    }

    #[test]
    fn constant_features_give_the_constant() {
        let h = Array3::<f32>::from_elem((3, 4, 4), 0.7);
        let mut sel = Array2::<u8>::zeros((4, 4));
        sel[(0, 0)] = 1;
        sel[(3, 2)] = 1;
        let p = class_prototype(&h, &sel, PrototypeClass::Cup, DomainTag::Target).unwrap();
        for v in &p.vector {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_selection_is_invalid_not_error() {
        let h = rand_features(2, 3, 3, 2);
        let sel = Array2::<u8>::zeros((3, 3));
        let p = class_prototype(&h, &sel, PrototypeClass::Disc, DomainTag::Source).unwrap();
        assert!(!p.is_valid());
    }

    #[test]
    fn prototype_matches_bruteforce_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..25 {
            let (d, fh, fw) = (4, 8, 8);
            let h = rand_features(d, fh, fw, 100 + trial);
            let sel = Array2::<u8>::from_shape_fn((fh, fw), |_| rng.random_range(0..2));
            let p = class_prototype(&h, &sel, PrototypeClass::Disc, DomainTag::Source).unwrap();
            // independent scalar loop in f64
            let mut sums = vec![0.0f64; d];
            let mut n = 0usize;
            for y in 0..fh {
                for x in 0..fw {
                    if sel[(y, x)] == 1 {
                        n += 1;
                        for k in 0..d {
                            sums[k] += h[(k, y, x)] as f64;
                        }
                    }
                }
            }
            if n == 0 {
                assert!(!p.is_valid());
                continue;
            }
            for k in 0..d {
                let expect = sums[k] / n as f64;
                let got = p.vector[k] as f64;
                let denom = expect.abs().max(1e-6);
                assert!(
                    ((got - expect) / denom).abs() < 1e-6,
                    "trial {trial} k {k}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn selection_shape_mismatch_rejected() {
        let h = rand_features(2, 3, 3, 3);
        let sel = Array2::<u8>::zeros((4, 4));
        assert!(class_prototype(&h, &sel, PrototypeClass::Disc, DomainTag::Source).is_err());
    }

    fn proto(v: &[f32], class: PrototypeClass, domain: DomainTag) -> Prototype {
        Prototype {
            vector: v.to_vec(),
            class_id: class,
            domain,
            support: 1,
        }
    }

    #[test]
    fn identical_prototypes_have_zero_distance() {
        let a = proto(&[0.3, -0.2], PrototypeClass::Disc, DomainTag::Source);
        let b = proto(&[0.3, -0.2], PrototypeClass::Disc, DomainTag::Target);
        assert_eq!(inter_domain_loss(&a, &b).unwrap(), Some(0.0));
    }

    #[test]
    fn distance_of_3_4_5_triangle() {
        let a = proto(&[0.0, 0.0], PrototypeClass::Cup, DomainTag::Source);
        let b = proto(&[3.0, 4.0], PrototypeClass::Cup, DomainTag::Target);
        assert!((inter_domain_loss(&a, &b).unwrap().unwrap() - 5.0).abs() < 1e-7);
    }

    #[test]
    fn inter_domain_loss_is_symmetric() {
        let a = proto(&[1.0, 2.0, 3.0], PrototypeClass::Disc, DomainTag::Source);
        let b = proto(&[-1.0, 0.5, 2.0], PrototypeClass::Disc, DomainTag::Target);
        assert_eq!(
            inter_domain_loss(&a, &b).unwrap(),
            inter_domain_loss(&b, &a).unwrap()
        );
    }

    #[test]
    fn invalid_prototype_skips_inter_loss() {
        let a = proto(&[1.0], PrototypeClass::Disc, DomainTag::Source);
        let mut b = proto(&[2.0], PrototypeClass::Disc, DomainTag::Target);
        b.support = 0;
        assert_eq!(inter_domain_loss(&a, &b).unwrap(), None);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = proto(&[1.0, 2.0], PrototypeClass::Disc, DomainTag::Source);
        let b = proto(&[1.0], PrototypeClass::Disc, DomainTag::Target);
        assert!(inter_domain_loss(&a, &b).is_err());
    }

    #[test]
    fn perfectly_clustered_features_give_zero_discriminative_loss() {
        // Every pixel feature equals its own class prototype and the margin
        // is smaller than the prototype separation.
        let (fh, fw) = (4, 4);
        let mut h = Array3::<f32>::zeros((2, fh, fw));
        let mut mask = Array2::<u8>::zeros((fh, fw));
        for y in 0..fh {
            for x in 0..fw {
                if y < 2 {
                    mask[(y, x)] = 1;
                    h[(0, y, x)] = 1.0;
                } else {
                    h[(0, y, x)] = -1.0;
                }
            }
        }
        let f_obj = proto(&[1.0, 0.0], PrototypeClass::Disc, DomainTag::Source);
        let f_bg = proto(&[-1.0, 0.0], PrototypeClass::Background, DomainTag::Source);
        let loss = discriminative_loss(&h, &mask, &f_obj, &f_bg, 0.01, true)
            .unwrap()
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_pixel_hand_case() {
        // One object pixel sitting exactly on the background prototype:
        // contribution max(1 - 0 + 0.01, 0) = 1.01.
        let mut h = Array3::<f32>::zeros((1, 1, 1));
        h[(0, 0, 0)] = 0.0;
        let mask = Array2::<u8>::from_elem((1, 1), 1);
        let f_obj = proto(&[1.0], PrototypeClass::Disc, DomainTag::Source);
        let f_bg = proto(&[0.0], PrototypeClass::Background, DomainTag::Source);
        let loss = discriminative_loss(&h, &mask, &f_obj, &f_bg, 0.01, true)
            .unwrap()
            .unwrap();
        assert!((loss - 1.01).abs() < 1e-6);
    }

    #[test]
    fn equidistant_with_zero_margin_is_zero() {
        let mut h = Array3::<f32>::zeros((1, 1, 1));
        h[(0, 0, 0)] = 0.0;
        let mask = Array2::<u8>::from_elem((1, 1), 1);
        let f_obj = proto(&[1.0], PrototypeClass::Disc, DomainTag::Source);
        let f_bg = proto(&[-1.0], PrototypeClass::Background, DomainTag::Source);
        let loss = discriminative_loss(&h, &mask, &f_obj, &f_bg, 0.0, true)
            .unwrap()
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn moving_object_feature_toward_background_increases_loss() {
        let mask = Array2::<u8>::from_elem((1, 1), 1);
        let f_obj = proto(&[1.0], PrototypeClass::Disc, DomainTag::Source);
        let f_bg = proto(&[-1.0], PrototypeClass::Background, DomainTag::Source);
        let mut prev = -1.0f32;
        for t in 0..5 {
            // slide from the object prototype toward the background one
            let pos = 1.0 - 0.45 * t as f32;
            let mut h = Array3::<f32>::zeros((1, 1, 1));
            h[(0, 0, 0)] = pos;
            let loss = discriminative_loss(&h, &mask, &f_obj, &f_bg, 0.3, true)
                .unwrap()
                .unwrap();
            assert!(loss >= prev, "loss must be nondecreasing toward f_bg");
            prev = loss;
        }
        assert!(prev > 0.0);
    }

    #[test]
    fn invalid_prototype_skips_discriminative_loss() {
        let h = rand_features(2, 2, 2, 9);
        let mask = Array2::<u8>::zeros((2, 2));
        let f_obj = proto(&[1.0, 0.0], PrototypeClass::Disc, DomainTag::Source);
        let mut f_bg = proto(&[0.0, 1.0], PrototypeClass::Background, DomainTag::Source);
        f_bg.support = 0;
        assert!(discriminative_loss(&h, &mask, &f_obj, &f_bg, 0.01, true)
            .unwrap()
            .is_none());
    }

    #[test]
    fn negative_margin_rejected() {
        let h = rand_features(2, 2, 2, 10);
        let mask = Array2::<u8>::zeros((2, 2));
        let f = proto(&[0.0, 0.0], PrototypeClass::Disc, DomainTag::Source);
        assert!(discriminative_loss(&h, &mask, &f, &f, -0.1, true).is_err());
    }

    #[test]
    fn tape_prototype_matches_plain() {
        let h = rand_features(3, 4, 4, 11);
        let mut sel = Array2::<u8>::zeros((4, 4));
        sel[(0, 1)] = 1;
        sel[(2, 3)] = 1;
        sel[(3, 3)] = 1;
        let plain = class_prototype(&h, &sel, PrototypeClass::Disc, DomainTag::Source).unwrap();

        let mut tape = Tape::<f32>::new();
        let h4 = h.clone().insert_axis(ndarray::Axis(0)).into_dyn();
        let hv = tape.leaf(h4);
        let seld = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            f32::from(sel[(ix[2], ix[3])])
        });
        let (pv, support) = prototype_node(&mut tape, hv, &seld).unwrap();
        assert_eq!(support, plain.support);
        let got = tape.value(pv);
        for k in 0..3 {
            assert!((got[[k]] - plain.vector[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_inter_loss_translation_invariance() {
        // Adding a constant vector to all features of both domains leaves
        // the inter-domain loss unchanged.
        let hs = rand_features(3, 4, 4, 12);
        let ht = rand_features(3, 4, 4, 13);
        let sel = ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 1.0f32);
        let loss_of = |offset: f32| -> f32 {
            let mut tape = Tape::<f32>::new();
            let hs4 = hs.mapv(|v| v + offset).insert_axis(ndarray::Axis(0)).into_dyn();
            let ht4 = ht.mapv(|v| v + offset).insert_axis(ndarray::Axis(0)).into_dyn();
            let hsv = tape.leaf(hs4);
            let htv = tape.leaf(ht4);
            let (fs, _) = prototype_node(&mut tape, hsv, &sel).unwrap();
            let (ft, _) = prototype_node(&mut tape, htv, &sel).unwrap();
            let l = inter_domain_loss_node(&mut tape, fs, ft);
            tape.scalar(l)
        };
        let base = loss_of(0.0);
        let shifted = loss_of(1.7);
        assert!((base - shifted).abs() < 1e-5, "{base} vs {shifted}");
    }

    #[test]
    fn tape_discriminative_matches_plain() {
        let h = rand_features(3, 5, 5, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mask = Array2::<u8>::from_shape_fn((5, 5), |_| rng.random_range(0..2));
        let inv: Array2<u8> = mask.mapv(|v| 1 - v);
        let f_obj = class_prototype(&h, &mask, PrototypeClass::Disc, DomainTag::Source).unwrap();
        let f_bg = class_prototype(&h, &inv, PrototypeClass::Background, DomainTag::Source).unwrap();
        let plain = discriminative_loss(&h, &mask, &f_obj, &f_bg, 0.05, true)
            .unwrap()
            .unwrap();

        let mut tape = Tape::<f32>::new();
        let hv = tape.leaf(h.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let obj = ArrayD::from_shape_fn(IxDyn(&[1, 1, 5, 5]), |ix| {
            f32::from(mask[(ix[2], ix[3])])
        });
        let bg = ArrayD::from_shape_fn(IxDyn(&[1, 1, 5, 5]), |ix| {
            f32::from(inv[(ix[2], ix[3])])
        });
        let (fo, _) = prototype_node(&mut tape, hv, &obj).unwrap();
        let (fb, _) = prototype_node(&mut tape, hv, &bg).unwrap();
        let l = discriminative_loss_node(&mut tape, hv, &obj, &bg, fo, fb, 0.05, true);
        assert!((tape.scalar(l) - plain).abs() < 1e-5);
    }
}
