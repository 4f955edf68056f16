//! Segmentation objectives: Dice overlap, binary cross-entropy and their
//! combination `bce - dice + 1`, plus the probability threshold used to turn
//! network output into a binary mask.

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Real, Tensor5};

/// Probability clip used inside the cross-entropy logarithms.
pub const BCE_CLIP: f64 = 1e-7;

/// Smoothing term of the soft Dice used by the training loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Output probabilities are scaled to `[0, 255]` and compared with this value.
pub const MASK_THRESHOLD: f64 = 128.0;

fn check_binary<T: Real>(t: &Tensor5<T>, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Domain(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

/// Dice coefficient `2|X ∩ Y| / (|X| + |Y|)` of two binary masks.
///
/// Two empty masks agree perfectly and score 1.
pub fn dice_hard<T: Real>(pred_mask: &Tensor5<T>, target: &Tensor5<T>) -> Result<f64> {
    pred_mask.expect_shape(target.shape())?;
    check_binary(pred_mask, "prediction mask")?;
    check_binary(target, "target mask")?;
    let (mut tp, mut x, mut y) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred_mask.data().iter().zip(target.data()) {
        let p = p == T::one();
        let t = t == T::one();
        x += p as usize;
        y += t as usize;
        tp += (p && t) as usize;
    }
    if x + y == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (x + y) as f64)
}

/// Soft Dice `(2 Σ p·y + s) / (Σ p + Σ y + s)`.
pub fn dice_soft<T: Real>(pred: &Tensor5<T>, target: &Tensor5<T>, smooth: f64) -> Result<T> {
    Ok(soft_dice_terms(pred, target, smooth)?.value())
}

struct SoftDiceTerms<T> {
    intersection: T,
    denominator: T,
    smooth: T,
}

impl<T: Real> SoftDiceTerms<T> {
    fn value(&self) -> T {
        if self.denominator == T::zero() {
            return T::one();
        }
        (T::lit(2.0) * self.intersection + self.smooth) / self.denominator
    }

    fn grad(&self, target: T) -> T {
        if self.denominator == T::zero() {
            return T::zero();
        }
        let two = T::lit(2.0);
        (two * target * self.denominator - (two * self.intersection + self.smooth))
            / (self.denominator * self.denominator)
    }
}

fn soft_dice_terms<T: Real>(
    pred: &Tensor5<T>,
    target: &Tensor5<T>,
    smooth: f64,
) -> Result<SoftDiceTerms<T>> {
    let products = pred.mul(target)?;
    let smooth = T::lit(smooth);
    Ok(SoftDiceTerms {
        intersection: products.sum(),
        denominator: pred.sum() + target.sum() + smooth,
        smooth,
    })
}

/// Gradient of [`dice_soft`] with respect to the prediction.
pub fn dice_soft_grad<T: Real>(
    pred: &Tensor5<T>,
    target: &Tensor5<T>,
    smooth: f64,
) -> Result<Tensor5<T>> {
    let terms = soft_dice_terms(pred, target, smooth)?;
    Ok(target.map(|y| terms.grad(y)))
}

fn clip<T: Real>(p: T) -> T {
    let lo = T::lit(BCE_CLIP);
    p.max(lo).min(T::one() - lo)
}

/// Mean binary cross-entropy with probabilities clipped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce<T: Real>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<T> {
    let terms = pred.map_binary(target, |p, y| {
        let p = clip(p);
        -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
    })?;
    Ok(pairwise_sum(terms.data()) / T::from_usize(terms.len()).unwrap())
}

pub fn bce_grad<T: Real>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<Tensor5<T>> {
    let count = T::from_usize(pred.len()).unwrap();
    let lo = T::lit(BCE_CLIP);
    pred.map_binary(target, |p, y| {
        if p < lo || p > T::one() - lo {
            return T::zero();
        }
        (-y / p + (T::one() - y) / (T::one() - p)) / count
    })
}

/// Training loss `bce - soft_dice + 1` and its gradient with respect to
/// the prediction.
pub fn bce_dice_loss<T: Real>(
    pred: &Tensor5<T>,
    target: &Tensor5<T>,
    smooth: f64,
) -> Result<(T, Tensor5<T>)> {
    let loss = bce(pred, target)? - dice_soft(pred, target, smooth)? + T::one();
    let grad = bce_grad(pred, target)?.sub(&dice_soft_grad(pred, target, smooth)?)?;
    Ok((loss, grad))
}

/// Binary mask of voxels whose probability reaches `128` on a `[0, 255]`
/// scale, i.e. `p >= 128 / 255`.
pub fn threshold_mask<T: Real>(pred: &Tensor5<T>) -> Tensor5<T> {
    let cut = T::lit(MASK_THRESHOLD / 255.0);
    pred.map(|p| if p >= cut { T::one() } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_relative_error, numeric_gradient};
    use crate::tensor::Shape5;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vector(values: &[f64]) -> Tensor5<f64> {
        Tensor5::from_vec(Shape5::vector(values.len()).unwrap(), values.to_vec()).unwrap()
    }

    fn mask(len: usize, ones: &[usize]) -> Tensor5<f64> {
        let mut v = vec![0.0; len];
        for &i in ones {
            v[i] = 1.0;
        }
        vector(&v)
    }

    #[test]
    fn dice_hard_examples() {
        let x = mask(10, &[1, 2, 3]);
        assert_eq!(dice_hard(&x, &x).unwrap(), 1.0);
        assert_eq!(dice_hard(&x, &mask(10, &[5, 6])).unwrap(), 0.0);
        let x = mask(10, &[0, 1, 2, 3]);
        let y = mask(10, &[1, 2, 3, 4, 5, 6]);
        assert!((dice_hard(&x, &y).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice_hard(&mask(4, &[]), &mask(4, &[])).unwrap(), 1.0);
    }

    #[test]
    fn dice_hard_rejects_soft_values() {
        let soft = vector(&[0.0, 0.5]);
        assert!(matches!(
            dice_hard(&soft, &mask(2, &[0])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn dice_soft_examples() {
        let y = mask(8, &[0, 1, 2, 3]);
        assert!((dice_soft(&y, &y, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        let half = vector(&[0.5; 8]);
        // 2 * (4 * 0.5) / (4 + 4) = 0.5
        assert_eq!(dice_soft(&half, &y, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn bce_examples() {
        let y = mask(6, &[0, 2, 4]);
        assert!(bce(&y, &y).unwrap() <= 1e-6);
        let half = vector(&[0.5; 6]);
        assert!((bce(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let ones = vector(&[1.0; 4]);
        let near = vector(&[1.0 - 1e-7; 4]);
        assert!((bce(&near, &ones).unwrap() - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_examples() {
        let y = mask(8, &[0, 1, 2, 3]);
        let (loss, _) = bce_dice_loss(&y, &y, DICE_SMOOTH).unwrap();
        assert!(loss <= 1e-5);
        let half = vector(&[0.5; 8]);
        let (loss, _) = bce_dice_loss(&half, &y, 0.0).unwrap();
        assert!((loss - (std::f64::consts::LN_2 + 0.5)).abs() < 1e-12);
        assert!((loss - 1.1931).abs() < 1e-4);
    }

    #[test]
    fn threshold_examples() {
        let p = vector(&[0.6, 0.0, 128.0 / 255.0, 127.5 / 255.0, 1.0]);
        assert_eq!(threshold_mask(&p).data(), &[1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Shape5::new(1, 3, 3, 3, 2).unwrap();
        let p = Tensor5::from_fn(s, |_| rng.gen_range(1e-3..1.0 - 1e-3));
        let y = Tensor5::from_fn(s, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let (_, analytic) = bce_dice_loss(&p, &y, DICE_SMOOTH).unwrap();
        let numeric = numeric_gradient(&p, 1e-6, |q| bce_dice_loss(q, &y, DICE_SMOOTH).unwrap().0);
        assert!(max_relative_error(analytic.data(), numeric.data()) <= 1e-6);

        let analytic = dice_soft_grad(&p, &y, DICE_SMOOTH).unwrap();
        let numeric = numeric_gradient(&p, 1e-6, |q| dice_soft(q, &y, DICE_SMOOTH).unwrap());
        assert!(max_relative_error(analytic.data(), numeric.data()) <= 1e-6);
    }

    #[test]
    fn loss_vanishes_as_prediction_approaches_target() {
        let y = mask(16, &[1, 3, 5, 7, 9]);
        let mut last = f64::INFINITY;
        for delta in [0.3, 0.1, 0.01, 1e-4, 1e-6] {
            let p = y.map(|t| if t == 1.0 { 1.0 - delta } else { delta });
            let (loss, _) = bce_dice_loss(&p, &y, 1e-9).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-5);
    }

    fn arb_masks() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
        (1usize..64).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    fn to_mask(bits: &[bool]) -> Tensor5<f64> {
        vector(&bits.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn dice_hard_is_symmetric((a, b) in arb_masks()) {
            let (x, y) = (to_mask(&a), to_mask(&b));
            prop_assert_eq!(dice_hard(&x, &y).unwrap(), dice_hard(&y, &x).unwrap());
            if a.iter().any(|&v| v) {
                prop_assert_eq!(dice_hard(&x, &x).unwrap(), 1.0);
            }
        }

        #[test]
        fn adding_a_true_positive_never_lowers_dice((a, b) in arb_masks(), pick in any::<prop::sample::Index>()) {
            let mut a = a;
            let candidates: Vec<usize> = (0..a.len()).filter(|&i| b[i] && !a[i]).collect();
            prop_assume!(!candidates.is_empty());
            let before = dice_hard(&to_mask(&a), &to_mask(&b)).unwrap();
            a[candidates[pick.index(candidates.len())]] = true;
            let after = dice_hard(&to_mask(&a), &to_mask(&b)).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn soft_dice_on_binary_matches_hard((a, b) in arb_masks(), smooth in 0.0f64..2.0) {
            let (x, y) = (to_mask(&a), to_mask(&b));
            let total = a.iter().chain(&b).filter(|&&v| v).count() as f64;
            prop_assume!(total > 0.0);
            let soft = dice_soft(&x, &y, smooth).unwrap();
            let hard = dice_hard(&x, &y).unwrap();
            prop_assert!((soft - hard).abs() <= smooth / total + 1e-12);
        }

        #[test]
        fn combined_loss_is_non_negative(seed in any::<u64>(), smooth in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Shape5::new(1, 2, 2, 2, 3).unwrap();
            let p = Tensor5::from_fn(s, |_| rng.gen_range(0.0..=1.0));
            let y = Tensor5::from_fn(s, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let (loss, grad) = bce_dice_loss(&p, &y, smooth).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(grad.is_finite());
        }
    }
}
