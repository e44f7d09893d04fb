//! Fused Dice + binary cross-entropy over whole tensors.

use crate::tensor::Scalar;

/// Probability clamp applied before the loss.
pub const EPS: f64 = 1e-7;

fn clamp<T: Scalar>(p: T) -> T {
    p.max(T::of(EPS)).min(T::one() - T::of(EPS))
}

/// Returns `(dice_term, bce_term)`.
///
/// `dice = 1 - 2 sum(y p) / (sum(y^2) + sum(p^2))`, `bce = mean(-y ln p - (1-y) ln(1-p))`,
/// both on clamped `p`.
pub fn dice_bce<T: Scalar>(pred: &[T], target: &[T]) -> (T, T) {
    let (mut syp, mut syy, mut spp, mut bce) = (T::zero(), T::zero(), T::zero(), T::zero());
    for (&p, &y) in pred.iter().zip(target) {
        let p = clamp(p);
        syp = syp + y * p;
        syy = syy + y * y;
        spp = spp + p * p;
        bce = bce - (y * p.ln() + (T::one() - y) * (T::one() - p).ln());
    }
    let n = T::of(pred.len().max(1) as f64);
    let dice = T::one() - (syp + syp) / (syy + spp);
    (dice, bce / n)
}

/// Gradient of `dice + bce` with respect to the unclamped prediction.
pub fn dice_bce_backward<T: Scalar>(pred: &[T], target: &[T], g: T) -> Vec<T> {
    let (mut syp, mut syy, mut spp) = (T::zero(), T::zero(), T::zero());
    for (&p, &y) in pred.iter().zip(target) {
        let p = clamp(p);
        syp = syp + y * p;
        syy = syy + y * y;
        spp = spp + p * p;
    }
    let den = syy + spp;
    let two = T::of(2.0);
    let n = T::of(pred.len().max(1) as f64);
    pred.iter()
        .zip(target)
        .map(|(&raw, &y)| {
            let p = clamp(raw);
            if p != raw {
                return T::zero();
            }
            let dd = -two * (y * den - syp * two * p) / (den * den);
            let db = -(y / p - (T::one() - y) / (T::one() - p)) / n;
            g * (dd + db)
        })
        .collect()
}
