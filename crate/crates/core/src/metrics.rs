//! Flow accuracy, sparsification and pose-error metrics.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::image::Mask;

fn check(est: &FlowField, gt: &FlowField, valid: &Mask) -> Result<()> {
    if !est.same_dims(gt) || valid.width() != est.width() || valid.height() != est.height() {
        return Err(Error::ShapeMismatch("metric operands differ in size".into()));
    }
    Ok(())
}

/// Per-pixel endpoint errors over `valid`, in raster order.
pub fn endpoint_errors(est: &FlowField, gt: &FlowField, valid: &Mask) -> Result<Vec<f64>> {
    check(est, gt, valid)?;
    let mut out = Vec::new();
    for (i, (a, b)) in est.vectors().iter().zip(gt.vectors()).enumerate() {
        if valid.data()[i] {
            out.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aepe(est: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    mean(&endpoint_errors(est, gt, valid)?)
}

/// Percentage of valid pixels with endpoint error `<= t`.
pub fn pck(est: &FlowField, gt: &FlowField, t: f64, valid: &Mask) -> Result<f64> {
    let e = endpoint_errors(est, gt, valid)?;
    if e.is_empty() {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    Ok(100.0 * e.iter().filter(|&&v| v <= t).count() as f64 / e.len() as f64)
}

/// Outlier percentage: error above 3 px and above 5% of the ground-truth
/// magnitude (only the first test applies where that magnitude is zero).
pub fn fl(est: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    check(est, gt, valid)?;
    let (mut n, mut out) = (0usize, 0usize);
    for (i, (a, b)) in est.vectors().iter().zip(gt.vectors()).enumerate() {
        if !valid.data()[i] {
            continue;
        }
        n += 1;
        let err = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let mag = (b[0] * b[0] + b[1] * b[1]).sqrt();
        if err > 3.0 && (mag == 0.0 || err / mag > 0.05) {
            out += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    Ok(100.0 * out as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsificationCurve {
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SparsificationCurve {
    /// Divides by the value at fraction 0 (a zero curve stays zero).
    pub fn normalize(&self) -> SparsificationCurve {
        let v0 = self.values.first().copied().unwrap_or(0.0);
        let values = if v0 > 0.0 {
            self.values.iter().map(|v| v / v0).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        SparsificationCurve {
            fractions: self.fractions.clone(),
            values,
            normalized: true,
        }
    }
}

/// `steps` uniform fractions over `[0, 0.98]`.
pub fn default_fractions(steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![0.0];
    }
    (0..steps).map(|i| i as f64 * 0.98 / (steps - 1) as f64).collect()
}

/// Mean error of the pixels kept after removing the `floor(f n)` pixels with
/// the largest `uncertainty`, for each fraction `f`. Ties keep raster order.
pub fn sparsification(errors: &[f64], uncertainty: &[f64], steps: usize) -> Result<SparsificationCurve> {
    if errors.len() != uncertainty.len() {
        return Err(Error::ShapeMismatch("errors and ranking differ in length".into()));
    }
    if errors.is_empty() {
        return Err(Error::Degenerate("no pixels to sparsify".into()));
    }
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]));
    // suffix[k] = sum of errors of order[k..].
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + errors[order[k]];
    }
    let fractions = default_fractions(steps);
    let values = fractions
        .iter()
        .map(|&f| {
            let removed = ((f * n as f64).floor() as usize).min(n - 1);
            suffix[removed] / (n - removed) as f64
        })
        .collect();
    Ok(SparsificationCurve {
        fractions,
        values,
        normalized: false,
    })
}

/// Curve obtained by ranking with the true errors.
pub fn oracle(errors: &[f64], steps: usize) -> Result<SparsificationCurve> {
    sparsification(errors, errors, steps)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

/// Area between the normalized curve and the normalized oracle.
pub fn ause(curve: &SparsificationCurve, oracle: &SparsificationCurve) -> Result<f64> {
    if curve.fractions != oracle.fractions {
        return Err(Error::ShapeMismatch("curves use different fraction grids".into()));
    }
    let c = if curve.normalized { curve.clone() } else { curve.normalize() };
    let o = if oracle.normalized { oracle.clone() } else { oracle.normalize() };
    let diff: Vec<f64> = c.values.iter().zip(&o.values).map(|(a, b)| a - b).collect();
    Ok(trapezoid(&c.fractions, &diff))
}

/// Pointwise mean of curves sharing a grid.
pub fn average_curves(curves: &[SparsificationCurve]) -> Result<SparsificationCurve> {
    let first = curves.first().ok_or_else(|| Error::Degenerate("no curves".into()))?;
    let mut values = vec![0.0; first.values.len()];
    for c in curves {
        if c.fractions != first.fractions {
            return Err(Error::ShapeMismatch("curves use different fraction grids".into()));
        }
        values.iter_mut().zip(&c.values).for_each(|(a, b)| *a += b);
    }
    values.iter_mut().for_each(|v| *v /= curves.len() as f64);
    Ok(SparsificationCurve {
        fractions: first.fractions.clone(),
        values,
        normalized: first.normalized,
    })
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let d = (r.transpose() * r - Matrix3::identity()).abs().max();
    if d > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::Degenerate("matrix is not a rotation".into()));
    }
    Ok(())
}

/// Angle of `R^-1 R_hat`, degrees.
pub fn rotation_error(r: &Matrix3<f64>, r_hat: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r)?;
    check_rotation(r_hat)?;
    let d = r.transpose() * r_hat;
    let cos = (d.trace() - 1.0) / 2.0;
    let axis = Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]);
    let sin = axis.norm() / 2.0;
    // atan2 stays accurate near 0 where acos of the trace loses half the digits.
    Ok(sin.atan2(cos).to_degrees())
}

/// Angle between translation directions, degrees.
pub fn translation_error(t: &Vector3<f64>, t_hat: &Vector3<f64>) -> Result<f64> {
    let n = t.norm() * t_hat.norm();
    if n == 0.0 {
        return Err(Error::Degenerate("zero translation".into()));
    }
    Ok((t.dot(t_hat) / n).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Fraction (in percent) of pairs with `max(t_err, |r_err|) <= kappa`.
pub fn accuracy_at(errors: &[(f64, f64)], kappa: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let ok = errors.iter().filter(|(r, t)| r.abs().max(*t) <= kappa).count();
    100.0 * ok as f64 / errors.len() as f64
}

/// `mAP@k`: mean accuracy over the thresholds `5, 10, ..., k`.
pub fn map_at(errors: &[(f64, f64)], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&k| {
            let steps: Vec<f64> = (1..).map(|i| 5.0 * i as f64).take_while(|&s| s <= k + 1e-9).collect();
            if steps.is_empty() {
                return accuracy_at(errors, k);
            }
            steps.iter().map(|&s| accuracy_at(errors, s)).sum::<f64>() / steps.len() as f64
        })
        .collect()
}

/// Area under the cumulative pose-error curve up to each threshold, in
/// percent of the threshold.
pub fn auc_at(errors: &[(f64, f64)], thresholds: &[f64]) -> Vec<f64> {
    let mut e: Vec<f64> = errors.iter().map(|(r, t)| r.abs().max(*t)).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len();
    let mut xs = vec![0.0];
    let mut rs = vec![0.0];
    for (i, &v) in e.iter().enumerate() {
        xs.push(v);
        rs.push((i + 1) as f64 / n as f64);
    }
    thresholds
        .iter()
        .map(|&t| {
            let last = xs.partition_point(|&v| v < t);
            let mut x = xs[..last].to_vec();
            let mut r = rs[..last].to_vec();
            x.push(t);
            r.push(*rs[..last].last().unwrap_or(&0.0));
            100.0 * trapezoid(&x, &r) / t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn all(w: usize, h: usize) -> Mask {
        Mask::filled(w, h, true)
    }

    #[test]
    fn aepe_examples() {
        let a = FlowField::constant(4, 3, [1.0, 2.0]);
        assert_eq!(aepe(&a, &a, &all(4, 3)).unwrap(), 0.0);
        let mut m = Mask::new(4, 3);
        m.set(2, 1, true);
        let b = FlowField::constant(4, 3, [4.0, 6.0]);
        assert_eq!(aepe(&a, &b, &m).unwrap(), 5.0);
        assert!(aepe(&a, &b, &Mask::new(4, 3)).is_err());
    }

    #[test]
    fn pck_examples() {
        let gt = FlowField::zeros(4, 1);
        let est = FlowField::from_parts(4, 1, vec![[0.0, 0.0], [0.0, 0.0], [2.0, 0.0], [0.0, 2.0]], vec![true; 4]).unwrap();
        assert_eq!(pck(&gt, &gt, 1.0, &all(4, 1)).unwrap(), 100.0);
        assert_eq!(pck(&est, &gt, 1.0, &all(4, 1)).unwrap(), 50.0);
        assert_eq!(pck(&est, &gt, 2.0, &all(4, 1)).unwrap(), 100.0);
    }

    #[test]
    fn fl_examples() {
        let m = all(1, 1);
        let case = |err: f64, mag: f64| {
            let gt = FlowField::constant(1, 1, [mag, 0.0]);
            let est = FlowField::constant(1, 1, [mag + err, 0.0]);
            fl(&est, &gt, &m).unwrap()
        };
        assert_eq!(case(4.0, 10.0), 100.0);
        assert_eq!(case(4.0, 100.0), 0.0);
        assert_eq!(case(2.9, 1.0), 0.0);
        assert_eq!(case(4.0, 0.0), 100.0);
    }

    #[test]
    fn sparsification_examples() {
        let e = [0.5, 3.0, 1.0, 2.0];
        let o = oracle(&e, 50).unwrap();
        assert_eq!(ause(&o, &o).unwrap(), 0.0);
        let flat = [2.0; 10];
        let rank: Vec<f64> = (0..10).map(|i| ((i * 7) % 10) as f64).collect();
        let c = sparsification(&flat, &rank, 50).unwrap();
        assert!(c.values.iter().all(|&v| v == 2.0));
        assert_eq!(ause(&c, &oracle(&flat, 50).unwrap()).unwrap(), 0.0);
        assert_eq!(o.fractions.len(), 50);
        assert!((o.fractions[49] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn rotation_examples() {
        let id = Matrix3::identity();
        let z90 = *Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).matrix();
        assert!((rotation_error(&id, &z90).unwrap() - 90.0).abs() < 1e-9);
        assert_eq!(rotation_error(&z90, &z90).unwrap(), 0.0);
        let t = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(translation_error(&t, &t).unwrap(), 0.0);
        assert!(rotation_error(&(id * 2.0), &id).is_err());
    }

    #[test]
    fn pose_aggregates() {
        let e = [(1.0, 2.0), (3.0, 4.5), (0.0, 0.5)];
        assert_eq!(map_at(&e, &[5.0, 10.0, 20.0]), vec![100.0; 3]);
        let mixed = [(1.0, 1.0), (7.0, 1.0)];
        assert_eq!(map_at(&mixed, &[5.0, 10.0]), vec![50.0, 75.0]);
        // One error exactly at zero: the cumulative curve is 1 on (0, t].
        let auc = auc_at(&[(0.0, 0.0)], &[5.0]);
        assert!((auc[0] - 100.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pck_is_monotone(seed in any::<u64>(), t1 in 0.0f64..5.0, dt in 0.0f64..5.0) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = FlowField::from_fn(6, 5, |_, _| [r.gen_range(-4.0..4.0), r.gen_range(-4.0..4.0)]);
            let b = FlowField::zeros(6, 5);
            let m = all(6, 5);
            prop_assert!(pck(&a, &b, t1, &m).unwrap() <= pck(&a, &b, t1 + dt, &m).unwrap());
        }

        #[test]
        fn oracle_dominates_and_ause_nonnegative(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let e: Vec<f64> = (0..200).map(|_| r.gen_range(0.0..10.0)).collect();
            let rank: Vec<f64> = (0..200).map(|_| r.gen()).collect();
            let c = sparsification(&e, &rank, 50).unwrap();
            let o = oracle(&e, 50).unwrap();
            for (a, b) in c.values.iter().zip(&o.values) {
                prop_assert!(b <= &(a + 1e-12));
            }
            prop_assert!(ause(&c, &o).unwrap() >= -1e-12);
        }

        #[test]
        fn rotation_error_is_symmetric(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, bx in -1.0f64..1.0, by in -1.0f64..1.0, bz in -1.0f64..1.0) {
            let a = *Rotation3::from_scaled_axis(Vector3::new(ax, ay, az)).matrix();
            let b = *Rotation3::from_scaled_axis(Vector3::new(bx, by, bz)).matrix();
            let d = rotation_error(&a, &b).unwrap() - rotation_error(&b, &a).unwrap();
            prop_assert!(d.abs() < 1e-9);
        }
    }
}
