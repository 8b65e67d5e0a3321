//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Check at most this many coordinates (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a ReLU or |·| kink lay within one step.
    pub skipped_kinks: usize,
    pub passed: bool,
}

/// Relative error used throughout: `|a − n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn evaluate<F>(build: &F, points: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(AutodiffError::NonFinite { op: op.name() });
    }
    Ok((tape.value(loss).item()?, tape.kink_signature()))
}

/// Compares the tape's gradients of the scalar built by `build` against
/// central differences, for every grad-requiring tensor in `points`.
pub fn gradient_check<F>(build: F, points: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_on(build, points, cfg, |_| {})
}

/// Like [`gradient_check`], with a hook that may alter each fresh tape
/// before recording (used to install backward faults in negative controls).
pub fn gradient_check_on<F, P>(
    build: F,
    points: &[Tensor],
    cfg: &GradCheckConfig,
    prepare: P,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: Fn(&mut Tape),
{
    if !(cfg.step > 0.0) {
        return Err(AutodiffError::invalid("gradient_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if let Some(op) = tape.first_non_finite() {
        return Err(AutodiffError::NonFinite { op: op.name() });
    }
    let base_kinks = tape.kink_signature();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.requires_grad())
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(limit) = cfg.max_coords {
        if coords.len() > limit {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|k| coords[k]).collect();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        passed: false,
    };
    let mut perturbed = points.to_vec();
    for (i, j) in coords {
        let orig = points[i].values()[j];
        perturbed[i].values_mut()[j] = orig + cfg.step;
        let (plus, kinks_plus) = evaluate(&build, &perturbed)?;
        perturbed[i].values_mut()[j] = orig - cfg.step;
        let (minus, kinks_minus) = evaluate(&build, &perturbed)?;
        perturbed[i].values_mut()[j] = orig;
        if kinks_plus != base_kinks || kinks_minus != base_kinks {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let err = relative_error(analytic[i][j], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.1]).with_requires_grad(true);
        let cfg = GradCheckConfig::default();
        let good = gradient_check(
            |t, v| {
                let e = t.exp(v[0])?;
                t.sum(e)
            },
            &[x.clone()],
            &cfg,
        )
        .unwrap();
        assert!(good.passed, "{good:?}");
        let bad = gradient_check_on(
            |t, v| {
                let e = t.exp(v[0])?;
                t.sum(e)
            },
            &[x],
            &cfg,
            |t| t.inject_backward_fault(crate::OpKind::Exp),
        )
        .unwrap();
        assert!(!bad.passed);
        assert!(bad.max_rel_error > 0.1);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let x = Tensor::from_vec(vec![1e-7, 2.0]).with_requires_grad(true);
        let r = gradient_check(
            |t, v| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 1);
        assert!(r.passed);
    }

    #[test]
    fn non_finite_names_the_primitive() {
        let x = Tensor::from_vec(vec![-1.0]).with_requires_grad(true);
        let err = gradient_check(
            |t, v| {
                let y = t.log(v[0], 0.0)?;
                t.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "log" });
    }

    #[test]
    fn relative_error_floors_denominator_at_one() {
        assert_eq!(relative_error(1.5, 1.0), 0.5);
        assert_eq!(relative_error(0.002, 0.001), 0.001);
        assert_eq!(relative_error(22.0, 20.0), 0.1);
    }
}
