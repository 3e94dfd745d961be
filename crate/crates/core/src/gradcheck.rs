//! Randomized gradient verification of every loss mode against central
//! finite differences: partials w.r.t. logits and features, and all network
//! parameters through the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{combined_loss, Centroids, Label, LossConfig, LossMode};
use crate::numerics::{
    finite_difference, init_params, mlp_backward, mlp_forward, norm, FeatureActivation, MlpParams,
    Vector,
};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
/// Configurations closer than this to a kink (rectifier, `‖F‖ = 0`,
/// `‖F‖ = ξ`, `F = μ_c`) are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    /// Test hook: perturb the analytic parameter gradient so the check must
    /// fail.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeResult {
    pub mode: LossMode,
    pub trials: usize,
    /// Largest relative error over coordinates whose magnitude exceeds the
    /// absolute tolerance. A coordinate fails only when both its absolute and
    /// relative errors are over tolerance.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: usize,
    pub coordinates_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub modes: Vec<ModeResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.modes.iter().all(|m| m.passed)
    }
}

/// One random problem instance.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub params: MlpParams,
    pub x: Vec<f64>,
    pub label: Label,
    pub centroids: Centroids,
    pub loss: LossConfig,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn draw_case(rng: &mut ChaCha8Rng, mode: LossMode) -> Result<GradcheckCase> {
    let input = rng.random_range(2..=4);
    let hidden = rng.random_range(1..=2);
    let mut dims = vec![input];
    for _ in 0..hidden {
        dims.push(rng.random_range(3..=6));
    }
    let feature_dim = rng.random_range(2..=3);
    let classes = rng.random_range(2..=4);
    dims.push(feature_dim);
    dims.push(classes);

    let mut flat = init_params(&dims, rng.random())?.to_flat();
    // Non-zero biases so bias gradients are exercised away from the origin.
    for v in flat.iter_mut() {
        if *v == 0.0 {
            *v = uniform(rng, -0.5, 0.5);
        }
    }
    let activation = if rng.random_bool(0.5) {
        FeatureActivation::Rectifier
    } else {
        FeatureActivation::Identity
    };
    let params = MlpParams::from_flat(&dims, &flat)?.with_feature_activation(activation);
    let x = (0..input).map(|_| uniform(rng, -2.5, 2.5)).collect();
    let label = if rng.random_bool(0.5) {
        Label::Background
    } else {
        Label::Known(rng.random_range(0..classes))
    };
    let means = (0..classes)
        .map(|_| Vector::new((0..feature_dim).map(|_| uniform(rng, 0.0, 3.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let loss = LossConfig {
        mode,
        xi: uniform(rng, 0.5, 4.0),
        lambda_o: uniform(rng, 0.01, 1.0),
        lambda_i: uniform(rng, 0.01, 1.0),
        num_known: classes,
    };
    Ok(GradcheckCase {
        params,
        x,
        label,
        centroids: Centroids {
            means,
            epoch_tag: 1,
        },
        loss,
    })
}

fn near_kink(case: &GradcheckCase) -> Result<bool> {
    let t = mlp_forward(&case.params, &case.x)?;
    let hidden_layers = t.pre_activations.len() - 1;
    if t.pre_activations[..hidden_layers]
        .iter()
        .flat_map(|z| z.iter())
        .any(|z| z.abs() < KINK_MARGIN)
    {
        return Ok(true);
    }
    let mag = t.features.norm();
    if mag < KINK_MARGIN || (mag - case.loss.xi).abs() < KINK_MARGIN {
        return Ok(true);
    }
    if let Label::Known(c) = case.label {
        let mu = &case.centroids.means[c];
        let diff: Vec<f64> = t
            .features
            .iter()
            .zip(mu.iter())
            .map(|(f, m)| f - m)
            .collect();
        if norm(&diff) < KINK_MARGIN {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Draws a random case for `mode` that stays clear of every kink.
pub fn random_case(rng: &mut ChaCha8Rng, mode: LossMode) -> Result<GradcheckCase> {
    loop {
        let case = draw_case(rng, mode)?;
        if !near_kink(&case)? {
            return Ok(case);
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    max_rel: f64,
    max_abs: f64,
    failures: usize,
    checked: usize,
}

impl Tally {
    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            self.checked += 1;
            let err = (a - n).abs();
            self.max_abs = self.max_abs.max(err);
            let scale = a.abs().max(n.abs());
            if scale <= ABS_TOL {
                continue;
            }
            let rel = err / scale;
            self.max_rel = self.max_rel.max(rel);
            if err > ABS_TOL && rel > REL_TOL {
                self.failures += 1;
            }
        }
    }
}

fn check_case(case: &GradcheckCase, opts: GradcheckOptions, tally: &mut Tally) -> Result<()> {
    let cents = Some(&case.centroids);
    let t = mlp_forward(&case.params, &case.x)?;
    let out = combined_loss(&t.logits, &t.features, case.label, cents, &case.loss)?;

    let fd_logits = finite_difference(
        |l| {
            combined_loss(l, &t.features, case.label, cents, &case.loss)
                .map_or(f64::NAN, |o| o.value)
        },
        &t.logits,
        FD_STEP,
    )?;
    tally.compare(&out.dlogits, &fd_logits);

    let fd_features = finite_difference(
        |f| {
            combined_loss(&t.logits, f, case.label, cents, &case.loss).map_or(f64::NAN, |o| o.value)
        },
        &t.features,
        FD_STEP,
    )?;
    tally.compare(&out.dfeatures, &fd_features);

    let mut analytic = mlp_backward(&case.params, &t, &out.dlogits, &out.dfeatures)?.to_flat();
    if opts.corrupt_gradient {
        for g in analytic.iter_mut() {
            *g = *g * 1.1 + 1e-3;
        }
    }
    let fd_params = finite_difference(
        |p| {
            case.params
                .from_flat_like(p)
                .and_then(|pr| mlp_forward(&pr, &case.x))
                .and_then(|tr| {
                    combined_loss(&tr.logits, &tr.features, case.label, cents, &case.loss)
                })
                .map_or(f64::NAN, |o| o.value)
        },
        &case.params.to_flat(),
        FD_STEP,
    )?;
    tally.compare(&analytic, &fd_params);
    Ok(())
}

/// Runs `trials` random configurations for every loss mode.
pub fn run_gradcheck(seed: u64, trials: usize, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut modes = Vec::new();
    for (i, mode) in LossMode::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut tally = Tally::default();
        for _ in 0..trials {
            let case = random_case(&mut rng, mode)?;
            check_case(&case, opts, &mut tally)?;
        }
        modes.push(ModeResult {
            mode,
            trials,
            max_rel_error: tally.max_rel,
            max_abs_error: tally.max_abs,
            failures: tally.failures,
            coordinates_checked: tally.checked,
            passed: tally.failures == 0,
        });
    }
    Ok(GradcheckReport { seed, modes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_build_passes() {
        let r = run_gradcheck(7, 20, GradcheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.modes.iter().all(|m| m.coordinates_checked > 0));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = run_gradcheck(
            7,
            3,
            GradcheckOptions {
                corrupt_gradient: true,
            },
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn deterministic_report() {
        let a = run_gradcheck(3, 2, GradcheckOptions::default()).unwrap();
        let b = run_gradcheck(3, 2, GradcheckOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cases_avoid_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let case = random_case(&mut rng, LossMode::IntraspreadObjectosphere).unwrap();
            assert!(!near_kink(&case).unwrap());
        }
    }
}
