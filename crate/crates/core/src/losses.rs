//! Open-set loss family: closed-set cross-entropy, the entropic open-set
//! loss, the objectosphere magnitude penalty, the intraspread centroid term,
//! and their combination. Every loss returns its value together with exact
//! partials with respect to the logits and the feature vector.
//!
//! Non-differentiable points (`‖F‖ = 0`, `‖F‖ = ξ`, `F = μ_c`) use a zero
//! subgradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Vector};

/// Ground truth for one training or test sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Known(usize),
    Background,
}

impl Label {
    pub fn is_background(self) -> bool {
        matches!(self, Label::Background)
    }

    pub fn known(self) -> Option<usize> {
        match self {
            Label::Known(c) => Some(c),
            Label::Background => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Softmax cross-entropy on known samples; background is ignored.
    CrossEntropy,
    Entropic,
    Objectosphere,
    IntraspreadObjectosphere,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::CrossEntropy,
        LossMode::Entropic,
        LossMode::Objectosphere,
        LossMode::IntraspreadObjectosphere,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::CrossEntropy => "cross_entropy",
            LossMode::Entropic => "entropic",
            LossMode::Objectosphere => "objectosphere",
            LossMode::IntraspreadObjectosphere => "intraspread_objectosphere",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Objectosphere radius ξ.
    pub xi: f64,
    pub lambda_o: f64,
    pub lambda_i: f64,
    pub num_known: usize,
}

impl LossConfig {
    /// Desk-scale defaults tuned for a 2-D feature layer.
    pub fn new(mode: LossMode, num_known: usize) -> Self {
        Self {
            mode,
            xi: 5.0,
            lambda_o: 1e-2,
            lambda_i: 3e-2,
            num_known,
        }
    }

    /// ξ = 300, λ_o = 1e-4, λ_i = 1e-2: values sized for VGG-scale features.
    pub fn vgg_scale(mode: LossMode, num_known: usize) -> Self {
        Self {
            mode,
            xi: 300.0,
            lambda_o: 1e-4,
            lambda_i: 1e-2,
            num_known,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("xi", self.xi),
            ("lambda_o", self.lambda_o),
            ("lambda_i", self.lambda_i),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.num_known < 2 {
            return Err(Error::Config(format!(
                "need at least 2 known classes, got {}",
                self.num_known
            )));
        }
        Ok(())
    }

    /// True when this configuration reads class centroids.
    pub fn needs_centroids(&self) -> bool {
        self.mode == LossMode::IntraspreadObjectosphere && self.lambda_i > 0.0
    }
}

/// Per-class mean feature vectors, snapshotted at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub means: Vec<Vector>,
    /// Epoch (1-based) after which the means were computed; 0 for "before
    /// training".
    pub epoch_tag: usize,
}

impl Centroids {
    pub fn get(&self, class: usize) -> Result<&Vector> {
        self.means.get(class).ok_or_else(|| {
            Error::State(format!(
                "no centroid for class {class} (have {})",
                self.means.len()
            ))
        })
    }
}

/// Loss value with partials w.r.t. logits and features.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub dlogits: Vec<f64>,
    pub dfeatures: Vec<f64>,
}

impl LossOutput {
    pub fn zero(num_logits: usize, feature_dim: usize) -> Self {
        Self {
            value: 0.0,
            dlogits: vec![0.0; num_logits],
            dfeatures: vec![0.0; feature_dim],
        }
    }

    fn accumulate(&mut self, other: &LossOutput) {
        self.value += other.value;
        for (a, b) in self.dlogits.iter_mut().zip(&other.dlogits) {
            *a += b;
        }
        for (a, b) in self.dfeatures.iter_mut().zip(&other.dfeatures) {
            *a += b;
        }
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log S_c` for every class, via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| (l - max) - log_total).collect()
}

fn check_class(label: Label, num_known: usize) -> Result<()> {
    match label {
        Label::Known(c) if c >= num_known => Err(Error::Data(format!(
            "class index {c} out of range for {num_known} known classes"
        ))),
        _ => Ok(()),
    }
}

/// Entropic open-set loss: cross-entropy for known samples, mean negative
/// log-softmax over all known classes for background samples.
pub fn entropic_loss(logits: &[f64], label: Label) -> Result<LossOutput> {
    check_class(label, logits.len())?;
    let probs = softmax(logits);
    let logp = log_softmax(logits);
    let k = logits.len() as f64;
    let (value, dlogits) = match label {
        Label::Known(c) => {
            let mut d = probs;
            d[c] -= 1.0;
            (-logp[c], d)
        }
        Label::Background => {
            let value = -logp.iter().sum::<f64>() / k;
            (value, probs.iter().map(|p| p - 1.0 / k).collect())
        }
    };
    Ok(LossOutput {
        value,
        dlogits,
        dfeatures: Vec::new(),
    })
}

/// Objectosphere magnitude penalty alone (without the entropic part).
pub fn objectosphere_term(
    features: &[f64],
    label: Label,
    xi: f64,
    lambda_o: f64,
) -> Result<LossOutput> {
    if features.iter().any(|f| !f.is_finite()) {
        return Err(Error::Numeric("non-finite feature vector".into()));
    }
    let mag = norm(features);
    let (value, dfeatures) = match label {
        Label::Known(_) => {
            let gap = (xi - mag).max(0.0);
            let grad = if gap > 0.0 && mag > 0.0 {
                let s = -2.0 * lambda_o * gap / mag;
                features.iter().map(|f| s * f).collect()
            } else {
                vec![0.0; features.len()]
            };
            (lambda_o * gap * gap, grad)
        }
        Label::Background => (
            lambda_o * mag * mag,
            features.iter().map(|f| 2.0 * lambda_o * f).collect(),
        ),
    };
    Ok(LossOutput {
        value,
        dlogits: Vec::new(),
        dfeatures,
    })
}

/// `λ_i · ‖μ_c − F‖` for known samples, zero for background.
pub fn intraspread_term(
    features: &[f64],
    label: Label,
    centroids: Option<&Centroids>,
    lambda_i: f64,
) -> Result<LossOutput> {
    let class = match label {
        Label::Background => {
            return Ok(LossOutput {
                value: 0.0,
                dlogits: Vec::new(),
                dfeatures: vec![0.0; features.len()],
            })
        }
        Label::Known(c) => c,
    };
    let centroids = centroids.ok_or_else(|| {
        Error::State("intraspread term needs centroids; none computed yet".into())
    })?;
    let mu = centroids.get(class)?;
    if mu.len() != features.len() {
        return Err(Error::shape(
            "intraspread_term",
            format!("centroid len {}", mu.len()),
            format!("features len {}", features.len()),
        ));
    }
    let diff: Vec<f64> = features.iter().zip(mu.iter()).map(|(f, m)| f - m).collect();
    let dist = norm(&diff);
    let dfeatures = if dist > 0.0 {
        diff.iter().map(|d| lambda_i * d / dist).collect()
    } else {
        vec![0.0; features.len()]
    };
    Ok(LossOutput {
        value: lambda_i * dist,
        dlogits: Vec::new(),
        dfeatures,
    })
}

/// Mode-dependent total loss for one sample.
///
/// * `cross_entropy`: `−log S_c` on known samples, nothing on background.
/// * `entropic`: entropic open-set loss.
/// * `objectosphere`: entropic + magnitude penalty.
/// * `intraspread_objectosphere`: objectosphere + `λ_i ·` intraspread.
///
/// The intraspread term is skipped entirely when `λ_i = 0`, so centroids are
/// only required when `λ_i > 0`.
pub fn combined_loss(
    logits: &[f64],
    features: &[f64],
    label: Label,
    centroids: Option<&Centroids>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if logits.len() != cfg.num_known {
        return Err(Error::shape(
            "combined_loss",
            format!("num_known {}", cfg.num_known),
            format!("logits len {}", logits.len()),
        ));
    }
    check_class(label, cfg.num_known)?;
    let mut out = LossOutput::zero(logits.len(), features.len());
    if cfg.mode == LossMode::CrossEntropy {
        if label.is_background() {
            return Ok(out);
        }
        out.accumulate(&entropic_loss(logits, label)?);
        return Ok(out);
    }

    out.accumulate(&entropic_loss(logits, label)?);
    if matches!(
        cfg.mode,
        LossMode::Objectosphere | LossMode::IntraspreadObjectosphere
    ) {
        out.accumulate(&objectosphere_term(features, label, cfg.xi, cfg.lambda_o)?);
    }
    if cfg.mode == LossMode::IntraspreadObjectosphere && cfg.lambda_i > 0.0 {
        if centroids.is_none() && !label.is_background() {
            return Err(Error::State(
                "intraspread_objectosphere with lambda_i > 0 requires centroids".into(),
            ));
        }
        out.accumulate(&intraspread_term(features, label, centroids, cfg.lambda_i)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN3: f64 = 1.098_612_288_668_109_8;

    fn cents(means: Vec<Vec<f64>>) -> Centroids {
        Centroids {
            means: means.into_iter().map(|m| Vector::new(m).unwrap()).collect(),
            epoch_tag: 1,
        }
    }

    #[test]
    fn softmax_uniform() {
        for l in [[0.0, 0.0, 0.0], [1000.0, 1000.0, 1000.0]] {
            let p = softmax(&l);
            for v in &p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_peaked() {
        // 1/(1+2e^-10) and e^-10/(1+2e^-10), evaluated at 30 digits.
        let p = softmax(&[10.0, 0.0, 0.0]);
        assert!((p[0] - 0.999_909_208_384_341).abs() < 1e-15);
        assert!((p[1] - 4.539_580_782_951_09e-5).abs() < 1e-17);
        assert_eq!(p[1], p[2]);
    }

    #[test]
    fn entropic_background_uniform_is_stationary() {
        let out = entropic_loss(&[0.0, 0.0, 0.0], Label::Background).unwrap();
        assert!((out.value - LN3).abs() < 1e-15);
        assert!(out.dlogits.iter().all(|d| d.abs() < 1e-16));
    }

    #[test]
    fn entropic_known_peaked() {
        // ln(1 + 2e^-10), evaluated at 30 digits
        let out = entropic_loss(&[10.0, 0.0, 0.0], Label::Known(0)).unwrap();
        assert!(
            (out.value - 9.079_573_746_724_44e-5).abs() < 1e-15,
            "{}",
            out.value
        );
    }

    #[test]
    fn entropic_two_class_symmetric() {
        let out = entropic_loss(&[0.0, 0.0], Label::Known(1)).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.dlogits, vec![0.5, -0.5]);
    }

    #[test]
    fn entropic_rejects_bad_class() {
        assert!(entropic_loss(&[0.0, 0.0], Label::Known(2)).is_err());
    }

    #[test]
    fn objectosphere_background_at_origin() {
        let out = objectosphere_term(&[0.0, 0.0], Label::Background, 5.0, 0.3).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.dfeatures, vec![0.0, 0.0]);
    }

    #[test]
    fn objectosphere_known_on_margin() {
        let out = objectosphere_term(&[3.0, 4.0], Label::Known(0), 5.0, 0.3).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.dfeatures, vec![0.0, 0.0]);
    }

    #[test]
    fn objectosphere_known_at_origin_vgg_scale() {
        let out = objectosphere_term(&[0.0, 0.0], Label::Known(1), 300.0, 1e-4).unwrap();
        assert!((out.value - 9.0).abs() < 1e-12);
        assert_eq!(out.dfeatures, vec![0.0, 0.0]);
    }

    #[test]
    fn objectosphere_known_inside_pushes_outward() {
        let out = objectosphere_term(&[0.6, 0.8], Label::Known(0), 3.0, 0.5).unwrap();
        // gap = 2, value = 0.5 * 4, grad = -2 * 0.5 * 2 * F/|F|
        assert!((out.value - 2.0).abs() < 1e-15);
        assert!((out.dfeatures[0] + 1.2).abs() < 1e-15);
        assert!((out.dfeatures[1] + 1.6).abs() < 1e-15);
    }

    #[test]
    fn intraspread_at_centroid() {
        let c = cents(vec![vec![1.0, 2.0], vec![0.0, 0.0]]);
        let out = intraspread_term(&[1.0, 2.0], Label::Known(0), Some(&c), 1.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.dfeatures, vec![0.0, 0.0]);
    }

    #[test]
    fn intraspread_pythagorean() {
        let c = cents(vec![vec![1.0, 1.0], vec![0.0, 0.0]]);
        let out = intraspread_term(&[4.0, 5.0], Label::Known(0), Some(&c), 1.0).unwrap();
        assert!((out.value - 5.0).abs() < 1e-15);
        assert!((out.dfeatures[0] - 0.6).abs() < 1e-15);
        assert!((out.dfeatures[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn intraspread_background_is_zero() {
        let out = intraspread_term(&[7.0, -2.0], Label::Background, None, 1.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.dfeatures, vec![0.0, 0.0]);
    }

    #[test]
    fn intraspread_requires_centroids() {
        assert!(matches!(
            intraspread_term(&[1.0, 1.0], Label::Known(0), None, 1.0),
            Err(Error::State(_))
        ));
        let c = cents(vec![vec![1.0, 1.0]]);
        assert!(matches!(
            intraspread_term(&[1.0, 1.0], Label::Known(1), Some(&c), 1.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn combined_degenerates_to_entropic() {
        let mut cfg = LossConfig::new(LossMode::IntraspreadObjectosphere, 3);
        cfg.lambda_o = 0.0;
        cfg.lambda_i = 0.0;
        let logits = [0.4, -1.0, 2.2];
        for label in [Label::Known(2), Label::Background] {
            let c = combined_loss(&logits, &[0.3, 1.2], label, None, &cfg).unwrap();
            let e = entropic_loss(&logits, label).unwrap();
            assert_eq!(c.value, e.value);
            assert_eq!(c.dlogits, e.dlogits);
        }
    }

    #[test]
    fn combined_background_minimizer() {
        let c = cents(vec![vec![1.0, 1.0]; 3]);
        for (xi, lo, li) in [(5.0, 1e-2, 1e-2), (300.0, 1e-4, 1e-2), (1.0, 3.0, 2.0)] {
            let cfg = LossConfig {
                mode: LossMode::IntraspreadObjectosphere,
                xi,
                lambda_o: lo,
                lambda_i: li,
                num_known: 3,
            };
            let out =
                combined_loss(&[0.0; 3], &[0.0, 0.0], Label::Background, Some(&c), &cfg).unwrap();
            assert!((out.value - LN3).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_ignores_background() {
        let cfg = LossConfig::new(LossMode::CrossEntropy, 3);
        let out = combined_loss(
            &[5.0, -1.0, 0.0],
            &[3.0, 1.0],
            Label::Background,
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(out, LossOutput::zero(3, 2));
    }

    #[test]
    fn combined_requires_centroids_when_intraspread_active() {
        let cfg = LossConfig::new(LossMode::IntraspreadObjectosphere, 2);
        assert!(matches!(
            combined_loss(&[0.0, 1.0], &[1.0, 1.0], Label::Known(0), None, &cfg),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn combined_shape_errors() {
        let cfg = LossConfig::new(LossMode::Entropic, 3);
        assert!(combined_loss(&[0.0, 1.0], &[1.0], Label::Known(0), None, &cfg).is_err());
        assert!(combined_loss(&[0.0, 1.0, 2.0], &[1.0], Label::Known(3), None, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::new(LossMode::Objectosphere, 3);
        assert!(cfg.validate().is_ok());
        cfg.xi = -1.0;
        assert!(cfg.validate().is_err());
        cfg.xi = 1.0;
        cfg.num_known = 1;
        assert!(cfg.validate().is_err());
        cfg.num_known = 2;
        cfg.lambda_i = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in LossMode::ALL {
            assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
        }
        assert!("softmax".parse::<LossMode>().is_err());
    }
}
