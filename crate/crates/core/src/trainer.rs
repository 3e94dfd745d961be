//! Mini-batch SGD around the open-set losses, with per-epoch centroid
//! refresh, base training and new-class (incremental) training on the merged
//! old + new dataset.
//!
//! Schedule: epoch 1 always runs with the intraspread weight treated as 0,
//! since no centroids exist yet. After every epoch the class centroids are
//! recomputed from the end-of-epoch parameters and used, unchanged, for the
//! whole of the next epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, Centroids, Label, LossConfig, LossMode};
use crate::numerics::{
    init_params_with, mlp_backward, mlp_forward, FeatureActivation, MlpParams, ParamGrads, Vector,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 16,
            learning_rate: 0.05,
            seed,
            loss,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub closed_set_train_accuracy: f64,
    pub mean_bg_feature_magnitude: f64,
    pub mean_known_feature_magnitude: f64,
}

/// Everything needed to resume, evaluate or extend a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub centroids: Option<Centroids>,
    pub loss: LossConfig,
    pub class_names: Vec<String>,
    pub history: Vec<EpochStats>,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        if self.class_names.len() != self.params.num_classes()
            || self.loss.num_known != self.params.num_classes()
        {
            return Err(Error::Config(format!(
                "checkpoint has {} class names, loss num_known {} and {} output classes",
                self.class_names.len(),
                self.loss.num_known,
                self.params.num_classes()
            )));
        }
        if let Some(c) = &self.centroids {
            if c.means.len() != self.params.num_classes()
                || c.means.iter().any(|m| m.len() != self.params.feature_dim())
            {
                return Err(Error::Config(
                    "centroid shapes do not match the network".into(),
                ));
            }
        }
        self.loss.validate()
    }
}

/// Per-class mean feature vector under `params`; background samples are
/// ignored.
pub fn compute_centroids(params: &MlpParams, samples: &[Sample]) -> Result<Centroids> {
    let k = params.num_classes();
    let d = params.feature_dim();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for s in samples {
        if let Label::Known(c) = s.label {
            if c >= k {
                return Err(Error::Data(format!(
                    "sample of `{}` has class index {c}, network has {k} classes",
                    s.source_class
                )));
            }
            let t = mlp_forward(params, &s.x)?;
            for (acc, f) in sums[c].iter_mut().zip(t.features.iter()) {
                *acc += f;
            }
            counts[c] += 1;
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (sum, &n))| {
            if n == 0 {
                return Err(Error::Data(format!("known class {c} has no samples")));
            }
            Vector::new(sum.into_iter().map(|v| v / n as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Centroids {
        means,
        epoch_tag: 0,
    })
}

/// Loss config actually used during `epoch` (the intraspread warm-up).
pub fn effective_loss(cfg: &LossConfig, epoch: usize) -> LossConfig {
    let mut eff = *cfg;
    if epoch <= 1 {
        eff.lambda_i = 0.0;
    }
    eff
}

/// Shuffle order for one epoch: ChaCha8 seeded with `seed`, stream `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

fn check_samples(params: &MlpParams, data: &[Sample]) -> Result<()> {
    for s in data {
        if s.x.len() != params.input_dim() {
            return Err(Error::shape(
                "training data",
                format!("input dim {}", params.input_dim()),
                format!("sample of `{}` with {} entries", s.source_class, s.x.len()),
            ));
        }
        if let Label::Known(c) = s.label {
            if c >= params.num_classes() {
                return Err(Error::Data(format!(
                    "sample of `{}` has class index {c}, network has {} classes",
                    s.source_class,
                    params.num_classes()
                )));
            }
        }
    }
    Ok(())
}

/// Samples that contribute to the loss: everything, except that the
/// closed-set baseline never sees background rows.
fn loss_samples(data: &[Sample], mode: LossMode) -> Vec<&Sample> {
    data.iter()
        .filter(|s| mode != LossMode::CrossEntropy || !s.label.is_background())
        .collect()
}

/// One pass of mini-batch gradient descent. The batch gradient is the mean of
/// per-sample gradients, summed in batch order. Statistics are measured on
/// the updated parameters.
pub fn train_epoch(
    params: &MlpParams,
    data: &[Sample],
    centroids: Option<&Centroids>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(MlpParams, EpochStats)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training data is empty".into()));
    }
    check_samples(params, data)?;
    let loss = effective_loss(&cfg.loss, epoch);
    if loss.num_known != params.num_classes() {
        return Err(Error::Config(format!(
            "loss expects {} classes, network has {}",
            loss.num_known,
            params.num_classes()
        )));
    }
    if loss.needs_centroids() && centroids.is_none() {
        return Err(Error::State(format!(
            "epoch {epoch} of {} training needs centroids from the previous epoch",
            loss.mode
        )));
    }

    let used = loss_samples(data, loss.mode);
    if used.is_empty() {
        return Err(Error::Data(format!(
            "no samples contribute to the {} loss",
            loss.mode
        )));
    }
    let order = epoch_order(used.len(), cfg.seed, epoch, cfg.shuffle);
    let mut params = params.clone();
    for batch in order.chunks(cfg.batch_size) {
        let mut grad = ParamGrads::zeros_like(&params);
        for &i in batch {
            let s = used[i];
            let t = mlp_forward(&params, &s.x)?;
            let out = combined_loss(&t.logits, &t.features, s.label, centroids, &loss)?;
            let g = mlp_backward(&params, &t, &out.dlogits, &out.dfeatures)?;
            grad.add_scaled(&g, 1.0);
        }
        grad.scale(1.0 / batch.len() as f64);
        params.sgd_step(&grad, cfg.learning_rate);
    }

    let stats = epoch_stats(&params, data, centroids, &loss, epoch)?;
    Ok((params, stats))
}

fn epoch_stats(
    params: &MlpParams,
    data: &[Sample],
    centroids: Option<&Centroids>,
    loss: &LossConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let (mut correct, mut known_n) = (0usize, 0usize);
    let (mut bg_mag, mut bg_n) = (0.0, 0usize);
    let mut known_mag = 0.0;
    for s in data {
        let t = mlp_forward(params, &s.x)?;
        if loss.mode != LossMode::CrossEntropy || !s.label.is_background() {
            loss_sum += combined_loss(&t.logits, &t.features, s.label, centroids, loss)?.value;
            loss_n += 1;
        }
        let mag = t.features.norm();
        match s.label {
            Label::Known(c) => {
                known_n += 1;
                known_mag += mag;
                if argmax(&t.logits) == c {
                    correct += 1;
                }
            }
            Label::Background => {
                bg_n += 1;
                bg_mag += mag;
            }
        }
    }
    let ratio = |a: f64, n: usize| if n == 0 { 0.0 } else { a / n as f64 };
    Ok(EpochStats {
        epoch,
        mean_loss: ratio(loss_sum, loss_n),
        closed_set_train_accuracy: ratio(correct as f64, known_n),
        mean_bg_feature_magnitude: ratio(bg_mag, bg_n),
        mean_known_feature_magnitude: ratio(known_mag, known_n),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn require_all_classes(data: &[Sample], num_known: usize, names: &[String]) -> Result<()> {
    for c in 0..num_known {
        if !data.iter().any(|s| s.label == Label::Known(c)) {
            let name = names.get(c).map_or("?", String::as_str);
            return Err(Error::Data(format!(
                "known class {c} (`{name}`) has no training samples"
            )));
        }
    }
    Ok(())
}

/// Runs `cfg.epochs` epochs from `params`, refreshing centroids after each.
fn run_epochs(
    mut params: MlpParams,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(MlpParams, Centroids, Vec<EpochStats>)> {
    let mut centroids: Option<Centroids> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (next, stats) = train_epoch(&params, data, centroids.as_ref(), cfg, epoch)?;
        params = next;
        let mut fresh = compute_centroids(&params, data)?;
        fresh.epoch_tag = epoch;
        centroids = Some(fresh);
        history.push(stats);
    }
    let centroids = centroids.expect("at least one epoch ran");
    Ok((params, centroids, history))
}

/// Base training from a seeded initialization with a rectified feature
/// layer.
pub fn train(
    data: &[Sample],
    cfg: &TrainConfig,
    layer_dims: &[usize],
    class_names: &[String],
) -> Result<Checkpoint> {
    train_with(
        data,
        cfg,
        layer_dims,
        class_names,
        FeatureActivation::Rectifier,
    )
}

/// [`train`] with an explicit feature-layer activation.
pub fn train_with(
    data: &[Sample],
    cfg: &TrainConfig,
    layer_dims: &[usize],
    class_names: &[String],
    feature_activation: FeatureActivation,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let params = init_params_with(layer_dims, cfg.seed, feature_activation)?;
    if params.num_classes() != cfg.loss.num_known || class_names.len() != cfg.loss.num_known {
        return Err(Error::Config(format!(
            "layer dims end in {} classes, loss expects {}, {} class names given",
            params.num_classes(),
            cfg.loss.num_known,
            class_names.len()
        )));
    }
    check_samples(&params, data)?;
    require_all_classes(data, cfg.loss.num_known, class_names)?;
    let (params, centroids, history) = run_epochs(params, data, cfg)?;
    Ok(Checkpoint {
        params,
        centroids: Some(centroids),
        loss: cfg.loss,
        class_names: class_names.to_vec(),
        history,
        format_version: CHECKPOINT_FORMAT_VERSION,
    })
}

/// Adds one class to `base` and retrains the whole network on the merged
/// dataset `old_data ∪ new_data`. Every new sample is labeled with the new
/// class index; the new output row is drawn from `cfg.seed`. The loss config
/// is taken from `cfg` with `num_known` bumped to the new class count.
pub fn incremental_train(
    base: &Checkpoint,
    old_data: &[Sample],
    new_data: &[Sample],
    new_class_name: &str,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    base.validate()?;
    if new_data.is_empty() {
        return Err(Error::Data("no samples for the new class".into()));
    }
    if new_class_name.is_empty() {
        return Err(Error::Config("new class name is empty".into()));
    }
    if base.class_names.iter().any(|n| n == new_class_name) {
        return Err(Error::Config(format!(
            "class `{new_class_name}` already exists in the base model"
        )));
    }
    let new_index = base.class_names.len();
    let mut cfg = cfg.clone();
    cfg.loss.num_known = new_index + 1;
    cfg.validate()?;

    let params = base.params.with_extra_class(cfg.seed);
    let mut merged = old_data.to_vec();
    merged.extend(new_data.iter().cloned().map(|mut s| {
        s.label = Label::Known(new_index);
        s
    }));
    let mut class_names = base.class_names.clone();
    class_names.push(new_class_name.to_string());

    check_samples(&params, &merged)?;
    require_all_classes(&merged, cfg.loss.num_known, &class_names)?;
    let (params, centroids, history) = run_epochs(params, &merged, &cfg)?;
    Ok(Checkpoint {
        params,
        centroids: Some(centroids),
        loss: cfg.loss,
        class_names,
        history,
        format_version: CHECKPOINT_FORMAT_VERSION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SplitRole;
    use crate::numerics::{finite_difference, init_params, Matrix};

    fn sample(x: &[f64], label: Label) -> Sample {
        Sample {
            x: Vector::new(x.to_vec()).unwrap(),
            label,
            source_class: match label {
                Label::Known(c) => format!("k{c}"),
                Label::Background => "bg".into(),
            },
            split_role: SplitRole::Train,
        }
    }

    fn identity_net() -> MlpParams {
        MlpParams::new(
            vec![2, 2],
            vec![Matrix::identity(2)],
            vec![Vector::zeros(2)],
        )
        .unwrap()
    }

    fn blobs() -> Vec<Sample> {
        let mut out = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.05;
            out.push(sample(&[2.0 + t, 2.0 - t], Label::Known(0)));
            out.push(sample(&[-2.0 - t, -2.0 + t], Label::Known(1)));
        }
        for i in 0..6 {
            out.push(sample(&[0.1 * i as f64, -0.1], Label::Background));
        }
        out
    }

    #[test]
    fn centroids_identity_map() {
        let data = vec![
            sample(&[1.0, 1.0], Label::Known(0)),
            sample(&[3.0, 3.0], Label::Known(0)),
            sample(&[5.0, -1.0], Label::Known(1)),
            sample(&[100.0, 100.0], Label::Background),
        ];
        let c = compute_centroids(&identity_net(), &data).unwrap();
        assert_eq!(c.means[0].as_slice(), &[2.0, 2.0]);
        assert_eq!(c.means[1].as_slice(), &[5.0, -1.0]);
    }

    #[test]
    fn centroids_missing_class() {
        let data = vec![sample(&[1.0, 1.0], Label::Known(0))];
        let err = compute_centroids(&identity_net(), &data).unwrap_err();
        assert!(
            matches!(err, Error::Data(ref m) if m.contains("class 1")),
            "{err}"
        );
    }

    #[test]
    fn centroids_match_brute_force_mean() {
        let params = init_params(&[2, 6, 2, 3], 8).unwrap();
        let data: Vec<Sample> = (0..30)
            .map(|i| {
                let x = [(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.91).cos() * 3.0];
                sample(&x, Label::Known(i % 3))
            })
            .collect();
        let c = compute_centroids(&params, &data).unwrap();
        for class in 0..3 {
            let feats: Vec<Vec<f64>> = data
                .iter()
                .filter(|s| s.label == Label::Known(class))
                .map(|s| mlp_forward(&params, &s.x).unwrap().features.into_inner())
                .collect();
            for d in 0..2 {
                let mean = feats.iter().map(|f| f[d]).sum::<f64>() / feats.len() as f64;
                assert!((c.means[class][d] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let params = init_params(&[2, 8, 2, 2], 1).unwrap();
        let mut cfg = TrainConfig::new(LossConfig::new(LossMode::Objectosphere, 2), 1, 3);
        cfg.learning_rate = 0.0;
        let (next, _) = train_epoch(&params, &blobs(), None, &cfg, 1).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn single_sample_step_matches_finite_differences() {
        let dims = [2, 5, 2, 3];
        let lr = 0.1;
        for mode in LossMode::ALL {
            let params = init_params(&dims, 21).unwrap();
            let s = sample(&[0.9, -0.7], Label::Known(1));
            let mut loss = LossConfig::new(mode, 3);
            loss.xi = 4.0;
            let mut cfg = TrainConfig::new(loss, 1, 0);
            cfg.learning_rate = lr;
            cfg.batch_size = 1;
            let (next, _) = train_epoch(&params, std::slice::from_ref(&s), None, &cfg, 1).unwrap();
            let t = mlp_forward(&params, &s.x).unwrap();
            let hidden = &t.pre_activations[..t.pre_activations.len() - 1];
            assert!(hidden.iter().flat_map(|z| z.iter()).all(|z| z.abs() > 1e-3));

            let eff = effective_loss(&loss, 1);
            let f = |p: &[f64]| {
                let pr = MlpParams::from_flat(&dims, p).unwrap();
                let t = mlp_forward(&pr, &s.x).unwrap();
                combined_loss(&t.logits, &t.features, s.label, None, &eff)
                    .unwrap()
                    .value
            };
            let flat = params.to_flat();
            let fd = finite_difference(f, &flat, 1e-5).unwrap();
            for ((p0, p1), g) in flat.iter().zip(next.to_flat()).zip(fd.iter()) {
                let step = p1 - p0;
                let want = -lr * g;
                let err = (step - want).abs();
                assert!(
                    err <= 1e-9 || err / want.abs() <= 1e-4,
                    "{mode}: {step} vs {want}"
                );
            }
        }
    }

    #[test]
    fn shuffle_depends_on_epoch() {
        let a = epoch_order(50, 7, 1, true);
        let b = epoch_order(50, 7, 2, true);
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(50, 7, 1, true));
        assert_eq!(epoch_order(5, 7, 1, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn epoch_needs_centroids_after_warmup() {
        let params = init_params(&[2, 8, 2, 2], 1).unwrap();
        let cfg = TrainConfig::new(LossConfig::new(LossMode::IntraspreadObjectosphere, 2), 2, 3);
        assert!(train_epoch(&params, &blobs(), None, &cfg, 1).is_ok());
        assert!(matches!(
            train_epoch(&params, &blobs(), None, &cfg, 2),
            Err(Error::State(_))
        ));
        assert!(matches!(
            train_epoch(&params, &[], None, &cfg, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn warmup_epoch_equals_objectosphere() {
        let dims = [2, 8, 2, 2];
        let names = vec!["a".to_string(), "b".to_string()];
        let a = train(
            &blobs(),
            &TrainConfig::new(LossConfig::new(LossMode::IntraspreadObjectosphere, 2), 1, 4),
            &dims,
            &names,
        )
        .unwrap();
        let b = train(
            &blobs(),
            &TrainConfig::new(LossConfig::new(LossMode::Objectosphere, 2), 1, 4),
            &dims,
            &names,
        )
        .unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn train_is_deterministic() {
        let dims = [2, 8, 2, 2];
        let names = vec!["a".to_string(), "b".to_string()];
        let cfg = TrainConfig::new(
            LossConfig::new(LossMode::IntraspreadObjectosphere, 2),
            4,
            12,
        );
        let a = train(&blobs(), &cfg, &dims, &names).unwrap();
        let b = train(&blobs(), &cfg, &dims, &names).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 4);
        assert_eq!(a.centroids.as_ref().unwrap().epoch_tag, 4);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let dims = [2, 16, 2, 2];
        let names = vec!["a".to_string(), "b".to_string()];
        let cfg = TrainConfig::new(LossConfig::new(LossMode::CrossEntropy, 2), 30, 2);
        let ck = train_with(&blobs(), &cfg, &dims, &names, FeatureActivation::Identity).unwrap();
        assert!(
            ck.history.last().unwrap().closed_set_train_accuracy >= 0.95,
            "{:?}",
            ck.history
        );
    }

    #[test]
    fn cross_entropy_ignores_background_rows() {
        let dims = [2, 8, 2, 2];
        let names = vec!["a".to_string(), "b".to_string()];
        let cfg = TrainConfig::new(LossConfig::new(LossMode::CrossEntropy, 2), 3, 2);
        let with_bg = train(&blobs(), &cfg, &dims, &names).unwrap();
        let no_bg: Vec<Sample> = blobs()
            .into_iter()
            .filter(|s| !s.label.is_background())
            .collect();
        let without = train(&no_bg, &cfg, &dims, &names).unwrap();
        assert_eq!(with_bg.params, without.params);
    }

    #[test]
    fn entropic_equals_cross_entropy_without_background() {
        let dims = [2, 8, 2, 2];
        let names = vec!["a".to_string(), "b".to_string()];
        let data: Vec<Sample> = blobs()
            .into_iter()
            .filter(|s| !s.label.is_background())
            .collect();
        let mut loss = LossConfig::new(LossMode::Entropic, 2);
        loss.lambda_o = 0.0;
        loss.lambda_i = 0.0;
        let a = train(&data, &TrainConfig::new(loss, 5, 6), &dims, &names).unwrap();
        loss.mode = LossMode::CrossEntropy;
        let b = train(&data, &TrainConfig::new(loss, 5, 6), &dims, &names).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn train_rejects_missing_class_and_bad_config() {
        let dims = [2, 8, 2, 3];
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cfg = TrainConfig::new(LossConfig::new(LossMode::Entropic, 3), 2, 2);
        assert!(matches!(
            train(&blobs(), &cfg, &dims, &names),
            Err(Error::Data(_))
        ));
        let mut bad = cfg.clone();
        bad.epochs = 0;
        assert!(matches!(
            train(&blobs(), &bad, &dims, &names),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(&blobs(), &cfg, &[2, 8, 2, 2], &names),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn incremental_training_validates_inputs() {
        let dims = [2, 8, 2, 2];
        let names = vec!["a".to_string(), "b".to_string()];
        let cfg = TrainConfig::new(LossConfig::new(LossMode::Objectosphere, 2), 2, 2);
        let base = train(&blobs(), &cfg, &dims, &names).unwrap();
        assert!(matches!(
            incremental_train(&base, &blobs(), &[], "c", &cfg),
            Err(Error::Data(_))
        ));
        let new = vec![sample(&[2.0, -2.0], Label::Background)];
        assert!(matches!(
            incremental_train(&base, &blobs(), &new, "a", &cfg),
            Err(Error::Config(_))
        ));
        let ck = incremental_train(&base, &blobs(), &new, "c", &cfg).unwrap();
        assert_eq!(ck.class_names, vec!["a", "b", "c"]);
        assert_eq!(ck.params.num_classes(), 3);
        assert_eq!(ck.loss.num_known, 3);
        ck.validate().unwrap();
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let data = blobs();
        let names = vec!["a".to_string(), "b".to_string()];
        let mut good = 0;
        for seed in 0..10 {
            let mut cfg = TrainConfig::new(LossConfig::new(LossMode::Objectosphere, 2), 5, seed);
            cfg.learning_rate = 1e-3;
            cfg.batch_size = data.len();
            let ck = train(&data, &cfg, &[2, 8, 2, 2], &names).unwrap();
            if ck
                .history
                .windows(2)
                .all(|w| w[1].mean_loss <= w[0].mean_loss)
            {
                good += 1;
            }
        }
        assert!(good >= 9, "{good}/10 seeds descended monotonically");
    }
}
