//! Open-set evaluation: thresholded max-softmax classification, unknown
//! false-positive accounting, feature-magnitude statistics, confusion
//! matrices, per-sample score dumps and a 2-D feature scatter plot.
//!
//! A known test sample counts as correct only when it is detected as its
//! own class; falling below the threshold (no detection) is an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{Sample, SplitRole};
use crate::error::{Error, Result};
use crate::losses::{softmax, Label};
use crate::numerics::{mlp_forward, MlpParams, Vector};
use crate::trainer::argmax;

/// Detection threshold on the max softmax score.
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Detected { class: usize, score: f64 },
    NoDetection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub verdict: Verdict,
    /// Max softmax score, reported whether or not it cleared the threshold.
    pub score: f64,
    pub feature: Vector,
    pub magnitude: f64,
}

impl Prediction {
    pub fn detected_class(&self) -> Option<usize> {
        match self.verdict {
            Verdict::Detected { class, .. } => Some(class),
            Verdict::NoDetection => None,
        }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    Ok(())
}

/// Thresholded prediction from logits and features.
pub fn verdict_from_logits(logits: &[f64], threshold: f64) -> (Verdict, f64) {
    let probs = softmax(logits);
    let class = argmax(&probs);
    let score = probs[class];
    let verdict = if score >= threshold {
        Verdict::Detected { class, score }
    } else {
        Verdict::NoDetection
    };
    (verdict, score)
}

pub fn classify(params: &MlpParams, x: &[f64], threshold: f64) -> Result<Prediction> {
    check_threshold(threshold)?;
    let t = mlp_forward(params, x)?;
    let (verdict, score) = verdict_from_logits(&t.logits, threshold);
    let magnitude = t.features.norm();
    Ok(Prediction {
        verdict,
        score,
        feature: t.features,
        magnitude,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleGroup {
    Known,
    /// Background class that was shown during training.
    Background,
    /// Unknown class never seen during training.
    Heldout,
}

impl SampleGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleGroup::Known => "known",
            SampleGroup::Background => "background",
            SampleGroup::Heldout => "heldout",
        }
    }
}

/// Maps `source_class` names to evaluation groups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grouping {
    groups: BTreeMap<String, SampleGroup>,
}

impl Grouping {
    /// Known-labeled classes are `known`; background classes with at least
    /// one training row are `background`; the rest are `heldout`.
    pub fn from_dataset(samples: &[Sample]) -> Self {
        let trained_bg: BTreeSet<&str> = samples
            .iter()
            .filter(|s| s.label.is_background() && s.split_role == SplitRole::Train)
            .map(|s| s.source_class.as_str())
            .collect();
        let mut groups = BTreeMap::new();
        for s in samples {
            let g = match s.label {
                Label::Known(_) => SampleGroup::Known,
                Label::Background if trained_bg.contains(s.source_class.as_str()) => {
                    SampleGroup::Background
                }
                Label::Background => SampleGroup::Heldout,
            };
            groups.insert(s.source_class.clone(), g);
        }
        Self { groups }
    }

    pub fn insert(&mut self, class: impl Into<String>, group: SampleGroup) {
        self.groups.insert(class.into(), group);
    }

    /// Group for a sample; unlisted background classes count as held out.
    pub fn group_of(&self, s: &Sample) -> SampleGroup {
        match (self.groups.get(&s.source_class), s.label) {
            (Some(&g), _) => g,
            (None, Label::Known(_)) => SampleGroup::Known,
            (None, Label::Background) => SampleGroup::Heldout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Nearest-rank percentile of ascending-sorted data; `sorted` is non-empty.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn stats_of(mut mags: Vec<f64>) -> MagnitudeStats {
    mags.sort_by(f64::total_cmp);
    // Kahan summation keeps the mean independent of the group size.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &m in &mags {
        let y = m - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    MagnitudeStats {
        count: mags.len(),
        mean: sum / mags.len() as f64,
        p50: nearest_rank(&mags, 50.0),
        p90: nearest_rank(&mags, 90.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeReport {
    pub groups: BTreeMap<SampleGroup, MagnitudeStats>,
    /// Groups requested but without samples; they are left out of `groups`.
    pub empty_groups: Vec<SampleGroup>,
}

/// `‖F(x)‖` statistics per group.
pub fn magnitude_stats(
    params: &MlpParams,
    samples: &[Sample],
    grouping: &Grouping,
) -> Result<MagnitudeReport> {
    let mut by_group: BTreeMap<SampleGroup, Vec<f64>> = BTreeMap::new();
    for s in samples {
        let t = mlp_forward(params, &s.x)?;
        by_group
            .entry(grouping.group_of(s))
            .or_default()
            .push(t.features.norm());
    }
    let empty_groups = [
        SampleGroup::Known,
        SampleGroup::Background,
        SampleGroup::Heldout,
    ]
    .into_iter()
    .filter(|g| !by_group.contains_key(g))
    .collect();
    Ok(MagnitudeReport {
        groups: by_group
            .into_iter()
            .map(|(g, m)| (g, stats_of(m)))
            .collect(),
        empty_groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Known classes (true labels).
    pub rows: Vec<String>,
    /// Known classes followed by `no_detection`.
    pub cols: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    pub format_version: u32,
    pub threshold: f64,
    pub known_test_count: usize,
    pub unknown_test_count: usize,
    pub closed_set_accuracy: f64,
    pub unknown_fp_count: usize,
    pub unknown_fp_rate: f64,
    pub per_class_fp_breakdown: BTreeMap<String, usize>,
    /// Unknown false positives split by source class (e.g. per held-out
    /// object).
    pub fp_by_source_class: BTreeMap<String, usize>,
    pub magnitude_stats: MagnitudeReport,
    pub confusion: Confusion,
}

impl OpenSetReport {
    /// Accuracy restricted to the given known classes (rows of the
    /// confusion matrix).
    pub fn accuracy_on(&self, classes: &[usize]) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for &c in classes {
            if let Some(row) = self.confusion.counts.get(c) {
                hit += row[c];
                total += row.iter().sum::<usize>();
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Thresholded open-set evaluation of `params` on `test`.
pub fn evaluate(
    params: &MlpParams,
    class_names: &[String],
    test: &[Sample],
    threshold: f64,
    grouping: &Grouping,
) -> Result<OpenSetReport> {
    check_threshold(threshold)?;
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let k = params.num_classes();
    if class_names.len() != k {
        return Err(Error::Config(format!(
            "{} class names for a {k}-class network",
            class_names.len()
        )));
    }
    let mut counts = vec![vec![0usize; k + 1]; k];
    let mut breakdown: BTreeMap<String, usize> =
        class_names.iter().map(|n| (n.clone(), 0)).collect();
    let mut by_source: BTreeMap<String, usize> = BTreeMap::new();
    let (mut known_n, mut correct, mut unknown_n, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for s in test {
        let p = classify(params, &s.x, threshold)?;
        match s.label {
            Label::Known(c) => {
                if c >= k {
                    return Err(Error::Data(format!(
                        "test sample of `{}` has class {c}, network has {k}",
                        s.source_class
                    )));
                }
                known_n += 1;
                let col = p.detected_class().unwrap_or(k);
                counts[c][col] += 1;
                if col == c {
                    correct += 1;
                }
            }
            Label::Background => {
                unknown_n += 1;
                let entry = by_source.entry(s.source_class.clone()).or_insert(0);
                if let Some(pred) = p.detected_class() {
                    fp += 1;
                    *entry += 1;
                    *breakdown
                        .get_mut(&class_names[pred])
                        .expect("every class listed") += 1;
                }
            }
        }
    }
    let ratio = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    let mut cols = class_names.to_vec();
    cols.push("no_detection".into());
    Ok(OpenSetReport {
        format_version: REPORT_FORMAT_VERSION,
        threshold,
        known_test_count: known_n,
        unknown_test_count: unknown_n,
        closed_set_accuracy: ratio(correct, known_n),
        unknown_fp_count: fp,
        unknown_fp_rate: ratio(fp, unknown_n),
        per_class_fp_breakdown: breakdown,
        fp_by_source_class: by_source,
        magnitude_stats: magnitude_stats(params, test, grouping)?,
        confusion: Confusion {
            rows: class_names.to_vec(),
            cols,
            counts,
        },
    })
}

/// Writes `source_class,label,pred_class,score,magnitude` with a header.
/// `pred_class` is the detected class name or `none`.
pub fn write_scores_csv<W: Write>(
    params: &MlpParams,
    class_names: &[String],
    samples: &[Sample],
    threshold: f64,
    sink: W,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    let csv_err = |e: csv::Error| Error::Data(format!("writing score CSV: {e}"));
    w.write_record(["source_class", "label", "pred_class", "score", "magnitude"])
        .map_err(csv_err)?;
    for s in samples {
        let p = classify(params, &s.x, threshold)?;
        let label = match s.label {
            Label::Known(c) => class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
            Label::Background => "background".into(),
        };
        let pred = p
            .detected_class()
            .map_or_else(|| "none".to_string(), |c| class_names[c].clone());
        w.write_record([
            s.source_class.clone(),
            label,
            pred,
            p.score.to_string(),
            p.magnitude.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing score CSV: {e}")))?;
    Ok(())
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];
const SVG_SIZE: f64 = 520.0;
const SVG_MARGIN: f64 = 30.0;

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Plot coordinate of a 2-D feature given the half-extent shown.
pub fn svg_point(feature: &[f64], extent: f64) -> (f64, f64) {
    let c = SVG_SIZE / 2.0;
    let s = (c - SVG_MARGIN) / extent;
    (c + feature[0] * s, c - feature[1] * s)
}

/// Standalone SVG scatter of the 2-D feature space.
///
/// Marker color is keyed by `source_class` (ground truth), marker shape by
/// the thresholded prediction: one shape per detected class and a cross for
/// no detection. The objectosphere radius `xi` is drawn as a dashed circle
/// around the origin.
pub fn scatter_svg(
    params: &MlpParams,
    class_names: &[String],
    xi: f64,
    samples: &[Sample],
    threshold: f64,
) -> Result<String> {
    if params.feature_dim() != 2 {
        return Err(Error::Config(format!(
            "scatter needs a 2-D feature layer, this network has {}",
            params.feature_dim()
        )));
    }
    let preds = samples
        .iter()
        .map(|s| classify(params, &s.x, threshold))
        .collect::<Result<Vec<_>>>()?;
    let max_coord = preds
        .iter()
        .flat_map(|p| p.feature.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let extent = 1.05 * max_coord.max(xi).max(1.0);
    let sources: Vec<&str> = samples
        .iter()
        .map(|s| s.source_class.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let color = |name: &str| {
        let i = sources.iter().position(|s| *s == name).unwrap_or(0);
        PALETTE[i % PALETTE.len()]
    };

    let mut svg = String::new();
    let size = SVG_SIZE;
    let c = size / 2.0;
    let r_px = xi * (c - SVG_MARGIN) / extent;
    // `write!` to a String cannot fail.
    let _ = writeln!(
        svg,
        r##"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>
<g id="axes" stroke="#999999" stroke-width="1">
<line x1="{m}" y1="{c}" x2="{e}" y2="{c}"/>
<line x1="{c}" y1="{m}" x2="{c}" y2="{e}"/>
</g>
<circle id="xi" cx="{c}" cy="{c}" r="{r_px:.2}" fill="none" stroke="#444444" stroke-dasharray="4 3"/>"##,
        m = SVG_MARGIN,
        e = size - SVG_MARGIN,
    );

    let _ = writeln!(
        svg,
        r#"<g id="legend" font-family="sans-serif" font-size="11">"#
    );
    for (i, name) in sources.iter().enumerate() {
        let y = 14.0 + 13.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="6" y="{:.1}" width="9" height="9" fill="{}"/><text x="19" y="{:.1}">{}</text>"#,
            y - 8.0,
            color(name),
            y,
            xml_escape(name)
        );
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g id="samples" stroke-width="1.2">"#);
    for (s, p) in samples.iter().zip(&preds) {
        let (x, y) = svg_point(&p.feature, extent);
        let col = color(&s.source_class);
        let title = match p.verdict {
            Verdict::Detected { class, score } => format!(
                "{} → {} ({score:.3})",
                s.source_class,
                class_names.get(class).map_or("?", String::as_str)
            ),
            Verdict::NoDetection => format!("{} → none ({:.3})", s.source_class, p.score),
        };
        let title = xml_escape(&title);
        let shape = match p.detected_class() {
            None => format!(
                r#"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{col}" fill="none">"#,
                x - 3.5,
                y - 3.5,
                x + 3.5,
                y + 3.5,
                x - 3.5,
                y + 3.5,
                x + 3.5,
                y - 3.5
            ),
            Some(k) => match k % 4 {
                0 => format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{col}">"#),
                1 => format!(
                    r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="{col}">"#,
                    x - 3.5,
                    y - 3.5
                ),
                2 => format!(
                    r#"<path d="M{x:.2} {:.2}L{:.2} {:.2}L{:.2} {:.2}Z" fill="{col}">"#,
                    y - 4.0,
                    x + 4.0,
                    y + 3.0,
                    x - 4.0,
                    y + 3.0
                ),
                _ => format!(
                    r#"<path d="M{x:.2} {:.2}L{:.2} {y:.2}L{x:.2} {:.2}L{:.2} {y:.2}Z" fill="{col}">"#,
                    y - 4.5,
                    x + 4.5,
                    y + 4.5,
                    x - 4.5
                ),
            },
        };
        let close = if shape.starts_with("<circle") {
            "</circle>"
        } else if shape.starts_with("<rect") {
            "</rect>"
        } else {
            "</path>"
        };
        let _ = writeln!(svg, "{shape}<title>{title}</title>{close}");
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    Ok(svg)
}
