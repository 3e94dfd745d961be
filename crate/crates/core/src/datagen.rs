//! Seeded synthetic open-set datasets: isotropic Gaussian blobs for known
//! classes, for background classes shown during training, and for held-out
//! unknown classes that only appear in the test split.
//!
//! Every class draws from its own ChaCha8 stream (`seed`, stream id derived
//! from the class group and index), so adding or removing a class leaves the
//! samples of every other class untouched.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Label;
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vector,
    pub label: Label,
    /// Generator class, including background and held-out classes.
    pub source_class: String,
    pub split_role: SplitRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBlob {
    pub name: String,
    pub center: Vec<f64>,
    pub stddev: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutBlob {
    pub name: String,
    pub center: Vec<f64>,
    pub stddev: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub input_dim: usize,
    pub known: Vec<ClassBlob>,
    pub background_train: Vec<ClassBlob>,
    pub heldout_unknown: Vec<HeldoutBlob>,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.known.is_empty() {
            return Err(Error::Config("spec needs at least one known class".into()));
        }
        let mut names = BTreeSet::new();
        let all = self
            .known
            .iter()
            .chain(&self.background_train)
            .map(|b| (&b.name, &b.center, b.stddev))
            .chain(
                self.heldout_unknown
                    .iter()
                    .map(|h| (&h.name, &h.center, h.stddev)),
            );
        for (name, center, stddev) in all {
            if name.is_empty() || name.contains(',') {
                return Err(Error::Config(format!("invalid class name `{name}`")));
            }
            if !names.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate class name `{name}`")));
            }
            if !(stddev > 0.0 && stddev.is_finite()) {
                return Err(Error::Config(format!(
                    "class `{name}`: stddev must be positive, got {stddev}"
                )));
            }
            if center.len() != self.input_dim {
                return Err(Error::Config(format!(
                    "class `{name}`: center has {} entries, input_dim is {}",
                    center.len(),
                    self.input_dim
                )));
            }
            if center.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("class `{name}`: non-finite center")));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.known.iter().map(|k| k.name.clone()).collect()
    }
}

const KNOWN_STREAM: u64 = 0;
const BACKGROUND_STREAM: u64 = 1 << 32;
const HELDOUT_STREAM: u64 = 2 << 32;

fn draw(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    stddev: f64,
    label: Label,
    name: &str,
    role: SplitRole,
) -> Sample {
    let x = center
        .iter()
        .map(|c| {
            let z: f64 = rng.sample(StandardNormal);
            c + stddev * z
        })
        .collect();
    Sample {
        x: Vector::from_raw(x),
        label,
        source_class: name.to_string(),
        split_role: role,
    }
}

fn class_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws every class of `spec`: known classes first (train then test rows),
/// then background-train classes, then held-out classes (test only).
pub fn generate_dataset(spec: &BlobSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (i, blob) in spec.known.iter().enumerate() {
        let mut rng = class_rng(seed, KNOWN_STREAM | i as u64);
        for (n, role) in [
            (blob.n_train, SplitRole::Train),
            (blob.n_test, SplitRole::Test),
        ] {
            for _ in 0..n {
                out.push(draw(
                    &mut rng,
                    &blob.center,
                    blob.stddev,
                    Label::Known(i),
                    &blob.name,
                    role,
                ));
            }
        }
    }
    for (i, blob) in spec.background_train.iter().enumerate() {
        let mut rng = class_rng(seed, BACKGROUND_STREAM | i as u64);
        for (n, role) in [
            (blob.n_train, SplitRole::Train),
            (blob.n_test, SplitRole::Test),
        ] {
            for _ in 0..n {
                out.push(draw(
                    &mut rng,
                    &blob.center,
                    blob.stddev,
                    Label::Background,
                    &blob.name,
                    role,
                ));
            }
        }
    }
    for (i, blob) in spec.heldout_unknown.iter().enumerate() {
        let mut rng = class_rng(seed, HELDOUT_STREAM | i as u64);
        for _ in 0..blob.n_test {
            out.push(draw(
                &mut rng,
                &blob.center,
                blob.stddev,
                Label::Background,
                &blob.name,
                SplitRole::Test,
            ));
        }
    }
    Ok(out)
}

/// Seed for placing background-train centers in [`default_paper_shape`].
const BACKGROUND_LAYOUT_SEED: u64 = 0x00b1_ec75_fe7e;

pub const KNOWN_RADIUS: f64 = 4.0;
pub const KNOWN_STDDEV: f64 = 0.6;
pub const BACKGROUND_STDDEV: f64 = 0.35;
pub const HELDOUT_STDDEV: f64 = 0.45;
pub const HELDOUT_RADIUS: f64 = 3.0;

fn polar(radius: f64, degrees: f64) -> Vec<f64> {
    let t = degrees * PI / 180.0;
    vec![radius * t.cos(), radius * t.sin()]
}

/// The reference open-world composition in 2-D: three known classes
/// (tomato, apple, lime) on a circle of radius 4 with 150 training samples
/// each and 35/24/31 test samples; twenty background classes with two
/// training samples each, centered uniformly (by area) in the annulus
/// `1 ≤ r ≤ 6`; two held-out unknowns (ficus: 18, kiwi: 13) placed in the
/// gaps between the known clusters.
pub fn default_paper_shape() -> BlobSpec {
    let known = [
        ("tomato", 90.0, 35),
        ("apple", 210.0, 24),
        ("lime", 330.0, 31),
    ]
    .into_iter()
    .map(|(name, deg, n_test)| ClassBlob {
        name: name.into(),
        center: polar(KNOWN_RADIUS, deg),
        stddev: KNOWN_STDDEV,
        n_train: 150,
        n_test,
    })
    .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(BACKGROUND_LAYOUT_SEED);
    let background_train = (0..20)
        .map(|i| {
            let u: f64 = rng.random();
            let r = (1.0 + u * (36.0 - 1.0)).sqrt();
            let deg: f64 = rng.random::<f64>() * 360.0;
            ClassBlob {
                name: format!("background_{i:02}"),
                center: polar(r, deg),
                stddev: BACKGROUND_STDDEV,
                n_train: 2,
                n_test: 0,
            }
        })
        .collect();

    // Both unknowns sit in the gaps next to apple, nearer to it than to the
    // other neighbor.
    let heldout_unknown = vec![
        HeldoutBlob {
            name: "ficus".into(),
            center: polar(HELDOUT_RADIUS, 250.0),
            stddev: HELDOUT_STDDEV,
            n_test: 18,
        },
        HeldoutBlob {
            name: "kiwi".into(),
            center: polar(HELDOUT_RADIUS, 170.0),
            stddev: HELDOUT_STDDEV,
            n_test: 13,
        },
    ];

    BlobSpec {
        input_dim: 2,
        known,
        background_train,
        heldout_unknown,
    }
}

pub fn train_split(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.split_role == SplitRole::Train)
        .cloned()
        .collect()
}

pub fn test_split(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.split_role == SplitRole::Test)
        .cloned()
        .collect()
}

fn label_field(label: Label) -> String {
    match label {
        Label::Known(c) => c.to_string(),
        Label::Background => "background".to_string(),
    }
}

/// Writes `split_role,source_class,label,x_0,...,x_{d-1}` with a header row.
/// Known labels are written as the class index, background as `background`.
pub fn write_dataset_csv<W: Write>(samples: &[Sample], sink: W) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    if samples.iter().any(|s| s.x.len() != dim) {
        return Err(Error::Data("samples have differing input dims".into()));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(sink);
    let mut header = vec![
        "split_role".to_string(),
        "source_class".into(),
        "label".into(),
    ];
    header.extend((0..dim).map(|i| format!("x_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in samples {
        let mut row = vec![
            s.split_role.as_str().to_string(),
            s.source_class.clone(),
            label_field(s.label),
        ];
        row.extend(s.x.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("flushing dataset CSV: {e}")))?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Inverse of [`write_dataset_csv`].
pub fn read_dataset_csv<R: Read>(source: R) -> Result<Vec<Sample>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let header = r.headers().map_err(csv_err)?.clone();
    let fixed = ["split_role", "source_class", "label"];
    if header.len() < 4 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "expected header split_role,source_class,label,x_0,..., got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let dim = header.len() - 3;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse { line, msg };
        if rec.len() != dim + 3 {
            return Err(bad(format!(
                "expected {} fields, got {}",
                dim + 3,
                rec.len()
            )));
        }
        let split_role = match &rec[0] {
            "train" => SplitRole::Train,
            "test" => SplitRole::Test,
            other => return Err(bad(format!("unknown split_role `{other}`"))),
        };
        let label =
            match &rec[2] {
                "background" => Label::Background,
                s => Label::Known(s.parse().map_err(|_| {
                    bad(format!("label must be an index or `background`, got `{s}`"))
                })?),
            };
        let x = (3..rec.len())
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad number `{}`", &rec[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Vector::new(x).map_err(|e| bad(e.to_string()))?;
        if rec[1].is_empty() {
            return Err(bad("empty source_class".into()));
        }
        out.push(Sample {
            x,
            label,
            source_class: rec[1].to_string(),
            split_role,
        });
    }
    Ok(out)
}
