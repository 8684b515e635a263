//! Dataset ingestion, the on-disk dataset format, stratified splitting and
//! a procedural generator of labelled primitive shapes.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! classes.txt          one class name per line; line index = class id
//! manifest.tsv         header `sample_id<TAB>split<TAB>class`, one row per sample
//! points/<id>.xyz      one point per line, three space-separated reals
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_ball, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            samples,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        let mut ids = HashSet::new();
        let n = self.samples.first().map(|s| s.cloud.n_points());
        for s in &self.samples {
            if s.label >= k {
                return Err(Error::InvalidInput(format!(
                    "sample `{}` has label {} but there are {k} classes",
                    s.id, s.label
                )));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate sample id `{}`",
                    s.id
                )));
            }
            if Some(s.cloud.n_points()) != n {
                return Err(Error::InvalidInput(format!(
                    "sample `{}` has {} points, expected {}",
                    s.id,
                    s.cloud.n_points(),
                    n.unwrap_or(0)
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_points(&self) -> Option<usize> {
        self.samples.first().map(|s| s.cloud.n_points())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split_samples(Split::Train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split_samples(Split::Test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub n_points: usize,
    /// Seeds the resampling of clouds whose size differs from `n_points`.
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            n_points: 1024,
            seed: 0,
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses an `.xyz` file body.
pub fn parse_xyz(text: &str, entry: &str) -> Result<PointCloud> {
    let mut flat = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Load {
                entry: entry.to_string(),
                reason: format!(
                    "line {} has {} fields, expected 3",
                    lineno + 1,
                    fields.len()
                ),
            });
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::Load {
                entry: entry.to_string(),
                reason: format!("line {}: `{f}` is not a number", lineno + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Load {
                    entry: entry.to_string(),
                    reason: format!("line {}: non-finite coordinate", lineno + 1),
                });
            }
            flat.push(v);
        }
    }
    if flat.is_empty() {
        return Err(Error::Load {
            entry: entry.to_string(),
            reason: "no points".into(),
        });
    }
    let n = flat.len() / 3;
    PointCloud::new(Array2::from_shape_vec((n, 3), flat).expect("3 per row")).map_err(|e| {
        Error::Load {
            entry: entry.to_string(),
            reason: e.to_string(),
        }
    })
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.n_points() * 64);
    for r in cloud.points().rows() {
        writeln!(out, "{} {} {}", r[0], r[1], r[2]).expect("write to string");
    }
    out
}

/// Subsamples without replacement when the cloud is larger than `n`, pads by
/// sampling with replacement when it is smaller. Point order of the kept
/// points follows the draw order.
pub fn resample<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> PointCloud {
    let m = cloud.n_points();
    if m == n {
        return cloud.clone();
    }
    let idx: Vec<usize> = if m > n {
        rand::seq::index::sample(rng, m, n).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.extend((0..n - m).map(|_| rng.random_range(0..m)));
        idx
    };
    PointCloud::from_trusted(cloud.points().select(Axis(0), &idx))
}

/// Reads a dataset directory, resampling every cloud to `options.n_points`
/// and normalizing it to the unit ball.
pub fn load_dataset(root: &Path, options: &LoadOptions) -> Result<Dataset> {
    if options.n_points == 0 {
        return Err(Error::Config("n_points must be positive".into()));
    }
    let classes_path = root.join("classes.txt");
    let class_names: Vec<String> = read_to_string(&classes_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if class_names.is_empty() {
        return Err(Error::Load {
            entry: "classes.txt".into(),
            reason: "no classes".into(),
        });
    }

    let manifest_path = root.join("manifest.tsv");
    let manifest = read_to_string(&manifest_path)?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some("sample_id\tsplit\tclass") => {}
        other => {
            return Err(Error::Load {
                entry: "manifest.tsv".into(),
                reason: format!("bad header {:?}", other.unwrap_or("")),
            })
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Load {
                entry: format!("manifest.tsv line {}", lineno + 2),
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let id = fields[0];
        let split: Split = fields[1].parse().map_err(|reason| Error::Load {
            entry: id.to_string(),
            reason,
        })?;
        let label = class_names
            .iter()
            .position(|c| c == fields[2])
            .ok_or_else(|| Error::Load {
                entry: id.to_string(),
                reason: format!("unknown class `{}`", fields[2]),
            })?;
        let points_path = root.join("points").join(format!("{id}.xyz"));
        let text = fs::read_to_string(&points_path).map_err(|e| Error::Load {
            entry: id.to_string(),
            reason: format!("{}: {e}", points_path.display()),
        })?;
        let raw = parse_xyz(&text, id)?;
        let cloud = normalize_unit_ball(&resample(&raw, options.n_points, &mut rng))?;
        samples.push(Sample {
            id: id.to_string(),
            cloud,
            label,
            split,
        });
    }
    Dataset::new(samples, class_names)
}

/// Writes `dataset` in the directory format read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let points_dir = root.join("points");
    fs::create_dir_all(&points_dir).map_err(|e| Error::io(&points_dir, e))?;
    let mut classes = String::new();
    for c in &dataset.class_names {
        writeln!(classes, "{c}").expect("write to string");
    }
    let path = root.join("classes.txt");
    fs::write(&path, classes).map_err(|e| Error::io(&path, e))?;

    let mut manifest = String::from("sample_id\tsplit\tclass\n");
    for s in &dataset.samples {
        writeln!(
            manifest,
            "{}\t{}\t{}",
            s.id,
            s.split.as_str(),
            dataset.class_names[s.label]
        )
        .expect("write to string");
        let path = points_dir.join(format!("{}.xyz", s.id));
        fs::write(&path, format_xyz(&s.cloud)).map_err(|e| Error::io(&path, e))?;
    }
    let path = root.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Cone,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::Sphere,
        Primitive::Cube,
        Primitive::Cylinder,
        Primitive::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown primitive `{s}`")))
    }
}

/// Samples `n` points uniformly (by area) on the surface of a canonical
/// primitive. Sphere: unit radius. Cube: side 2. Cylinder and cone: unit
/// radius, height 2, axis along `y`, cone apex at `y = 1`.
pub fn sample_primitive<R: Rng + ?Sized>(kind: Primitive, n: usize, rng: &mut R) -> PointCloud {
    use std::f64::consts::{PI, TAU};
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts = Array2::zeros((n, 3));
    for mut row in pts.rows_mut() {
        let p: [f64; 3] = match kind {
            Primitive::Sphere => loop {
                let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 1e-12 {
                    break [v[0] / len, v[1] / len, v[2] / len];
                }
            },
            Primitive::Cube => {
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [sign, a, b],
                    1 => [a, sign, b],
                    _ => [a, b, sign],
                }
            }
            Primitive::Cylinder => {
                // lateral area 4 pi, each cap pi
                let u = rng.random_range(0.0..6.0 * PI);
                let theta = rng.random_range(0.0..TAU);
                if u < 4.0 * PI {
                    [theta.cos(), rng.random_range(-1.0..1.0), theta.sin()]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let y = if u < 5.0 * PI { 1.0 } else { -1.0 };
                    [r * theta.cos(), y, r * theta.sin()]
                }
            }
            Primitive::Cone => {
                // lateral area pi * sqrt(5), base pi
                let lateral = 5f64.sqrt();
                let u = rng.random_range(0.0..lateral + 1.0);
                let theta = rng.random_range(0.0..TAU);
                if u < lateral {
                    let t = rng.random::<f64>().sqrt();
                    [t * theta.cos(), 1.0 - 2.0 * t, t * theta.sin()]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    [r * theta.cos(), -1.0, r * theta.sin()]
                }
            }
        };
        row[0] = p[0];
        row[1] = p[1];
        row[2] = p[2];
    }
    PointCloud::from_trusted(pts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: Vec<Primitive>,
    /// Training samples per class, parallel to `classes`.
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub n_points: usize,
    /// Per-axis stretch is drawn from `U[1 - d, 1 + d]`.
    pub deformation: f64,
    pub jitter_sigma: f64,
}

impl SynthConfig {
    pub fn balanced(classes: &[Primitive], train: usize, test: usize, n_points: usize) -> Self {
        Self {
            classes: classes.to_vec(),
            train_counts: vec![train; classes.len()],
            test_counts: vec![test; classes.len()],
            n_points,
            deformation: 0.3,
            jitter_sigma: 0.02,
        }
    }

    /// Four primitives, 200 train and 50 test shapes each, 256 points.
    pub fn desk_scale() -> Self {
        Self::balanced(&Primitive::ALL, 200, 50, 256)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic config has no classes".into()));
        }
        if self.train_counts.len() != self.classes.len()
            || self.test_counts.len() != self.classes.len()
        {
            return Err(Error::Config(
                "per-class counts must match the class list".into(),
            ));
        }
        if self.n_points == 0 {
            return Err(Error::Config("n_points must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.deformation)
            || self.jitter_sigma.is_nan()
            || self.jitter_sigma < 0.0
        {
            return Err(Error::Config(format!(
                "deformation must lie in [0, 1) and jitter_sigma be non-negative, got {} and {}",
                self.deformation, self.jitter_sigma
            )));
        }
        let mut seen = HashSet::new();
        if !self.classes.iter().all(|c| seen.insert(*c)) {
            return Err(Error::Config("synthetic classes must be distinct".into()));
        }
        Ok(())
    }
}

/// Stretched, jittered primitive shapes, normalized to the unit ball.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, config.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let d = config.deformation;
    let mut samples = Vec::new();
    for (label, &kind) in config.classes.iter().enumerate() {
        for (split, count) in [
            (Split::Train, config.train_counts[label]),
            (Split::Test, config.test_counts[label]),
        ] {
            for i in 0..count {
                let mut cloud = sample_primitive(kind, config.n_points, &mut rng).into_array();
                let stretch: Vec<f64> = (0..3)
                    .map(|_| {
                        if d > 0.0 {
                            rng.random_range(1.0 - d..=1.0 + d)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                for mut row in cloud.rows_mut() {
                    for k in 0..3 {
                        row[k] = row[k] * stretch[k] + jitter.sample(&mut rng);
                    }
                }
                samples.push(Sample {
                    id: format!("{}_{}_{i:04}", kind.name(), split.as_str()),
                    cloud: normalize_unit_ball(&PointCloud::from_trusted(cloud))?,
                    label,
                    split,
                });
            }
        }
    }
    let names = config
        .classes
        .iter()
        .map(|c| c.name().to_string())
        .collect();
    Dataset::new(samples, names)
}

/// Stratified re-split: within each class, `round(fraction * count)` samples
/// (clamped to leave at least one on each side) go to train.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            log::warn!(
                "class `{}` has a single sample; assigning it to train",
                dataset.class_names[class]
            );
            out.samples[idx[0]].split = Split::Train;
            continue;
        }
        idx.shuffle(&mut rng);
        let n_train =
            ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for (k, &i) in idx.iter().enumerate() {
            out.samples[i].split = if k < n_train {
                Split::Train
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}
