//! Accuracy, retrieval, robustness and ablation harnesses.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::dataio::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::{jitter, rotate_gravity_axis, stack_clouds, uniform_scale, PointCloud};
use crate::losses::argmax;
use crate::trainer::{train, Baseline, TrainMode, TrainSetup};

const EVAL_CHUNK: usize = 32;

/// Global features for every cloud, computed in fixed-size chunks.
pub fn global_features<C: Classifier>(
    classifier: &C,
    clouds: &[&PointCloud],
) -> Result<Vec<Array1<f64>>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(EVAL_CHUNK) {
        let (x, n) = stack_clouds(chunk.iter().copied())?;
        let o = classifier.forward_batch(x.view(), n)?;
        out.extend(o.features.rows().into_iter().map(|r| r.to_owned()));
    }
    Ok(out)
}

/// Predicted class for every cloud.
pub fn predict_all<C: Classifier>(classifier: &C, clouds: &[&PointCloud]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(EVAL_CHUNK) {
        let (x, n) = stack_clouds(chunk.iter().copied())?;
        let o = classifier.forward_batch(x.view(), n)?;
        for row in o.logits.rows() {
            out.push(argmax(row.as_slice().expect("contiguous")));
        }
    }
    Ok(out)
}

/// Fraction of correctly predicted samples.
pub fn classification_accuracy<C: Classifier>(classifier: &C, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(
            "accuracy over an empty sample set".into(),
        ));
    }
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let preds = predict_all(classifier, &clouds)?;
    let correct = preds
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Average precision of a ranked relevance list.
pub fn average_precision(ranked_relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub mean_ap: f64,
    /// `(query index, AP)` for every evaluated query.
    pub per_query: Vec<(usize, f64)>,
    /// Queries whose class has no other member.
    pub skipped: Vec<usize>,
    /// Samples whose global feature has zero norm.
    pub degenerate: Vec<usize>,
}

/// Each sample queries all others ranked by cosine similarity; relevance is
/// class equality. Ties are ranked by candidate index.
pub fn retrieval_map_from_features(
    features: &[Array1<f64>],
    labels: &[usize],
) -> Result<RetrievalResult> {
    if features.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let degenerate: Vec<usize> = features
        .iter()
        .enumerate()
        .filter(|(_, f)| f.dot(*f) == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !degenerate.is_empty() {
        log::warn!(
            "{} samples have zero-norm global features",
            degenerate.len()
        );
    }
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for q in 0..features.len() {
        if !labels
            .iter()
            .enumerate()
            .any(|(i, &l)| i != q && l == labels[q])
        {
            skipped.push(q);
            continue;
        }
        let mut ranked: Vec<(usize, f64)> = (0..features.len())
            .filter(|&i| i != q)
            .map(|i| (i, cosine_similarity(features[q].view(), features[i].view())))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let relevance: Vec<bool> = ranked
            .iter()
            .map(|(i, _)| labels[*i] == labels[q])
            .collect();
        per_query.push((q, average_precision(&relevance)));
    }
    if per_query.is_empty() {
        return Err(Error::EmptyRetrieval);
    }
    let mean_ap = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok(RetrievalResult {
        mean_ap,
        per_query,
        skipped,
        degenerate,
    })
}

/// Retrieval mAP using the classifier's global features.
pub fn retrieval_map<C: Classifier>(
    classifier: &C,
    samples: &[&Sample],
) -> Result<RetrievalResult> {
    let clouds: Vec<&PointCloud> = samples.iter().map(|s| &s.cloud).collect();
    let features = global_features(classifier, &clouds)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    retrieval_map_from_features(&features, &labels)
}

/// A test-time perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CorruptionSetting {
    None,
    Jitter {
        sigma: f64,
        clip: f64,
    },
    Scale {
        ratio: f64,
    },
    /// Rotation about the gravity axis, in degrees.
    Rotate {
        degrees: f64,
    },
}

impl CorruptionSetting {
    pub const DEFAULT_JITTER: CorruptionSetting = CorruptionSetting::Jitter {
        sigma: 0.01,
        clip: 0.05,
    };

    pub fn apply(&self, cloud: &PointCloud, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        match *self {
            CorruptionSetting::None => Ok(cloud.clone()),
            CorruptionSetting::Jitter { sigma, clip } => jitter(cloud, sigma, clip, rng),
            CorruptionSetting::Scale { ratio } => uniform_scale(cloud, ratio),
            CorruptionSetting::Rotate { degrees } => {
                rotate_gravity_axis(cloud, degrees.to_radians())
            }
        }
    }
}

impl fmt::Display for CorruptionSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            CorruptionSetting::None => write!(f, "none"),
            CorruptionSetting::Jitter { sigma, clip } if *self == Self::DEFAULT_JITTER => {
                let _ = (sigma, clip);
                write!(f, "jitter")
            }
            CorruptionSetting::Jitter { sigma, clip } => write!(f, "jitter_{sigma}_{clip}"),
            CorruptionSetting::Scale { ratio } => write!(f, "scale_{ratio}"),
            CorruptionSetting::Rotate { degrees } => write!(f, "rotate_{degrees}"),
        }
    }
}

impl FromStr for CorruptionSetting {
    type Err = Error;

    /// Accepts `none`, `jitter`, `jitter_<sigma>_<clip>`, `scale_<ratio>` and
    /// `rotate_<degrees>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown corruption setting `{s}`"));
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(bad)
        };
        match s {
            "none" => return Ok(CorruptionSetting::None),
            "jitter" => return Ok(Self::DEFAULT_JITTER),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("jitter_") {
            let (a, b) = rest.split_once('_').ok_or_else(bad)?;
            let (sigma, clip) = (num(a)?, num(b)?);
            if sigma < 0.0 || clip < 0.0 {
                return Err(bad());
            }
            return Ok(CorruptionSetting::Jitter { sigma, clip });
        }
        if let Some(rest) = s.strip_prefix("scale_") {
            let ratio = num(rest)?;
            if ratio <= 0.0 {
                return Err(bad());
            }
            return Ok(CorruptionSetting::Scale { ratio });
        }
        if let Some(rest) = s.strip_prefix("rotate_") {
            return Ok(CorruptionSetting::Rotate {
                degrees: num(rest)?,
            });
        }
        Err(bad())
    }
}

/// The six standard settings: original, jitter, two scalings, two rotations.
pub fn standard_corruptions() -> Vec<CorruptionSetting> {
    vec![
        CorruptionSetting::None,
        CorruptionSetting::DEFAULT_JITTER,
        CorruptionSetting::Scale { ratio: 0.9 },
        CorruptionSetting::Scale { ratio: 1.1 },
        CorruptionSetting::Rotate { degrees: 90.0 },
        CorruptionSetting::Rotate { degrees: 180.0 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub setting: CorruptionSetting,
    pub accuracy: f64,
}

/// Test accuracy under each setting. Random settings draw from a stream
/// seeded with `seed`, fresh for every setting.
pub fn robustness_suite<C: Classifier>(
    classifier: &C,
    test: &[&Sample],
    settings: &[CorruptionSetting],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    if settings.is_empty() {
        return Err(Error::Config("no corruption settings given".into()));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corrupted: Vec<Sample> = test
            .iter()
            .map(|s| {
                Ok(Sample {
                    cloud: setting.apply(&s.cloud, &mut rng)?,
                    ..(*s).clone()
                })
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Sample> = corrupted.iter().collect();
        rows.push(RobustnessRow {
            setting: *setting,
            accuracy: classification_accuracy(classifier, &refs)?,
        });
    }
    Ok(rows)
}

pub fn robustness_tsv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("setting\taccuracy\n");
    for r in rows {
        writeln!(out, "{}\t{}", r.setting, r.accuracy).expect("write to string");
    }
    out
}

/// Which augmentor components are active in an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub displacement: bool,
    pub shape_transform: bool,
    pub dropout: bool,
    pub mixed_sampling: bool,
}

impl AblationToggles {
    pub fn none() -> Self {
        Self {
            displacement: false,
            shape_transform: false,
            dropout: false,
            mixed_sampling: false,
        }
    }

    pub fn any_transform(&self) -> bool {
        self.displacement || self.shape_transform
    }

    /// The standard ladder: baseline, D, M, D+M, D+M+DP, D+M+DP+Mix.
    pub fn ladder() -> Vec<(char, AblationToggles)> {
        let t = |displacement, shape_transform, dropout, mixed_sampling| AblationToggles {
            displacement,
            shape_transform,
            dropout,
            mixed_sampling,
        };
        vec![
            ('A', t(false, false, false, false)),
            ('B', t(true, false, false, false)),
            ('C', t(false, true, false, false)),
            ('D', t(true, true, false, false)),
            ('E', t(true, true, true, false)),
            ('F', t(true, true, true, true)),
        ]
    }

    /// Applies the toggles to a base setup. With neither transform the run
    /// falls back to conventional augmentation.
    pub fn configure(&self, base: &TrainSetup) -> TrainSetup {
        let mut setup = base.clone();
        if !self.any_transform() {
            setup.train.mode = TrainMode::Baseline(Baseline::Conventional);
            setup.train.mixed_sampling = false;
            return setup;
        }
        setup.train.mode = TrainMode::PointAugment;
        setup.train.mixed_sampling = self.mixed_sampling;
        setup.augmentor.use_displacement = self.displacement;
        setup.augmentor.use_shape_transform = self.shape_transform;
        if !self.dropout {
            setup.augmentor.dropout_prob = 0.0;
        }
        setup
    }
}

impl fmt::Display for AblationToggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.displacement {
            parts.push("D");
        }
        if self.shape_transform {
            parts.push("M");
        }
        if self.dropout {
            parts.push("DP");
        }
        if self.mixed_sampling {
            parts.push("Mix");
        }
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join("+"))
        }
    }
}

impl FromStr for AblationToggles {
    type Err = Error;

    /// `none` or a `+`-joined subset of `D`, `M`, `DP`, `Mix`.
    fn from_str(s: &str) -> Result<Self> {
        let mut t = AblationToggles::none();
        if s == "none" {
            return Ok(t);
        }
        for part in s.split('+') {
            let slot = match part {
                "D" => &mut t.displacement,
                "M" => &mut t.shape_transform,
                "DP" => &mut t.dropout,
                "Mix" => &mut t.mixed_sampling,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown ablation component `{part}` in `{s}`"
                    )))
                }
            };
            if *slot {
                return Err(Error::Config(format!(
                    "ablation component `{part}` repeated in `{s}`"
                )));
            }
            *slot = true;
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: AblationToggles,
    pub test_accuracy: f64,
}

/// Trains one model per toggle set with the same seed and reports final
/// test accuracy.
pub fn ablation_runner(
    dataset: &Dataset,
    base: &TrainSetup,
    variants: &[(String, AblationToggles)],
) -> Result<Vec<AblationRow>> {
    let test = dataset.test();
    let mut rows = Vec::with_capacity(variants.len());
    for (label, toggles) in variants {
        log::info!("ablation {label}: {toggles}");
        let state = train(dataset, &toggles.configure(base))?;
        rows.push(AblationRow {
            label: label.clone(),
            toggles: *toggles,
            test_accuracy: classification_accuracy(&state.classifier, &test)?,
        });
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label\tcomponents\ttest_acc\n");
    for r in rows {
        writeln!(out, "{}\t{}\t{}", r.label, r.toggles, r.test_accuracy).expect("write to string");
    }
    out
}

/// Final test accuracy for each penalty weight, everything else fixed.
pub fn lambda_sweep(
    dataset: &Dataset,
    base: &TrainSetup,
    lambdas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let test = dataset.test();
    lambdas
        .iter()
        .map(|&lambda| {
            let mut setup = base.clone();
            setup.train.weights.lambda = lambda;
            let state = train(dataset, &setup)?;
            Ok((lambda, classification_accuracy(&state.classifier, &test)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_basics() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 2.0];
        assert_eq!(cosine_similarity(a.view(), b.view()), 0.0);
        assert!((cosine_similarity(a.view(), a.view()) - 1.0).abs() < 1e-15);
        let z = array![0.0, 0.0];
        assert_eq!(cosine_similarity(a.view(), z.view()), 0.0);
    }

    #[test]
    fn average_precision_hand_values() {
        assert_eq!(
            average_precision(&[true, false, true]),
            (1.0 + 2.0 / 3.0) / 2.0
        );
        assert_eq!(average_precision(&[false, true]), 0.5);
        assert_eq!(average_precision(&[false, false]), 0.0);
    }

    #[test]
    fn retrieval_perfect_separation() {
        let f = vec![
            array![1.0, 0.0],
            array![0.9, 0.1],
            array![0.0, 1.0],
            array![0.1, 0.9],
        ];
        let r = retrieval_map_from_features(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn retrieval_skips_singletons() {
        let f = vec![array![1.0, 0.0], array![0.9, 0.1], array![0.0, 1.0]];
        let r = retrieval_map_from_features(&f, &[0, 0, 1]).unwrap();
        assert_eq!(r.skipped, vec![2]);
        assert_eq!(r.per_query.len(), 2);
        let err = retrieval_map_from_features(&f, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::EmptyRetrieval));
    }

    #[test]
    fn corruption_parsing() {
        assert_eq!(
            "none".parse::<CorruptionSetting>().unwrap(),
            CorruptionSetting::None
        );
        assert_eq!(
            "scale_0.9".parse::<CorruptionSetting>().unwrap(),
            CorruptionSetting::Scale { ratio: 0.9 }
        );
        assert_eq!(
            "rotate_180".parse::<CorruptionSetting>().unwrap(),
            CorruptionSetting::Rotate { degrees: 180.0 }
        );
        assert_eq!(
            "jitter_1_1".parse::<CorruptionSetting>().unwrap(),
            CorruptionSetting::Jitter {
                sigma: 1.0,
                clip: 1.0
            }
        );
        for bad in ["blur", "scale_-1", "scale_x", "rotate_", "jitter_1"] {
            assert!(bad.parse::<CorruptionSetting>().is_err(), "{bad}");
        }
        for s in standard_corruptions() {
            assert_eq!(s.to_string().parse::<CorruptionSetting>().unwrap(), s);
        }
    }

    #[test]
    fn toggle_parsing() {
        let t: AblationToggles = "D+M+DP+Mix".parse().unwrap();
        assert!(t.displacement && t.shape_transform && t.dropout && t.mixed_sampling);
        assert_eq!(t.to_string(), "D+M+DP+Mix");
        assert_eq!(
            "none".parse::<AblationToggles>().unwrap(),
            AblationToggles::none()
        );
        assert!("D+X".parse::<AblationToggles>().is_err());
        assert!("D+D".parse::<AblationToggles>().is_err());
    }

    #[test]
    fn toggles_configure_setup() {
        let base = TrainSetup::default();
        let a = AblationToggles::none().configure(&base);
        assert_eq!(a.train.mode, TrainMode::Baseline(Baseline::Conventional));
        let b: AblationToggles = "M".parse().unwrap();
        let b = b.configure(&base);
        assert!(!b.augmentor.use_displacement && b.augmentor.use_shape_transform);
        assert_eq!(b.augmentor.dropout_prob, 0.0);
        assert!(!b.train.mixed_sampling);
    }
}
