//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use pointaugment::eval::standard_corruptions;
use pointaugment::{Baseline, CorruptionSetting, Objective, OptimizerKind, TrainMode, TrainSetup};

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub setup: TrainSetup,
    /// Points per cloud after loading.
    pub n_points: usize,
    pub robustness_settings: Vec<CorruptionSetting>,
    /// Seeds the random corruptions.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            setup: TrainSetup::default(),
            n_points: 1024,
            robustness_settings: standard_corruptions(),
            eval_seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{origin}:{line}: {message}")]
pub struct ConfigError {
    pub origin: String,
    pub line: usize,
    pub message: String,
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}` expects a number, got `{value}`"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse_num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{key}` must be finite, got `{value}`"))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{value}`")),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|w| parse_num::<usize>(key, w.trim()))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<Option<(f64, f64)>, String> {
    if value == "none" {
        return Ok(None);
    }
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| format!("`{key}` expects `a,b` or `none`, got `{value}`"))?;
    Ok(Some((parse_f64(key, a.trim())?, parse_f64(key, b.trim())?)))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn pair(p: Option<(f64, f64)>) -> String {
    match p {
        Some((a, b)) => format!("{a},{b}"),
        None => "none".into(),
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError {
                origin: origin.to_string(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.setup.train;
        let a = &mut self.setup.augmentor;
        let c = &mut self.setup.classifier;
        match key {
            "epochs" => t.epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "augmentor_lr" => t.augmentor_lr = parse_f64(key, value)?,
            "classifier_lr" => t.classifier_lr = parse_f64(key, value)?,
            "lr_decay_rate" => t.lr_decay_rate = parse_f64(key, value)?,
            "lr_decay_every" => t.lr_decay_every = parse_num(key, value)?,
            "lambda" => t.weights.lambda = parse_f64(key, value)?,
            "gamma" => t.weights.gamma = parse_f64(key, value)?,
            "mixed_sampling" => t.mixed_sampling = parse_bool(key, value)?,
            "objective" => {
                t.objective = match value {
                    "bounded" => Objective::Bounded,
                    "naive" => Objective::Naive,
                    _ => return Err(format!("`objective` is bounded or naive, got `{value}`")),
                }
            }
            "mode" => {
                t.mode = match value {
                    "pointaugment" => TrainMode::PointAugment,
                    "baseline_none" => TrainMode::Baseline(Baseline::None),
                    "baseline_conventional" => TrainMode::Baseline(Baseline::Conventional),
                    _ => {
                        return Err(format!(
                    "`mode` is pointaugment, baseline_none or baseline_conventional, got `{value}`"
                ))
                    }
                }
            }
            "optimizer" => {
                t.classifier_optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd_cosine" => OptimizerKind::SgdCosine,
                    _ => return Err(format!("`optimizer` is adam or sgd_cosine, got `{value}`")),
                }
            }
            "seed" => t.seed = parse_num(key, value)?,
            "da_rotate" => t.conventional_da.rotate = parse_bool(key, value)?,
            "da_scale" => t.conventional_da.scale_range = parse_pair(key, value)?,
            "da_jitter" => t.conventional_da.jitter = parse_pair(key, value)?,
            "feature_channels" => a.feature_channels = parse_num(key, value)?,
            "feature_hidden" => a.feature_hidden = parse_widths(key, value)?,
            "shape_hidden" => a.shape_hidden = parse_widths(key, value)?,
            "displacement_hidden" => a.displacement_hidden = parse_widths(key, value)?,
            "noise_std" => a.noise_std = parse_f64(key, value)?,
            "dropout_prob" => a.dropout_prob = parse_f64(key, value)?,
            "use_shape_transform" => a.use_shape_transform = parse_bool(key, value)?,
            "use_displacement" => a.use_displacement = parse_bool(key, value)?,
            "augmentor_normalize" => a.normalize_features = parse_bool(key, value)?,
            "point_widths" => c.point_widths = parse_widths(key, value)?,
            "head_hidden" => c.head_hidden = parse_widths(key, value)?,
            "classifier_normalize" => c.normalize_features = parse_bool(key, value)?,
            "n_points" => {
                self.n_points = parse_num(key, value)?;
                if self.n_points == 0 {
                    return Err("`n_points` must be positive".into());
                }
            }
            "robustness_settings" => {
                self.robustness_settings = value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<CorruptionSetting>()
                            .map_err(|e| e.to_string())
                    })
                    .collect::<Result<_, _>>()?;
            }
            "eval_seed" => self.eval_seed = parse_num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Renders every key; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.setup.train;
        let a = &self.setup.augmentor;
        let c = &self.setup.classifier;
        let mode = match t.mode {
            TrainMode::PointAugment => "pointaugment",
            TrainMode::Baseline(Baseline::None) => "baseline_none",
            TrainMode::Baseline(Baseline::Conventional) => "baseline_conventional",
        };
        let objective = match t.objective {
            Objective::Bounded => "bounded",
            Objective::Naive => "naive",
        };
        let optimizer = match t.classifier_optimizer {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdCosine => "sgd_cosine",
        };
        let rows: Vec<(&str, String)> = vec![
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("augmentor_lr", t.augmentor_lr.to_string()),
            ("classifier_lr", t.classifier_lr.to_string()),
            ("lr_decay_rate", t.lr_decay_rate.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("lambda", t.weights.lambda.to_string()),
            ("gamma", t.weights.gamma.to_string()),
            ("mixed_sampling", t.mixed_sampling.to_string()),
            ("objective", objective.into()),
            ("mode", mode.into()),
            ("optimizer", optimizer.into()),
            ("seed", t.seed.to_string()),
            ("da_rotate", t.conventional_da.rotate.to_string()),
            ("da_scale", pair(t.conventional_da.scale_range)),
            ("da_jitter", pair(t.conventional_da.jitter)),
            ("feature_channels", a.feature_channels.to_string()),
            ("feature_hidden", join(&a.feature_hidden)),
            ("shape_hidden", join(&a.shape_hidden)),
            ("displacement_hidden", join(&a.displacement_hidden)),
            ("noise_std", a.noise_std.to_string()),
            ("dropout_prob", a.dropout_prob.to_string()),
            ("use_shape_transform", a.use_shape_transform.to_string()),
            ("use_displacement", a.use_displacement.to_string()),
            ("augmentor_normalize", a.normalize_features.to_string()),
            ("point_widths", join(&c.point_widths)),
            ("head_hidden", join(&c.head_hidden)),
            ("classifier_normalize", c.normalize_features.to_string()),
            ("n_points", self.n_points.to_string()),
            ("robustness_settings", join(&self.robustness_settings)),
            ("eval_seed", self.eval_seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }
}
