//! Alternating optimization of the augmentor and the classifier.
//!
//! Each batch runs two phases. The augmentor phase augments the original
//! clouds, scores both versions with the frozen classifier and takes one
//! optimizer step on the augmentor loss. The classifier phase regenerates
//! the augmented clouds with the updated (now frozen) augmentor, optionally
//! swaps half of them for augmented clouds remembered from earlier epochs,
//! and takes one step on the classifier loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentor::{AugmentDraw, AugmentedBatch, Augmentor, AugmentorConfig};
use crate::classifier::{Classifier, ClassifierConfig, PointNetClassifier};
use crate::dataio::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::classification_accuracy;
use crate::geometry::{conventional_da, stack_clouds, ConventionalDaParams, PointCloud};
use crate::losses::{
    augmentor_loss, augmentor_loss_grad, classifier_loss, cross_entropy_with_grad, dynamic_rho,
    feature_gap, naive_augmentor_loss, naive_augmentor_loss_grad, LossReport, LossWeights,
};
use crate::nn::{zeros_like, Parameters};
use crate::optim::{cosine_annealing, step_decay, Adam, Optimizer, OptimizerKind};

/// Which augmentor objective drives the augmentor phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `L(P') + lambda |1 - exp(L(P') - rho L(P))|`
    Bounded,
    /// `exp(-(L(P') - L(P)))`
    Naive,
}

/// Augmentation used when the augmentor is disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    None,
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    PointAugment,
    Baseline(Baseline),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentor_lr: f64,
    pub classifier_lr: f64,
    /// Classifier learning-rate multiplier applied every `lr_decay_every`
    /// epochs (Adam only; SGD uses cosine annealing).
    pub lr_decay_rate: f64,
    pub lr_decay_every: usize,
    pub weights: LossWeights,
    pub mixed_sampling: bool,
    pub objective: Objective,
    pub mode: TrainMode,
    pub classifier_optimizer: OptimizerKind,
    pub conventional_da: ConventionalDaParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 24,
            augmentor_lr: 0.001,
            classifier_lr: 0.001,
            lr_decay_rate: 0.5,
            lr_decay_every: 20,
            weights: LossWeights::default(),
            mixed_sampling: true,
            objective: Objective::Bounded,
            mode: TrainMode::PointAugment,
            classifier_optimizer: OptimizerKind::Adam,
            conventional_da: ConventionalDaParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.mixed_sampling
            && self.mode == TrainMode::PointAugment
            && !self.batch_size.is_multiple_of(2)
        {
            return Err(Error::Config(format!(
                "mixed sampling needs an even batch size, got {}",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("augmentor_lr", self.augmentor_lr),
            ("classifier_lr", self.classifier_lr),
            ("lr_decay_rate", self.lr_decay_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if !(self.weights.lambda >= 0.0 && self.weights.gamma >= 0.0) {
            return Err(Error::Config(
                "lambda and gamma must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Classifier learning rate for a zero-based epoch.
    pub fn classifier_lr_at(&self, epoch: usize) -> f64 {
        match self.classifier_optimizer {
            OptimizerKind::Adam => step_decay(
                self.classifier_lr,
                self.lr_decay_rate,
                self.lr_decay_every,
                epoch,
            ),
            OptimizerKind::SgdCosine => cosine_annealing(self.classifier_lr, epoch, self.epochs),
        }
    }
}

/// Everything needed to build a fresh training state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub augmentor: AugmentorConfig,
    pub classifier: ClassifierConfig,
}

/// Latest augmented cloud per training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayPool {
    capacity: usize,
    entries: BTreeMap<usize, PointCloud>,
}

impl ReplayPool {
    /// `capacity` is the dataset size; valid ids are `0..capacity`.
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&PointCloud> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn insert(&mut self, id: usize, cloud: PointCloud) -> Result<()> {
        if id >= self.capacity {
            return Err(Error::InvalidInput(format!(
                "replay id {id} outside dataset of {}",
                self.capacity
            )));
        }
        self.entries.insert(id, cloud);
        Ok(())
    }
}

/// One training example referenced by its dataset index.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub id: usize,
    pub cloud: &'a PointCloud,
    pub label: usize,
}

impl<'a> BatchItem<'a> {
    pub fn from_sample(id: usize, sample: &'a Sample) -> Self {
        Self {
            id,
            cloud: &sample.cloud,
            label: sample.label,
        }
    }
}

/// A classifier-phase batch entry: the original cloud plus, for the replay
/// half, a previously augmented version of it.
#[derive(Clone, Debug)]
pub struct MixedEntry<'a> {
    pub item: BatchItem<'a>,
    pub replayed: Option<PointCloud>,
}

/// Picks `B/2` positions at random and attaches the pool's remembered
/// augmentation for them. Positions whose sample has no entry yet fall back
/// to the original.
pub fn build_mixed_batch<'a, R: rand::Rng + ?Sized>(
    pool: &ReplayPool,
    originals: &[BatchItem<'a>],
    rng: &mut R,
) -> Result<Vec<MixedEntry<'a>>> {
    if !originals.len().is_multiple_of(2) {
        return Err(Error::Config(format!(
            "mixed batches need an even size, got {}",
            originals.len()
        )));
    }
    let positions: Vec<usize> = (0..originals.len()).collect();
    let mut replay = vec![false; originals.len()];
    for &p in positions.choose_multiple(rng, originals.len() / 2) {
        replay[p] = true;
    }
    Ok(originals
        .iter()
        .zip(replay)
        .map(|(item, r)| MixedEntry {
            item: *item,
            replayed: if r { pool.get(item.id).cloned() } else { None },
        })
        .collect())
}

/// Per-epoch summary; one metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub augmentor_loss: f64,
    pub classifier_loss: f64,
    pub rho: f64,
    pub xi: f64,
    pub feature_gap: f64,
}

pub const METRICS_HEADER: &str =
    "epoch\ttrain_acc\ttest_acc\taugmentor_loss\tclassifier_loss\trho\txi\tfeature_gap";

pub fn metrics_tsv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.train_accuracy,
            r.test_accuracy,
            r.augmentor_loss,
            r.classifier_loss,
            r.rho,
            r.xi,
            r.feature_gap
        )
        .expect("write to string");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState<C = PointNetClassifier> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub augmentor: Augmentor,
    pub classifier: C,
    pub augmentor_opt: Adam,
    pub classifier_opt: Optimizer,
    pub rng: ChaCha8Rng,
    pub replay: ReplayPool,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainingState<PointNetClassifier> {
    /// Builds both networks from `setup`, seeding initialization and the
    /// training stream from `setup.train.seed`.
    pub fn initialize(setup: &TrainSetup, dataset_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.train.seed);
        let augmentor = Augmentor::new(setup.augmentor.clone(), &mut rng)?;
        let classifier = PointNetClassifier::new(&setup.classifier, &mut rng)?;
        Self::from_parts(
            setup.train.clone(),
            augmentor,
            classifier,
            rng,
            dataset_size,
        )
    }
}

impl<C: Classifier> TrainingState<C> {
    pub fn from_parts(
        config: TrainConfig,
        augmentor: Augmentor,
        classifier: C,
        rng: ChaCha8Rng,
        dataset_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            epoch: 0,
            augmentor_opt: Adam::new(augmentor.num_parameters()),
            classifier_opt: Optimizer::new(
                config.classifier_optimizer,
                classifier.num_parameters(),
            ),
            config,
            augmentor,
            classifier,
            rng,
            replay: ReplayPool::new(dataset_size),
            metrics: Vec::new(),
        })
    }

    fn check_finite(&self, phase: &'static str, report: &LossReport) -> Result<()> {
        if report.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                phase,
                epoch: self.epoch,
                report: Box::new(report.clone()),
            })
        }
    }
}

fn stack_items(batch: &[BatchItem<'_>]) -> Result<(Array2<f64>, usize)> {
    stack_clouds(batch.iter().map(|b| b.cloud))
}

/// Batch-mean augmentor objective and its gradient with respect to every
/// augmentor parameter, with the classifier held fixed.
pub fn augmentor_gradients<C: Classifier>(
    augmentor: &Augmentor,
    classifier: &C,
    config: &TrainConfig,
    batch: &[BatchItem<'_>],
    draws: &[AugmentDraw],
) -> Result<(LossReport, Augmentor)> {
    let (input, n) = stack_items(batch)?;
    let (augmented, cache) = augmentor.forward_batch(&input, n, draws)?;
    let on_p = classifier.forward_batch(input.view(), n)?;
    let (on_pp, cls_cache) = classifier.forward_batch_cached(augmented.points, n)?;

    let bsz = batch.len() as f64;
    let mut report = LossReport::default();
    let mut d_logits = Array2::zeros(on_pp.logits.dim());
    for (b, item) in batch.iter().enumerate() {
        let (loss_p, probs_p, _) = cross_entropy_with_grad(on_p.logits.row(b), item.label);
        let rho = dynamic_rho(&probs_p, item.label);
        let (loss_pp, _, d_ce) = cross_entropy_with_grad(on_pp.logits.row(b), item.label);
        let (loss_a, d_loss) = match config.objective {
            Objective::Bounded => (
                augmentor_loss(loss_pp, loss_p, rho, &config.weights),
                augmentor_loss_grad(loss_pp, loss_p, rho, &config.weights),
            ),
            Objective::Naive => (
                naive_augmentor_loss(loss_pp, loss_p),
                naive_augmentor_loss_grad(loss_pp, loss_p),
            ),
        };
        d_logits.row_mut(b).assign(&(d_ce * (d_loss / bsz)));
        report.loss_p += loss_p / bsz;
        report.loss_p_prime += loss_pp / bsz;
        report.rho += rho / bsz;
        report.xi += (loss_pp - loss_p) / bsz;
        report.xi_upper += (rho - 1.0) * loss_p / bsz;
        report.augmentor_loss += loss_a / bsz;
    }

    let mut scratch = zeros_like(classifier);
    let d_points = classifier
        .backward_batch(&cls_cache, &d_logits, None, &mut scratch, true)
        .expect("input gradient requested");
    let mut grad = zeros_like(augmentor);
    augmentor.backward_batch(&cache, &d_points, &mut grad);
    Ok((report, grad))
}

/// Batch-mean classifier objective and its gradient. `pairs` holds the
/// original and augmented cloud for every entry, stacked.
pub fn classifier_gradients<C: Classifier>(
    classifier: &C,
    weights: &LossWeights,
    originals: Array2<f64>,
    augmented: Array2<f64>,
    labels: &[usize],
    n_points: usize,
) -> Result<(LossReport, C)> {
    let (on_p, cache_p) = classifier.forward_batch_cached(originals, n_points)?;
    let (on_pp, cache_pp) = classifier.forward_batch_cached(augmented, n_points)?;
    let bsz = labels.len() as f64;
    let mut report = LossReport::default();
    let mut d_logits_p = Array2::zeros(on_p.logits.dim());
    let mut d_logits_pp = Array2::zeros(on_pp.logits.dim());
    let mut d_feat_p = Array2::zeros(on_p.features.dim());
    let mut d_feat_pp = Array2::zeros(on_pp.features.dim());
    for (b, &label) in labels.iter().enumerate() {
        let (loss_p, _, d_p) = cross_entropy_with_grad(on_p.logits.row(b), label);
        let (loss_pp, _, d_pp) = cross_entropy_with_grad(on_pp.logits.row(b), label);
        let (gap, d_gap) = feature_gap(on_p.features.row(b), on_pp.features.row(b));
        d_logits_p.row_mut(b).assign(&(d_p / bsz));
        d_logits_pp.row_mut(b).assign(&(d_pp / bsz));
        let d_gap: Array1<f64> = d_gap * (weights.gamma / bsz);
        d_feat_p.row_mut(b).assign(&d_gap);
        d_feat_pp.row_mut(b).assign(&(-d_gap));
        report.loss_p += loss_p / bsz;
        report.loss_p_prime += loss_pp / bsz;
        report.feature_gap += gap / bsz;
        report.classifier_loss += classifier_loss(loss_pp, loss_p, gap, weights) / bsz;
    }
    let mut grad = zeros_like(classifier);
    classifier.backward_batch(&cache_p, &d_logits_p, Some(&d_feat_p), &mut grad, false);
    classifier.backward_batch(&cache_pp, &d_logits_pp, Some(&d_feat_pp), &mut grad, false);
    Ok((report, grad))
}

/// One augmentor update with the classifier frozen.
pub fn augmentor_step<C: Classifier>(
    state: &mut TrainingState<C>,
    batch: &[BatchItem<'_>],
    draws: &[AugmentDraw],
) -> Result<LossReport> {
    let (report, grad) = augmentor_gradients(
        &state.augmentor,
        &state.classifier,
        &state.config,
        batch,
        draws,
    )?;
    state.check_finite("augmentor step", &report)?;
    let lr = state.config.augmentor_lr;
    state.augmentor_opt.step(&mut state.augmentor, &grad, lr);
    Ok(report)
}

/// One classifier update with the augmentor frozen. Augmented clouds are
/// regenerated from `draws` with the current augmentor; entries carrying a
/// replayed cloud use it instead. Returns the regenerated batch so the
/// caller can refresh the replay pool.
pub fn classifier_step<C: Classifier>(
    state: &mut TrainingState<C>,
    entries: &[MixedEntry<'_>],
    draws: &[AugmentDraw],
) -> Result<(LossReport, AugmentedBatch)> {
    let items: Vec<BatchItem<'_>> = entries.iter().map(|e| e.item).collect();
    let (input, n) = stack_items(&items)?;
    let (fresh, _) = state.augmentor.forward_batch(&input, n, draws)?;
    let mut augmented = fresh.points.clone();
    for (b, e) in entries.iter().enumerate() {
        if let Some(r) = &e.replayed {
            if r.n_points() != n {
                return Err(Error::InvalidInput(format!(
                    "replayed cloud for sample {} has {} points, expected {n}",
                    e.item.id,
                    r.n_points()
                )));
            }
            augmented
                .slice_mut(ndarray::s![b * n..(b + 1) * n, ..])
                .assign(&r.points());
        }
    }
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    let (report, grad) = classifier_gradients(
        &state.classifier,
        &state.config.weights,
        input,
        augmented,
        &labels,
        n,
    )?;
    state.check_finite("classifier step", &report)?;
    let lr = state.config.classifier_lr_at(state.epoch);
    state.classifier_opt.step(&mut state.classifier, &grad, lr);
    Ok((report, fresh))
}

/// Plain cross-entropy update on (optionally conventionally augmented)
/// originals, used when the augmentor is disabled.
pub fn baseline_step<C: Classifier>(
    state: &mut TrainingState<C>,
    batch: &[BatchItem<'_>],
    baseline: Baseline,
) -> Result<LossReport> {
    let clouds: Vec<PointCloud> = match baseline {
        Baseline::None => batch.iter().map(|b| b.cloud.clone()).collect(),
        Baseline::Conventional => batch
            .iter()
            .map(|b| conventional_da(b.cloud, &mut state.rng, &state.config.conventional_da))
            .collect::<Result<_>>()?,
    };
    let (input, n) = stack_clouds(&clouds)?;
    let (out, cache) = state.classifier.forward_batch_cached(input, n)?;
    let bsz = batch.len() as f64;
    let mut report = LossReport::default();
    let mut d_logits = Array2::zeros(out.logits.dim());
    for (b, item) in batch.iter().enumerate() {
        let (loss, _, d) = cross_entropy_with_grad(out.logits.row(b), item.label);
        d_logits.row_mut(b).assign(&(d / bsz));
        report.loss_p += loss / bsz;
        report.classifier_loss += loss / bsz;
    }
    state.check_finite("baseline step", &report)?;
    let mut grad = zeros_like(&state.classifier);
    state
        .classifier
        .backward_batch(&cache, &d_logits, None, &mut grad, false);
    let lr = state.config.classifier_lr_at(state.epoch);
    state.classifier_opt.step(&mut state.classifier, &grad, lr);
    Ok(report)
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    augmentor_loss: f64,
    classifier_loss: f64,
    rho: f64,
    xi: f64,
    feature_gap: f64,
}

impl EpochAccumulator {
    fn add(&mut self, aug: Option<&LossReport>, cls: &LossReport) {
        self.batches += 1;
        if let Some(a) = aug {
            self.augmentor_loss += a.augmentor_loss;
            self.rho += a.rho;
            self.xi += a.xi;
        }
        self.classifier_loss += cls.classifier_loss;
        self.feature_gap += cls.feature_gap;
    }

    fn mean(v: f64, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            v / n as f64
        }
    }
}

/// Runs one epoch over the training split and appends its metrics row.
pub fn train_epoch<C: Classifier>(state: &mut TrainingState<C>, dataset: &Dataset) -> Result<()> {
    let train_ids: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.samples[i].split == crate::dataio::Split::Train)
        .collect();
    if train_ids.is_empty() {
        return Err(Error::InvalidInput(
            "dataset has no training samples".into(),
        ));
    }
    let mode = state.config.mode;
    let mixing = state.config.mixed_sampling && mode == TrainMode::PointAugment;
    let mut batch_size = state.config.batch_size.min(train_ids.len());
    if mixing {
        batch_size -= batch_size % 2;
    }
    if batch_size == 0 {
        return Err(Error::Config(
            "mixed sampling needs at least two training samples".into(),
        ));
    }

    let mut order = train_ids;
    order.shuffle(&mut state.rng);
    let mut acc = EpochAccumulator::default();
    for chunk in order.chunks_exact(batch_size) {
        let items: Vec<BatchItem<'_>> = chunk
            .iter()
            .map(|&i| BatchItem::from_sample(i, &dataset.samples[i]))
            .collect();
        match mode {
            TrainMode::PointAugment => {
                let n = items[0].cloud.n_points();
                let draws: Vec<AugmentDraw> = items
                    .iter()
                    .map(|_| state.augmentor.draw(n, &mut state.rng, true))
                    .collect();
                let aug_report = augmentor_step(state, &items, &draws)?;
                let entries = if mixing {
                    build_mixed_batch(&state.replay, &items, &mut state.rng)?
                } else {
                    items
                        .iter()
                        .map(|&item| MixedEntry {
                            item,
                            replayed: None,
                        })
                        .collect()
                };
                let (cls_report, fresh) = classifier_step(state, &entries, &draws)?;
                for (b, item) in items.iter().enumerate() {
                    state.replay.insert(item.id, fresh.cloud(b))?;
                }
                acc.add(Some(&aug_report), &cls_report);
            }
            TrainMode::Baseline(kind) => {
                let report = baseline_step(state, &items, kind)?;
                acc.add(None, &report);
            }
        }
    }

    let train: Vec<&Sample> = dataset.train();
    let test: Vec<&Sample> = dataset.test();
    let train_accuracy = classification_accuracy(&state.classifier, &train)?;
    let test_accuracy = if test.is_empty() {
        f64::NAN
    } else {
        classification_accuracy(&state.classifier, &test)?
    };
    let n = acc.batches;
    state.epoch += 1;
    state.metrics.push(EpochMetrics {
        epoch: state.epoch,
        train_accuracy,
        test_accuracy,
        augmentor_loss: EpochAccumulator::mean(acc.augmentor_loss, n),
        classifier_loss: EpochAccumulator::mean(acc.classifier_loss, n),
        rho: EpochAccumulator::mean(acc.rho, n),
        xi: EpochAccumulator::mean(acc.xi, n),
        feature_gap: EpochAccumulator::mean(acc.feature_gap, n),
    });
    Ok(())
}

/// Trains until `state.epoch == state.config.epochs`, calling `on_epoch`
/// after every completed epoch.
pub fn run_training<C, F>(
    state: &mut TrainingState<C>,
    dataset: &Dataset,
    mut on_epoch: F,
) -> Result<()>
where
    C: Classifier,
    F: FnMut(&TrainingState<C>) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if state.replay.capacity() != dataset.len() {
        return Err(Error::InvalidInput(format!(
            "training state was built for {} samples, dataset has {}",
            state.replay.capacity(),
            dataset.len()
        )));
    }
    while state.epoch < state.config.epochs {
        train_epoch(state, dataset)?;
        log::info!(
            "epoch {}: test accuracy {:.4}",
            state.epoch,
            state.metrics.last().map_or(f64::NAN, |m| m.test_accuracy)
        );
        on_epoch(state)?;
    }
    Ok(())
}

/// Fresh state plus a full training run.
pub fn train(dataset: &Dataset, setup: &TrainSetup) -> Result<TrainingState> {
    let mut state = TrainingState::initialize(setup, dataset.len())?;
    run_training(&mut state, dataset, |_| Ok(()))?;
    Ok(state)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PAUGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<C: Classifier>(state: &TrainingState<C>, path: &Path) -> Result<()> {
    let body = bincode::serialize(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("partial");
    let write = |p: &Path| -> std::io::Result<()> {
        let mut f = fs::File::create(p)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(body.len() as u64).to_le_bytes())?;
        f.write_all(&body)?;
        f.sync_all()
    };
    write(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<C: Classifier>(path: &Path) -> Result<TrainingState<C>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = CHECKPOINT_MAGIC.len() + 4 + 8;
    if bytes.len() < header || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[header..];
    if body.len() != len {
        return Err(Error::Checkpoint(format!(
            "{}: expected {len} payload bytes, found {} (truncated or corrupt)",
            path.display(),
            body.len()
        )));
    }
    let state: TrainingState<C> = bincode::deserialize(body)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    state.config.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Primitive, SynthConfig};

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                seed: 3,
                ..TrainConfig::default()
            },
            augmentor: AugmentorConfig {
                feature_channels: 8,
                feature_hidden: vec![8],
                shape_hidden: vec![8],
                displacement_hidden: vec![8],
                ..AugmentorConfig::default()
            },
            classifier: ClassifierConfig {
                point_widths: vec![8, 8],
                head_hidden: vec![8],
                num_classes: 2,
                normalize_features: true,
            },
        }
    }

    fn tiny_data() -> Dataset {
        let cfg = SynthConfig::balanced(&[Primitive::Sphere, Primitive::Cube], 4, 2, 16);
        generate_synthetic(&cfg, 1).unwrap()
    }

    fn items(ds: &Dataset) -> Vec<BatchItem<'_>> {
        ds.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == crate::dataio::Split::Train)
            .map(|(i, s)| BatchItem::from_sample(i, s))
            .collect()
    }

    #[test]
    fn replay_pool_bounds() {
        let ds = tiny_data();
        let mut pool = ReplayPool::new(ds.len());
        assert!(pool.insert(ds.len(), ds.samples[0].cloud.clone()).is_err());
        pool.insert(0, ds.samples[1].cloud.clone()).unwrap();
        pool.insert(0, ds.samples[2].cloud.clone()).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.get(0), Some(&ds.samples[2].cloud));
    }

    #[test]
    fn mixed_batch_composition() {
        let ds = tiny_data();
        let batch: Vec<_> = items(&ds).into_iter().take(6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = ReplayPool::new(ds.len());
        let mixed = build_mixed_batch(&empty, &batch, &mut rng).unwrap();
        assert!(mixed.iter().all(|m| m.replayed.is_none()));

        let mut full = ReplayPool::new(ds.len());
        for b in &batch {
            full.insert(b.id, ds.samples[(b.id + 1) % ds.len()].cloud.clone())
                .unwrap();
        }
        let mixed = build_mixed_batch(&full, &batch, &mut rng).unwrap();
        assert_eq!(mixed.iter().filter(|m| m.replayed.is_some()).count(), 3);
        for (m, b) in mixed.iter().zip(&batch) {
            assert_eq!(m.item.label, b.label);
            assert_eq!(m.item.id, b.id);
        }
        assert!(matches!(
            build_mixed_batch(&full, &batch[..5], &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = tiny_data();
        let mut setup = tiny_setup();
        setup.train.epochs = 0;
        let state = train(&ds, &setup).unwrap();
        assert_eq!(state.epoch, 0);
        assert!(state.metrics.is_empty());
        assert_eq!(state, TrainingState::initialize(&setup, ds.len()).unwrap());
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let ds = tiny_data();
        let mut setup = tiny_setup();
        setup.train.augmentor_lr = 0.0;
        setup.train.classifier_lr = 0.0;
        let mut state = TrainingState::initialize(&setup, ds.len()).unwrap();
        let before_a = state.augmentor.fingerprint();
        let before_c = state.classifier.fingerprint();
        let batch: Vec<_> = items(&ds).into_iter().take(4).collect();
        let draws: Vec<_> = batch
            .iter()
            .map(|_| state.augmentor.draw(16, &mut state.rng, true))
            .collect();
        augmentor_step(&mut state, &batch, &draws).unwrap();
        assert_eq!(state.augmentor.fingerprint(), before_a);
        let entries: Vec<_> = batch
            .iter()
            .map(|&item| MixedEntry {
                item,
                replayed: None,
            })
            .collect();
        classifier_step(&mut state, &entries, &draws).unwrap();
        assert_eq!(state.classifier.fingerprint(), before_c);
    }

    #[test]
    fn steps_isolate_the_frozen_network() {
        let ds = tiny_data();
        let mut state = TrainingState::initialize(&tiny_setup(), ds.len()).unwrap();
        let batch: Vec<_> = items(&ds).into_iter().take(4).collect();
        let draws: Vec<_> = batch
            .iter()
            .map(|_| state.augmentor.draw(16, &mut state.rng, true))
            .collect();
        let c = state.classifier.fingerprint();
        let a = state.augmentor.fingerprint();
        augmentor_step(&mut state, &batch, &draws).unwrap();
        assert_eq!(state.classifier.fingerprint(), c);
        assert_ne!(state.augmentor.fingerprint(), a);
        let a = state.augmentor.fingerprint();
        let entries: Vec<_> = batch
            .iter()
            .map(|&item| MixedEntry {
                item,
                replayed: None,
            })
            .collect();
        classifier_step(&mut state, &entries, &draws).unwrap();
        assert_eq!(state.augmentor.fingerprint(), a);
        assert_ne!(state.classifier.fingerprint(), c);
    }

    #[test]
    fn single_sample_loss_matches_closed_form() {
        let ds = tiny_data();
        let mut state = TrainingState::initialize(&tiny_setup(), ds.len()).unwrap();
        // move the augmentor off the identity so L(P') differs from L(P)
        let mut r = ChaCha8Rng::seed_from_u64(44);
        state.augmentor.visit_mut(&mut |t| {
            for v in t.iter_mut() {
                *v += rand::Rng::random_range(&mut r, -0.2..0.2);
            }
        });
        let batch: Vec<_> = items(&ds).into_iter().take(1).collect();
        let draws = vec![state.augmentor.draw(16, &mut state.rng, false)];
        let out = state
            .augmentor
            .augment_with(batch[0].cloud, &draws[0])
            .unwrap();
        let probs_p = state.classifier.probabilities(batch[0].cloud).unwrap();
        let probs_pp = state.classifier.probabilities(&out.augmented).unwrap();
        let y = batch[0].label;
        let lp = -probs_p.0[y].ln();
        let lpp = -probs_pp.0[y].ln();
        let rho = probs_p.0[y].exp().max(1.0);
        let expected = lpp + (1.0 - (lpp - rho * lp).exp()).abs();
        let report = augmentor_step(&mut state, &batch, &draws).unwrap();
        assert!((report.augmentor_loss - expected).abs() < 1e-12 * expected.max(1.0));
        assert!((report.xi_upper - (rho - 1.0) * lp).abs() < 1e-12);
    }

    #[test]
    fn identity_augmentor_reduces_to_double_cross_entropy() {
        let ds = tiny_data();
        let mut setup = tiny_setup();
        setup.train.weights.gamma = 0.0;
        setup.train.classifier_optimizer = OptimizerKind::SgdCosine;
        setup.train.epochs = 1000;
        setup.train.classifier_lr = 0.05;
        let batch: Vec<_> = items(&ds).into_iter().take(4).collect();

        let mut pa = TrainingState::initialize(&setup, ds.len()).unwrap();
        let draws: Vec<_> = batch
            .iter()
            .map(|_| pa.augmentor.draw(16, &mut pa.rng, true))
            .collect();
        let entries: Vec<_> = batch
            .iter()
            .map(|&item| MixedEntry {
                item,
                replayed: None,
            })
            .collect();
        classifier_step(&mut pa, &entries, &draws).unwrap();

        let mut base = TrainingState::initialize(&setup, ds.len()).unwrap();
        base.config.classifier_lr = 0.1;
        baseline_step(&mut base, &batch, Baseline::None).unwrap();

        for (a, b) in pa
            .classifier
            .flatten()
            .iter()
            .zip(base.classifier.flatten())
        {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let ds = tiny_data();
        let state = train(&ds, &tiny_setup()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path).unwrap();
        let loaded: TrainingState = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, state);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_checkpoint::<PointNetClassifier>(&path),
            Err(Error::Checkpoint(_))
        ));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(
            load_checkpoint::<PointNetClassifier>(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn metrics_have_one_row_per_epoch() {
        let ds = tiny_data();
        let state = train(&ds, &tiny_setup()).unwrap();
        assert_eq!(state.metrics.len(), 2);
        let tsv = metrics_tsv(&state.metrics);
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.starts_with(METRICS_HEADER));
        assert!(state.replay.len() <= ds.len());
        for id in state.replay.ids() {
            assert_eq!(ds.samples[id].split, crate::dataio::Split::Train);
        }
    }

    #[test]
    fn odd_batch_with_mixing_rejected() {
        let mut setup = tiny_setup();
        setup.train.batch_size = 5;
        assert!(TrainingState::initialize(&setup, 10).is_err());
    }
}
