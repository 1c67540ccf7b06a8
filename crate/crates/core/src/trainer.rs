//! Mini-batch Adam training with early stopping, top-k evaluation and k-fold
//! cross-validation.
//!
//! Samples that share an identical window are merged into one [`Group`] carrying
//! the class counts of all of them. A synthetic population replays one scenario,
//! so a balanced dataset of ~200k samples holds only ~1k distinct windows; the
//! count-weighted cross-entropy over groups equals the per-sample mean exactly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnyModel, Arch, Batch, GazeModel};
use crate::nn::{adam_step, AdamConfig, Matrix, Mode, Param};
use crate::preprocess::{SequenceDataset, SequenceSample, WINDOW_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Distinct windows per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Worker threads for [`run_kfold`]; results do not depend on it.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

impl TrainConfig {
    pub fn new(arch: Arch) -> Self {
        TrainConfig { arch, lr: 0.001, max_epochs: 100, patience: 10, batch_size: 64, seed: 0, val_fraction: 0.1, jobs: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::invalid(format!("val_fraction {} outside (0, 0.5)", self.val_fraction)));
        }
        if self.batch_size == 0 || self.jobs == 0 {
            return Err(Error::invalid("batch_size and jobs must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// One distinct window with the number of samples of each class that use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub window: Vec<u8>,
    pub counts: Vec<f64>,
}

/// Merges samples with identical windows, in first-seen order.
pub fn group_samples(samples: &[&SequenceSample], n_classes: usize) -> Vec<Group> {
    let mut index: HashMap<&[u8], usize> = HashMap::new();
    let mut groups: Vec<Group> = Vec::new();
    for s in samples {
        let g = *index.entry(&s.features).or_insert_with(|| {
            groups.push(Group { window: s.features.clone(), counts: vec![0.0; n_classes] });
            groups.len() - 1
        });
        groups[g].counts[s.target as usize] += 1.0;
    }
    groups
}

fn groups_batch(groups: &[&Group]) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(groups.len() * WINDOW_LEN);
    let mut counts = Vec::new();
    for g in groups {
        inputs.extend(g.window.iter().map(|&b| b as f64));
        counts.extend_from_slice(&g.counts);
    }
    Batch::new(inputs, counts, groups.len())
}

/// Class indices ordered by descending probability, ties to the lower index.
pub fn rank_classes(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// 1-based rank of `target` under [`rank_classes`].
pub fn target_rank(probs: &[f64], target: usize) -> usize {
    let p = probs[target];
    1 + probs.iter().enumerate().filter(|&(i, &q)| q > p || (q == p && i < target)).count()
}

fn predict_groups(model: &dyn GazeModel, groups: &[Group]) -> Result<Matrix> {
    let n = model.n_classes();
    let mut out = Vec::with_capacity(groups.len() * n);
    for chunk in groups.chunks(256) {
        let inputs: Vec<f64> = chunk.iter().flat_map(|g| g.window.iter().map(|&b| b as f64)).collect();
        out.extend_from_slice(model.predict(&inputs)?.as_slice());
    }
    Ok(Matrix::from_vec(groups.len(), n, out))
}

/// Count-weighted top-k accuracy for k = 1..=`max_k`.
pub fn evaluate_groups(model: &dyn GazeModel, groups: &[Group], max_k: usize) -> Result<Vec<f64>> {
    let n = model.n_classes();
    if max_k == 0 || max_k > n {
        return Err(Error::invalid(format!("k must be in 1..={n}")));
    }
    let probs = predict_groups(model, groups)?;
    let mut hits = vec![0.0; max_k];
    let mut total = 0.0;
    for (g, group) in groups.iter().enumerate() {
        for (c, &count) in group.counts.iter().enumerate() {
            if count == 0.0 {
                continue;
            }
            total += count;
            let rank = target_rank(probs.row(g), c);
            for (k, h) in hits.iter_mut().enumerate() {
                if rank <= k + 1 {
                    *h += count;
                }
            }
        }
    }
    if total == 0.0 {
        return Err(Error::invalid("no samples to evaluate"));
    }
    Ok(hits.into_iter().map(|h| h / total).collect())
}

/// Fraction of `samples` whose target is among the model's `k` most probable classes.
pub fn evaluate_topk(model: &dyn GazeModel, samples: &[&SequenceSample], k: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let groups = group_samples(samples, model.n_classes());
    Ok(evaluate_groups(model, &groups, k)?[k - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: AnyModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainedModel {
    pub fn epochs_run(&self) -> usize {
        self.log.len()
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.train_loss)
    }
}

/// Stratified split of sample indices into (train, validation).
fn carve_validation(samples: &[&SequenceSample], n_classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.target as usize].push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        idx.shuffle(rng);
        let take = if idx.len() >= 2 { ((idx.len() as f64 * fraction).round() as usize).max(1) } else { 0 };
        val.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains a fresh model on `samples` with early stopping on a carved validation
/// split and returns the best-validation weights.
pub fn train_model(samples: &[&SequenceSample], n_classes: usize, config: &TrainConfig) -> Result<TrainedModel> {
    train_model_with(samples, n_classes, config, &|_| {})
}

pub fn train_model_with(
    samples: &[&SequenceSample],
    n_classes: usize,
    config: &TrainConfig,
    on_epoch: &(dyn Fn(&EpochLog) + Sync),
) -> Result<TrainedModel> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, val_idx) = carve_validation(samples, n_classes, config.val_fraction, &mut rng);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::invalid("training split too small to carve a validation set"));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i]).collect::<Vec<_>>();
    let train_groups = group_samples(&pick(&train_idx), n_classes);
    let val_groups = group_samples(&pick(&val_idx), n_classes);

    let mut model = AnyModel::new(config.arch, n_classes, config.seed ^ 0x6a09_e667_f3bc_c908)?;
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut best: Option<(f64, Vec<Param>, usize)> = None;
    let mut stale = 0;
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_groups.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let members: Vec<&Group> = chunk.iter().map(|&i| &train_groups[i]).collect();
            let batch = groups_batch(&members)?;
            let loss = model.loss_and_grad(&batch, Mode::Train, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            step += 1;
            adam_step(model.params_mut(), &adam, step)?;
            let w = batch.total_count();
            loss_sum += loss * w;
            weight += w;
        }
        let val_top1 = evaluate_groups(&model, &val_groups, 1)?[0];
        let entry = EpochLog { epoch, train_loss: loss_sum / weight, val_top1 };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(b, _, _)| val_top1 > *b) {
            best = Some((val_top1, model.params().to_vec(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch runs");
    for (p, b) in model.params_mut().iter_mut().zip(params) {
        *p = Param::new(b.name, b.value);
    }
    Ok(TrainedModel { model, log, best_epoch })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

impl TopK {
    fn from_slice(v: &[f64]) -> TopK {
        TopK { top1: v[0], top2: v[1], top3: v[2] }
    }

    pub fn is_monotone(&self) -> bool {
        self.top1 <= self.top2 && self.top2 <= self.top3 && self.top3 <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub train: TopK,
    pub test: TopK,
    pub final_loss: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: TopK,
    pub test: TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: SplitStats,
    /// Population standard deviation over folds.
    pub std: SplitStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arch: Arch,
    pub scenario: String,
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

fn summarize(folds: &[FoldReport]) -> Summary {
    let n = folds.len() as f64;
    let stat = |get: &dyn Fn(&FoldReport) -> f64| {
        let mean = folds.iter().map(get).sum::<f64>() / n;
        let var = folds.iter().map(|f| (get(f) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let split = |get: &dyn Fn(&FoldReport) -> TopK| {
        let (m1, s1) = stat(&|f| get(f).top1);
        let (m2, s2) = stat(&|f| get(f).top2);
        let (m3, s3) = stat(&|f| get(f).top3);
        (TopK { top1: m1, top2: m2, top3: m3 }, TopK { top1: s1, top2: s2, top3: s3 })
    };
    let (train_mean, train_std) = split(&|f| f.train);
    let (test_mean, test_std) = split(&|f| f.test);
    Summary { mean: SplitStats { train: train_mean, test: test_mean }, std: SplitStats { train: train_std, test: test_std } }
}

#[derive(Debug, Clone)]
pub struct KfoldOutcome {
    pub report: MetricsReport,
    /// Best-validation model of each fold, in fold order.
    pub models: Vec<AnyModel>,
}

/// Per-fold seed so folds are independent of scheduling.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_fold(dataset: &SequenceDataset, config: &TrainConfig, fold: usize, progress: &(dyn Fn(&str) + Sync)) -> Result<(FoldReport, AnyModel)> {
    let (test, train): (Vec<&SequenceSample>, Vec<&SequenceSample>) = dataset.samples.iter().partition(|s| s.fold as usize == fold);
    if test.is_empty() {
        return Err(Error::invalid(format!("fold {fold} has no samples")));
    }
    let cfg = TrainConfig { seed: fold_seed(config.seed, fold), ..config.clone() };
    let trained = train_model_with(&train, dataset.n_classes, &cfg, &|e| {
        progress(&format!("fold {fold} epoch {} loss {:.4} val_top1 {:.4}", e.epoch, e.train_loss, e.val_top1))
    })?;
    let k = 3.min(dataset.n_classes);
    let pad = |mut v: Vec<f64>| {
        while v.len() < 3 {
            v.push(1.0);
        }
        TopK::from_slice(&v)
    };
    let train_acc = pad(evaluate_groups(&trained.model, &group_samples(&train, dataset.n_classes), k)?);
    let test_acc = pad(evaluate_groups(&trained.model, &group_samples(&test, dataset.n_classes), k)?);
    let report = FoldReport {
        fold,
        epochs: trained.epochs_run(),
        best_epoch: trained.best_epoch,
        train: train_acc,
        test: test_acc,
        final_loss: trained.final_loss(),
        n_train: train.len(),
        n_test: test.len(),
    };
    Ok((report, trained.model))
}

/// Trains on all-but-fold-i and tests on fold i, for i in `0..k`.
pub fn run_kfold(dataset: &SequenceDataset, config: &TrainConfig, k: usize) -> Result<KfoldOutcome> {
    run_kfold_with(dataset, config, k, &|_| {})
}

pub fn run_kfold_with(dataset: &SequenceDataset, config: &TrainConfig, k: usize, progress: &(dyn Fn(&str) + Sync)) -> Result<KfoldOutcome> {
    config.validate()?;
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.fold as usize >= k) {
        return Err(Error::invalid(format!("sample assigned to fold {} but k = {k}", s.fold)));
    }
    let mut results: Vec<Option<Result<(FoldReport, AnyModel)>>> = (0..k).map(|_| None).collect();
    if config.jobs <= 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(dataset, config, fold, progress));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..config.jobs.min(k) {
                scope.spawn(|| loop {
                    let fold = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if fold >= k {
                        break;
                    }
                    let r = run_fold(dataset, config, fold, progress);
                    done.lock().expect("fold results lock")[fold] = Some(r);
                });
            }
        });
    }
    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for r in results {
        let (report, model) = r.expect("every fold ran")?;
        folds.push(report);
        models.push(model);
    }
    let summary = summarize(&folds);
    let report = MetricsReport { arch: config.arch, scenario: dataset.scenario_id.clone(), config: config.clone(), folds, summary };
    Ok(KfoldOutcome { report, models })
}
