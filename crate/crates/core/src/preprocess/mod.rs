//! Turns gaze traces and scene matrices into labelled 30-frame windows.

mod gzds;

pub use gzds::{dataset_to_csv, read_gzds, write_gzds, GZDS_MAGIC, GZDS_VERSION};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GazeTrace;
use crate::scenario::{FeatureMatrix, ScenarioSpec, N_FEATURES};

pub const SEQ_LEN: usize = 30;
pub const WINDOW_LEN: usize = SEQ_LEN * N_FEATURES;

/// Angular class boundaries: `n_classes + 1` strictly increasing edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBins {
    edges: Vec<f64>,
}

impl ClassBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::invalid("class bins need at least two classes"));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("class bin edges must be finite and strictly increasing"));
        }
        Ok(ClassBins { edges })
    }

    /// `n` equal-width bins over `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        let width = (hi - lo) / n as f64;
        let mut edges: Vec<f64> = (0..n).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        Self::new(edges)
    }

    /// Equal bins over the scenario's angle range.
    pub fn for_scenario(spec: &ScenarioSpec) -> Result<Self> {
        Self::uniform(spec.convention.min_deg, spec.convention.max_deg, spec.n_classes)
    }

    pub fn n_classes(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn midpoint(&self, class: usize) -> f64 {
        0.5 * (self.edges[class] + self.edges[class + 1])
    }
}

/// Bin lookup with clamping: `edges[i] <= yaw < edges[i+1]`, top edge inclusive.
pub fn angle_to_class(yaw_deg: f64, bins: &ClassBins) -> usize {
    let e = &bins.edges;
    let n = bins.n_classes();
    let y = if yaw_deg.is_nan() { e[0] } else { yaw_deg.clamp(e[0], e[n]) };
    // number of interior edges <= y
    e[1..n].partition_point(|&edge| edge <= y)
}

pub fn label_trace(trace: &GazeTrace, bins: &ClassBins) -> Vec<usize> {
    trace.yaw_deg.iter().map(|&y| angle_to_class(y, bins)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    /// `SEQ_LEN x 24` binary flags, frame-major.
    pub features: Vec<u8>,
    pub target: u8,
    pub participant_id: u32,
    pub fold: u16,
    /// First frame of the window in the source matrix.
    pub start: u32,
}

impl SequenceSample {
    pub fn frame(&self, i: usize) -> &[u8] {
        &self.features[i * N_FEATURES..(i + 1) * N_FEATURES]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub samples: Vec<SequenceSample>,
    pub n_classes: usize,
    pub scenario_id: String,
}

impl SequenceDataset {
    pub fn new(n_classes: usize, scenario_id: impl Into<String>) -> Self {
        SequenceDataset { samples: Vec::new(), n_classes, scenario_id: scenario_id.into() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for s in &self.samples {
            h[s.target as usize] += 1;
        }
        h
    }

    pub fn n_folds(&self) -> usize {
        self.samples.iter().map(|s| s.fold as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Windows {
    pub samples: Vec<SequenceSample>,
    pub warning: Option<String>,
}

/// Slides a `len`-frame window over the matrix; each sample's target is the label
/// of its last frame. The time column never enters the window.
pub fn windowize(
    matrix: &FeatureMatrix,
    labels: &[usize],
    len: usize,
    stride: usize,
    participant_id: u32,
) -> Result<Windows> {
    if matrix.n_frames() != labels.len() {
        return Err(Error::shape(format!("{} matrix rows vs {} labels", matrix.n_frames(), labels.len())));
    }
    if len == 0 || stride == 0 {
        return Err(Error::invalid("window length and stride must be positive"));
    }
    let t = labels.len();
    if t < len {
        return Ok(Windows {
            samples: Vec::new(),
            warning: Some(format!("participant {participant_id}: {t} frames is shorter than the {len}-frame window")),
        });
    }
    let samples = (0..=t - len)
        .step_by(stride)
        .map(|j| SequenceSample {
            features: matrix.window(j, len).to_vec(),
            target: labels[j + len - 1] as u8,
            participant_id,
            fold: 0,
            start: j as u32,
        })
        .collect();
    Ok(Windows { samples, warning: None })
}

/// Labelled series of one participant, used to re-extract jittered windows.
#[derive(Debug, Clone)]
pub struct SourceSeries {
    pub participant_id: u32,
    pub labels: Vec<usize>,
}

/// Builds the un-augmented dataset for a population watching one scenario.
pub fn build_dataset(
    spec: &ScenarioSpec,
    matrix: &FeatureMatrix,
    traces: &[GazeTrace],
    bins: &ClassBins,
    stride: usize,
) -> Result<(SequenceDataset, Vec<SourceSeries>, Vec<String>)> {
    let mut ds = SequenceDataset::new(bins.n_classes(), spec.id.clone());
    let mut sources = Vec::with_capacity(traces.len());
    let mut warnings = Vec::new();
    for tr in traces {
        let labels = label_trace(tr, bins);
        let w = windowize(matrix, &labels, SEQ_LEN, stride, tr.participant_id)?;
        warnings.extend(w.warning);
        ds.samples.extend(w.samples);
        sources.push(SourceSeries { participant_id: tr.participant_id, labels });
    }
    Ok((ds, sources, warnings))
}

const JITTER: [i64; 4] = [-2, -1, 1, 2];
const JITTER_ATTEMPTS: usize = 64;

/// Oversamples every class up to the largest class count. Added samples are
/// minority windows shifted by ±1 or ±2 frames whose last-frame label is unchanged.
pub fn augment_balance(
    dataset: &SequenceDataset,
    matrix: &FeatureMatrix,
    sources: &[SourceSeries],
    seed: u64,
) -> Result<SequenceDataset> {
    let hist = dataset.class_histogram();
    if let Some(c) = hist.iter().position(|&n| n == 0) {
        return Err(Error::UnrepresentedClass(c));
    }
    let max = hist.iter().copied().max().unwrap_or(0);
    let mut out = dataset.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_frames = matrix.n_frames() as i64;
    for (class, &count) in hist.iter().enumerate() {
        if count == max {
            continue;
        }
        let pool: Vec<usize> =
            dataset.samples.iter().enumerate().filter(|(_, s)| s.target as usize == class).map(|(i, _)| i).collect();
        for _ in count..max {
            let mut added = None;
            for _ in 0..JITTER_ATTEMPTS {
                let src = &dataset.samples[pool[rng.gen_range(0..pool.len())]];
                let delta = JITTER[rng.gen_range(0..JITTER.len())];
                let start = src.start as i64 + delta;
                if start < 0 || start + SEQ_LEN as i64 > n_frames {
                    continue;
                }
                let Some(series) = sources.iter().find(|s| s.participant_id == src.participant_id) else {
                    continue;
                };
                let last = (start as usize) + SEQ_LEN - 1;
                if series.labels.get(last) != Some(&class) {
                    continue;
                }
                added = Some(SequenceSample {
                    features: matrix.window(start as usize, SEQ_LEN).to_vec(),
                    start: start as u32,
                    ..src.clone()
                });
                break;
            }
            // no label-preserving shift found: fall back to an exact copy
            let sample = added.unwrap_or_else(|| dataset.samples[pool[rng.gen_range(0..pool.len())]].clone());
            out.samples.push(sample);
        }
    }
    Ok(out)
}

/// Random, balanced assignment of samples to `k` folds (sizes differ by at most one).
pub fn kfold_split(dataset: &SequenceDataset, k: usize, seed: u64) -> Result<SequenceDataset> {
    if k == 0 || dataset.len() < k {
        return Err(Error::invalid(format!("{} samples cannot fill {k} folds", dataset.len())));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = dataset.clone();
    for (pos, &i) in order.iter().enumerate() {
        out.samples[i].fold = (pos % k) as u16;
    }
    Ok(out)
}

/// Fold assignment that keeps each participant's windows in one fold.
pub fn kfold_split_by_participant(dataset: &SequenceDataset, k: usize, seed: u64) -> Result<SequenceDataset> {
    let ids: BTreeSet<u32> = dataset.samples.iter().map(|s| s.participant_id).collect();
    if k == 0 || ids.len() < k {
        return Err(Error::invalid(format!("{} participants cannot fill {k} folds", ids.len())));
    }
    let mut ids: Vec<u32> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = dataset.clone();
    for s in &mut out.samples {
        let pos = ids.iter().position(|&p| p == s.participant_id).expect("participant listed");
        s.fold = (pos % k) as u16;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s1_bins() -> ClassBins {
        ClassBins::uniform(90.0, 270.0, 6).unwrap()
    }

    fn trace(v: Vec<f64>) -> GazeTrace {
        GazeTrace { participant_id: 0, scenario_id: "s1".into(), yaw_deg: v }
    }

    #[test]
    fn angle_to_class_examples() {
        let b = s1_bins();
        assert_eq!(angle_to_class(180.0, &b), 3);
        assert_eq!(angle_to_class(270.0, &b), 5);
        assert_eq!(angle_to_class(275.0, &b), 5);
        assert_eq!(angle_to_class(90.0, &b), 0);
        assert_eq!(angle_to_class(-1000.0, &b), 0);
        assert_eq!(angle_to_class(179.999, &b), 2);
        assert_eq!(b.midpoint(3), 195.0);
    }

    #[test]
    fn s2_bins() {
        let s2 = ScenarioSpec::builtin("s2").unwrap();
        let b = ClassBins::for_scenario(&s2).unwrap();
        assert_eq!(b.n_classes(), 7);
        assert_eq!(b.edges()[0], 0.0);
        assert_eq!(b.edges()[7], 180.0);
        assert_eq!(angle_to_class(90.0, &b), 3);
        assert!(ClassBins::new(vec![0.0, 1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn angle_to_class_total_and_monotone(a in -1e4f64..1e4, b in -1e4f64..1e4) {
            let bins = s1_bins();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (cl, ch) = (angle_to_class(lo, &bins), angle_to_class(hi, &bins));
            prop_assert!(ch < 6 && cl <= ch);
        }
    }

    #[test]
    fn label_trace_examples() {
        let b = s1_bins();
        assert_eq!(label_trace(&trace(vec![180.0; 30]), &b), vec![3; 30]);
        assert_eq!(label_trace(&trace(vec![100.0, 260.0, 100.0, 260.0]), &b), vec![0, 5, 0, 5]);
        assert!(label_trace(&trace(vec![]), &b).is_empty());
    }

    fn ramp_matrix(t: usize) -> FeatureMatrix {
        let rows: Vec<[u8; N_FEATURES]> = (0..t)
            .map(|f| {
                let mut r = [0u8; N_FEATURES];
                for (i, v) in r.iter_mut().enumerate() {
                    *v = ((f >> (i % 7)) & 1) as u8;
                }
                r
            })
            .collect();
        FeatureMatrix::from_rows(&rows)
    }

    #[test]
    fn windowize_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i % 6).collect();
        let w = windowize(&ramp_matrix(100), &labels, 30, 1, 4).unwrap();
        assert_eq!(w.samples.len(), 71);
        assert!(w.warning.is_none());
        let w = windowize(&ramp_matrix(30), &labels[..30], 30, 1, 4).unwrap();
        assert_eq!(w.samples.len(), 1);
        assert_eq!(w.samples[0].target as usize, labels[29]);
        let w = windowize(&ramp_matrix(29), &labels[..29], 30, 1, 4).unwrap();
        assert!(w.samples.is_empty());
        assert!(w.warning.is_some());
        assert!(windowize(&ramp_matrix(29), &labels[..30], 30, 1, 4).is_err());
        let w = windowize(&ramp_matrix(100), &labels, 30, 5, 4).unwrap();
        assert_eq!(w.samples.len(), 15);
    }

    #[test]
    fn windowize_round_trips_matrix_slices() {
        let m = ramp_matrix(60);
        let labels = vec![1; 60];
        let w = windowize(&m, &labels, 30, 1, 0).unwrap();
        for (j, s) in w.samples.iter().enumerate() {
            for i in 0..30 {
                assert_eq!(s.frame(i), m.row(j + i));
            }
        }
    }

    fn dataset_with_hist(hist: &[usize]) -> (SequenceDataset, FeatureMatrix, Vec<SourceSeries>) {
        // one participant per class with a constant label series
        let m = ramp_matrix(300);
        let mut ds = SequenceDataset::new(hist.len(), "t");
        let mut sources = Vec::new();
        for (c, &n) in hist.iter().enumerate() {
            let labels = vec![c; 300];
            let w = windowize(&m, &labels, 30, 1, c as u32).unwrap();
            ds.samples.extend(w.samples.into_iter().take(n));
            sources.push(SourceSeries { participant_id: c as u32, labels });
        }
        (ds, m, sources)
    }

    #[test]
    fn augment_balances_to_max() {
        let (ds, m, src) = dataset_with_hist(&[100, 50, 10, 100, 100, 100]);
        let out = augment_balance(&ds, &m, &src, 3).unwrap();
        assert_eq!(out.class_histogram(), vec![100; 6]);
        for s in &out.samples[ds.len()..] {
            // re-extracted windows match the matrix and keep their target
            assert_eq!(s.features, m.window(s.start as usize, 30));
            assert_eq!(src[s.participant_id as usize].labels[s.start as usize + 29], s.target as usize);
        }
        assert_eq!(augment_balance(&ds, &m, &src, 3).unwrap(), out);
    }

    #[test]
    fn augment_uniform_is_noop_and_missing_class_errors() {
        let (ds, m, src) = dataset_with_hist(&[20, 20, 20]);
        assert_eq!(augment_balance(&ds, &m, &src, 1).unwrap(), ds);
        let (ds, m, src) = dataset_with_hist(&[20, 20, 0, 5]);
        let err = augment_balance(&ds, &m, &src, 1).unwrap_err();
        assert_eq!(err.to_string(), "class 2 unrepresented");
    }

    #[test]
    fn kfold_sizes() {
        let (ds, _, _) = dataset_with_hist(&[50, 50]);
        let f = kfold_split(&ds, 10, 0).unwrap();
        let mut sizes = vec![0; 10];
        f.samples.iter().for_each(|s| sizes[s.fold as usize] += 1);
        assert_eq!(sizes, vec![10; 10]);

        let (ds, _, _) = dataset_with_hist(&[50, 45]);
        let f = kfold_split(&ds, 10, 0).unwrap();
        let mut sizes = vec![0; 10];
        f.samples.iter().for_each(|s| sizes[s.fold as usize] += 1);
        sizes.sort();
        assert_eq!(sizes, vec![9, 9, 9, 9, 9, 10, 10, 10, 10, 10]);
        assert_eq!(kfold_split(&ds, 10, 0).unwrap(), f);
        assert_ne!(kfold_split(&ds, 10, 1).unwrap(), f);

        let (small, _, _) = dataset_with_hist(&[3, 3]);
        assert!(kfold_split(&small, 10, 0).is_err());
    }

    #[test]
    fn kfold_by_participant_keeps_groups() {
        let (ds, _, _) = dataset_with_hist(&[5; 12]);
        let f = kfold_split_by_participant(&ds, 10, 2).unwrap();
        for p in 0..12 {
            let folds: BTreeSet<u16> = f.samples.iter().filter(|s| s.participant_id == p).map(|s| s.fold).collect();
            assert_eq!(folds.len(), 1);
        }
        let all: BTreeSet<u16> = f.samples.iter().map(|s| s.fold).collect();
        assert_eq!(all.len(), 10);
    }
}
