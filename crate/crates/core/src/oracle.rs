//! Synthetic participants: persona sampling, gaze-trace simulation and the
//! population statistics used as reference bounds.
//!
//! Each frame the persona picks the active event with the highest weight (ties go
//! to the most recently started one). Switching to a new target waits for the
//! persona's latency and for the current fixation to have lasted its minimum dwell.
//! Boredom is a hazard that grows with fixation age; once it fires the gaze rests
//! straight ahead until the fixation changes. Peripheral targets (more than 30°
//! off straight ahead) only turn the head with probability `head_turn_prob`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{label_trace, ClassBins};
use crate::scenario::{validate_scenario, ScenarioSpec, StimulusKind, FRAME_PERIOD_S};

/// Half-width of the cone (degrees) reachable by eye movement alone.
pub const PERIPHERAL_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

/// Sampling ranges for [`sample_persona`]; every field can be overridden from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonaRanges {
    pub human_weight: Range,
    pub nonhuman_weight: Range,
    pub speaking_bonus: f64,
    pub latency_s: Range,
    pub dwell_min_s: Range,
    pub noise_deg: Range,
    pub head_turn_prob: Range,
    pub boredom_rate: Range,
}

impl Default for PersonaRanges {
    fn default() -> Self {
        PersonaRanges {
            human_weight: Range::new(1.0, 2.0),
            nonhuman_weight: Range::new(0.2, 0.9),
            speaking_bonus: 0.3,
            latency_s: Range::new(0.2, 0.6),
            dwell_min_s: Range::new(0.5, 1.5),
            noise_deg: Range::new(0.0, 5.0),
            head_turn_prob: Range::new(0.6, 1.0),
            boredom_rate: Range::new(0.0, 0.02),
        }
    }
}

/// Priority weight for every catalog kind, serialized as a name → weight map.
#[derive(Debug, Clone, PartialEq)]
pub struct KindWeights(Vec<f64>);

impl KindWeights {
    pub fn uniform(w: f64) -> Self {
        KindWeights(vec![w; StimulusKind::ALL.len()])
    }

    fn index(kind: StimulusKind) -> usize {
        StimulusKind::ALL.iter().position(|k| *k == kind).expect("catalog kind")
    }

    pub fn get(&self, kind: StimulusKind) -> f64 {
        self.0[Self::index(kind)]
    }

    pub fn set(&mut self, kind: StimulusKind, w: f64) {
        self.0[Self::index(kind)] = w;
    }
}

impl Serialize for KindWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, f64> = StimulusKind::ALL.iter().map(|k| (k.name(), self.get(*k))).collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for KindWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(d)?;
        let mut w = KindWeights::uniform(0.0);
        for (name, v) in map {
            let kind: StimulusKind = name.parse().map_err(serde::de::Error::custom)?;
            w.set(kind, v);
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Persona {
    pub weights: KindWeights,
    pub latency_s: f64,
    pub dwell_min_s: f64,
    pub head_turn_prob: f64,
    pub noise_deg: f64,
    pub boredom_rate: f64,
}

impl Persona {
    /// A noiseless persona that always turns its head and never gets bored.
    pub fn deterministic(weights: KindWeights, latency_s: f64, dwell_min_s: f64) -> Self {
        Persona { weights, latency_s, dwell_min_s, head_turn_prob: 1.0, noise_deg: 0.0, boredom_rate: 0.0 }
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.weights.0.iter().all(|w| *w >= 0.0 && w.is_finite())
            && self.latency_s >= 0.0
            && self.dwell_min_s >= 0.0
            && (0.0..=1.0).contains(&self.head_turn_prob)
            && self.noise_deg >= 0.0
            && self.boredom_rate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("persona parameters out of range"))
        }
    }
}

/// Deterministic persona for `seed`.
pub fn sample_persona(seed: u64, ranges: &PersonaRanges) -> Persona {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = KindWeights::uniform(0.0);
    for &kind in StimulusKind::ALL {
        let r = if kind.is_human() { &ranges.human_weight } else { &ranges.nonhuman_weight };
        weights.set(kind, r.sample(&mut rng));
    }
    for &kind in StimulusKind::ALL {
        if let Some(silent) = kind.silent_variant() {
            weights.set(kind, weights.get(silent) + ranges.speaking_bonus);
        }
    }
    Persona {
        weights,
        latency_s: ranges.latency_s.sample(&mut rng),
        dwell_min_s: ranges.dwell_min_s.sample(&mut rng),
        noise_deg: ranges.noise_deg.sample(&mut rng),
        head_turn_prob: ranges.head_turn_prob.sample(&mut rng),
        boredom_rate: ranges.boredom_rate.sample(&mut rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeTrace {
    pub participant_id: u32,
    pub scenario_id: String,
    pub yaw_deg: Vec<f64>,
}

/// What drove the gaze at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameTarget {
    /// Arbitration winner among active events.
    pub candidate: Option<usize>,
    /// Event currently fixated (after latency and dwell).
    pub fixation: Option<usize>,
    /// True when the head rests straight ahead (nothing fixated, or boredom).
    pub straight: bool,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: GazeTrace,
    pub targets: Vec<FrameTarget>,
}

fn frames_of(seconds: f64) -> i64 {
    (seconds / FRAME_PERIOD_S).round() as i64
}

/// Simulates one participant; see the module docs for the arbitration rules.
pub fn simulate_trace(spec: &ScenarioSpec, persona: &Persona, participant_id: u32, seed: u64) -> Result<GazeTrace> {
    Ok(simulate_with_log(spec, persona, participant_id, seed)?.trace)
}

pub fn simulate_with_log(spec: &ScenarioSpec, persona: &Persona, participant_id: u32, seed: u64) -> Result<Simulation> {
    validate_scenario(spec).into_result()?;
    persona.check()?;
    let n = spec.n_frames();
    let conv = &spec.convention;
    let straight = conv.straight_ahead_deg;
    let latency = frames_of(persona.latency_s);
    let dwell = frames_of(persona.dwell_min_s);

    let mut active: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, ev) in spec.events.iter().enumerate() {
        let (a, b) = ev.frame_range();
        for f in a.max(0) as usize..(b.max(0) as usize).min(n) {
            active[f].push(i);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixation: Option<usize> = None;
    let mut fix_start = 0i64;
    let mut pending: Option<(usize, i64)> = None;
    let mut bored = false;
    let mut turn_ok = true;
    let mut base_yaw = straight;
    let mut yaw = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);

    for (f, now) in active.iter().enumerate() {
        let f = f as i64;
        if let Some(e) = fixation {
            if !now.contains(&e) {
                fixation = None;
                bored = false;
            }
        }

        let mut candidate: Option<usize> = None;
        for &i in now {
            let w = persona.weights.get(spec.events[i].kind);
            if w <= 0.0 {
                continue;
            }
            candidate = match candidate {
                None => Some(i),
                Some(c) => {
                    let wc = persona.weights.get(spec.events[c].kind);
                    let better = w > wc || (w == wc && spec.events[i].start_s > spec.events[c].start_s);
                    Some(if better { i } else { c })
                }
            };
        }

        match candidate {
            None => pending = None,
            Some(c) if Some(c) == fixation => pending = None,
            Some(c) => {
                let due = match pending {
                    Some((p, due)) if p == c => due,
                    _ => {
                        pending = Some((c, f + latency));
                        f + latency
                    }
                };
                let dwell_done = fixation.is_none() || f - fix_start >= dwell;
                if f >= due && dwell_done {
                    fixation = Some(c);
                    fix_start = f;
                    pending = None;
                    bored = false;
                    turn_ok = rng.gen::<f64>() < persona.head_turn_prob;
                }
            }
        }

        let u: f64 = rng.gen();
        if fixation.is_some() && !bored {
            let age = f - fix_start;
            let age_s = age as f64 * FRAME_PERIOD_S;
            if age >= dwell && u < persona.boredom_rate * age_s * FRAME_PERIOD_S {
                bored = true;
            }
        }

        let is_straight = match fixation {
            Some(e) if !bored => {
                let target = spec.events[e].source_yaw_deg;
                if (target - straight).abs() <= PERIPHERAL_DEG || turn_ok {
                    base_yaw = target;
                }
                false
            }
            _ => {
                base_yaw = straight;
                true
            }
        };
        targets.push(FrameTarget { candidate, fixation, straight: is_straight });

        let z: f64 = rng.sample(StandardNormal);
        yaw.push(conv.clamp(base_yaw + persona.noise_deg * z));
    }

    Ok(Simulation { trace: GazeTrace { participant_id, scenario_id: spec.id.clone(), yaw_deg: yaw }, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-frame mean and population standard deviation across participants.
pub fn population_stats(traces: &[GazeTrace]) -> Result<PopulationStats> {
    let first = traces.first().ok_or_else(|| Error::invalid("no traces"))?;
    let t = first.yaw_deg.len();
    if traces.iter().any(|tr| tr.yaw_deg.len() != t) {
        return Err(Error::shape("traces differ in length"));
    }
    if traces.iter().any(|tr| tr.scenario_id != first.scenario_id) {
        return Err(Error::invalid("traces come from different scenarios"));
    }
    let n = traces.len() as f64;
    let mut mean = vec![0.0; t];
    let mut std = vec![0.0; t];
    for f in 0..t {
        let m = traces.iter().map(|tr| tr.yaw_deg[f]).sum::<f64>() / n;
        let var = traces.iter().map(|tr| (tr.yaw_deg[f] - m).powi(2)).sum::<f64>() / n;
        mean[f] = m;
        std[f] = var.sqrt();
    }
    Ok(PopulationStats { mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesReference {
    /// Per-frame empirical class distribution across the population.
    pub distributions: Vec<Vec<f64>>,
    pub top1: f64,
    pub top3: f64,
}

/// Best achievable top-1/top-3 accuracy of any predictor that only sees the scene,
/// given how much the population disagrees frame by frame.
pub fn bayes_reference(
    spec: &ScenarioSpec,
    personas: &[Persona],
    seeds: &[u64],
    bins: &ClassBins,
) -> Result<BayesReference> {
    if personas.is_empty() {
        return Err(Error::invalid("empty population"));
    }
    if personas.len() != seeds.len() {
        return Err(Error::invalid("personas and seeds differ in length"));
    }
    let mut labels = Vec::with_capacity(personas.len());
    for (i, (p, &s)) in personas.iter().zip(seeds).enumerate() {
        labels.push(label_trace(&simulate_trace(spec, p, i as u32, s)?, bins));
    }
    Ok(bayes_from_labels(&labels, bins.n_classes()))
}

/// Same bound computed from already-labelled series (all of equal length).
pub fn bayes_from_labels(labels: &[Vec<usize>], n_classes: usize) -> BayesReference {
    let t = labels.first().map_or(0, Vec::len);
    let n = labels.len() as f64;
    let mut distributions = Vec::with_capacity(t);
    let (mut top1, mut top3) = (0.0, 0.0);
    for f in 0..t {
        let mut d = vec![0.0; n_classes];
        for l in labels {
            d[l[f]] += 1.0 / n;
        }
        let mut sorted = d.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        top1 += sorted[0];
        top3 += sorted.iter().take(3).sum::<f64>();
        distributions.push(d);
    }
    let frames = t.max(1) as f64;
    BayesReference { distributions, top1: top1 / frames, top3: (top3 / frames).min(1.0) }
}

/// Seeds used for participant `index` of a population generated from `base_seed`:
/// `(persona seed, trace seed)`.
pub fn participant_seeds(base_seed: u64, index: u32) -> (u64, u64) {
    let persona = base_seed.wrapping_add(index as u64);
    let trace = persona.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    (persona, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Participant {
    pub participant_id: u32,
    pub persona_seed: u64,
    pub trace_seed: u64,
    pub persona: Persona,
}

/// A synthetic population: personas plus their simulated traces.
#[derive(Debug, Clone)]
pub struct Population {
    pub participants: Vec<Participant>,
    pub traces: Vec<GazeTrace>,
}

pub fn generate_population(spec: &ScenarioSpec, n: u32, base_seed: u64, ranges: &PersonaRanges) -> Result<Population> {
    let mut participants = Vec::with_capacity(n as usize);
    let mut traces = Vec::with_capacity(n as usize);
    for i in 0..n {
        let (ps, ts) = participant_seeds(base_seed, i);
        let persona = sample_persona(ps, ranges);
        traces.push(simulate_trace(spec, &persona, i, ts)?);
        participants.push(Participant { participant_id: i, persona_seed: ps, trace_seed: ts, persona });
    }
    Ok(Population { participants, traces })
}

pub const TRACE_CSV_HEADER: &str = "participant_id,frame,yaw_deg";

pub fn traces_to_csv(traces: &[GazeTrace]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for tr in traces {
        for (f, y) in tr.yaw_deg.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", tr.participant_id, f, y);
        }
    }
    out
}

/// Parses trace CSV; rows of one participant must list frames 0, 1, 2, … in order.
pub fn traces_from_csv(text: &str, scenario_id: &str) -> Result<Vec<GazeTrace>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == TRACE_CSV_HEADER => {}
        other => return Err(Error::format(format!("bad trace header {other:?}"))),
    }
    let mut traces: Vec<GazeTrace> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let bad = || Error::format(format!("trace row {}: `{line}`", lineno + 2));
        let mut it = line.split(',');
        let pid: u32 = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let frame: usize = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let yaw: f64 = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        if it.next().is_some() || !yaw.is_finite() {
            return Err(bad());
        }
        let idx = match traces.iter().position(|t| t.participant_id == pid) {
            Some(i) => i,
            None => {
                traces.push(GazeTrace { participant_id: pid, scenario_id: scenario_id.to_string(), yaw_deg: Vec::new() });
                traces.len() - 1
            }
        };
        if traces[idx].yaw_deg.len() != frame {
            return Err(Error::format(format!("participant {pid}: expected frame {}, got {frame}", traces[idx].yaw_deg.len())));
        }
        traces[idx].yaw_deg.push(yaw);
    }
    Ok(traces)
}


#[cfg(test)]
mod population_tests {
    use super::*;

    #[test]
    fn default_s1_population_centres_on_straight_ahead() {
        let s = ScenarioSpec::builtin("s1").unwrap();
        let pop = generate_population(&s, 41, 0, &PersonaRanges::default()).unwrap();
        let st = population_stats(&pop.traces).unwrap();
        let near = st.mean.iter().filter(|&&m| (m - 180.0).abs() <= 30.0).count() as f64 / st.mean.len() as f64;
        assert!(near >= 0.7, "only {near} of frames within 180±30");
        let bins = ClassBins::for_scenario(&s).unwrap();
        let labels: Vec<Vec<usize>> = pop.traces.iter().map(|t| label_trace(t, &bins)).collect();
        let b = bayes_from_labels(&labels, 6);
        assert!(b.top1 < b.top3);
    }

    #[test]
    fn s2_population_reference() {
        let s = ScenarioSpec::builtin("s2").unwrap();
        let pop = generate_population(&s, 41, 0, &PersonaRanges::default()).unwrap();
        let bins = ClassBins::for_scenario(&s).unwrap();
        let labels: Vec<Vec<usize>> = pop.traces.iter().map(|t| label_trace(t, &bins)).collect();
        let b = bayes_from_labels(&labels, 7);
        let mut hist = vec![0usize; 7];
        labels.iter().flatten().for_each(|&c| hist[c] += 1);
        // every class is visited by someone, and people disagree
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
        assert!(b.top1 < 0.95 && b.top1 + 0.1 <= b.top3, "{} {}", b.top1, b.top3);
    }
}
