//! Streaming gaze controller.
//!
//! A [`Session`] ingests timestamped stimulus on/off events, keeps the per-frame
//! feature rows, and on every 0.1 s tick classifies the last 30 frames.
//!
//! Line protocol:
//!
//! ```text
//! in:  EVT <t_s> <entity|-> <kind> <yaw_deg> <on|off>
//!      TICK <t_s>
//! out: GAZE <t_s> <class> <yaw_deg> <p0> ... <pK-1> <switched>
//!      ERR <reason>
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{window_to_f64, GazeModel};
use crate::preprocess::{ClassBins, SEQ_LEN};
use crate::scenario::{first_frame_at_or_after, grid_frame, ScenarioSpec, StimulusKind, N_FEATURES};
use crate::trainer::target_rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub t_s: f64,
    pub entity: Option<String>,
    pub kind: StimulusKind,
    pub phase: Phase,
    pub source_yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeCommand {
    pub t_s: f64,
    pub class: usize,
    pub yaw_deg: f64,
    pub probs: Vec<f64>,
    pub switched: bool,
}

impl GazeCommand {
    pub fn to_line(&self) -> String {
        let mut s = format!("GAZE {:.1} {} {:.3}", self.t_s, self.class, self.yaw_deg);
        for p in &self.probs {
            let _ = write!(s, " {p:.6}");
        }
        let _ = write!(s, " {}", u8::from(self.switched));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Policy {
    #[default]
    #[serde(rename = "argmax")]
    Argmax,
    /// Keep the current class while it stays among the three most probable.
    #[serde(rename = "top3-hysteresis")]
    Top3Hysteresis,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Policy> {
        match s {
            "argmax" => Ok(Policy::Argmax),
            "top3-hysteresis" | "top3" => Ok(Policy::Top3Hysteresis),
            other => Err(Error::invalid(format!("unknown policy `{other}`"))),
        }
    }
}

impl Policy {
    /// Class to command given the new probabilities and the previous class.
    pub fn choose(self, probs: &[f64], current: Option<usize>) -> usize {
        let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
        match (self, current) {
            (Policy::Top3Hysteresis, Some(c)) if target_rank(probs, c) <= 3 => c,
            _ => best,
        }
    }
}

/// Tick latency summary in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub ticks: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
}

pub struct Session<'m> {
    spec: ScenarioSpec,
    bins: ClassBins,
    model: Option<&'m dyn GazeModel>,
    policy: Policy,
    /// Materialized frame rows, frame 0 first.
    frames: Vec<[u8; N_FEATURES]>,
    column_on: [u32; N_FEATURES],
    open: HashMap<(Option<String>, StimulusKind), u32>,
    last_t: f64,
    last_tick: Option<i64>,
    commands: Vec<GazeCommand>,
    latencies: Vec<Duration>,
}

impl<'m> Session<'m> {
    /// `spec` supplies the roster and column layout; its event list is ignored.
    pub fn new(spec: &ScenarioSpec, model: Option<&'m dyn GazeModel>, policy: Policy) -> Result<Self> {
        let bins = ClassBins::for_scenario(spec)?;
        if let Some(m) = model {
            if m.n_classes() != bins.n_classes() {
                return Err(Error::invalid(format!("model has {} classes, scenario {}", m.n_classes(), bins.n_classes())));
            }
        }
        Ok(Session {
            spec: ScenarioSpec { events: Vec::new(), ..spec.clone() },
            bins,
            model,
            policy,
            frames: Vec::new(),
            column_on: [0; N_FEATURES],
            open: HashMap::new(),
            last_t: f64::NEG_INFINITY,
            last_tick: None,
            commands: Vec::new(),
            latencies: Vec::new(),
        })
    }

    fn advance_time(&mut self, t_s: f64) -> Result<()> {
        if !t_s.is_finite() || t_s < 0.0 {
            return Err(Error::Stream(format!("bad time {t_s}")));
        }
        if t_s < self.last_t {
            return Err(Error::Stream(format!("time regression: {t_s} after {}", self.last_t)));
        }
        self.last_t = t_s;
        Ok(())
    }

    /// Appends frames carrying the current state until `n` frames exist.
    fn materialize(&mut self, n: usize) {
        let row: [u8; N_FEATURES] = std::array::from_fn(|c| u8::from(self.column_on[c] > 0));
        while self.frames.len() < n {
            self.frames.push(row);
        }
    }

    /// Applies an event from its first frame on. Frames already emitted by a tick
    /// are never rewritten, so an event stamped inside a ticked frame takes effect
    /// at the next one.
    pub fn ingest_event(&mut self, ev: &StreamEvent) -> Result<()> {
        let cols = self.spec.event_columns(ev.entity.as_deref(), ev.kind);
        if cols.is_empty() {
            return Err(Error::Stream(format!(
                "no feature column for {} `{}`",
                ev.entity.as_deref().unwrap_or("-"),
                ev.kind.name()
            )));
        }
        let key = (ev.entity.clone(), ev.kind);
        if ev.phase == Phase::Off && self.open.get(&key).copied().unwrap_or(0) == 0 {
            return Err(Error::Stream("unmatched off".into()));
        }
        self.advance_time(ev.t_s)?;
        self.materialize(first_frame_at_or_after(ev.t_s).max(0) as usize);
        let open = self.open.entry(key).or_insert(0);
        match ev.phase {
            Phase::On => {
                *open += 1;
                cols.iter().for_each(|&c| self.column_on[c] += 1);
            }
            Phase::Off => {
                *open -= 1;
                cols.iter().for_each(|&c| self.column_on[c] -= 1);
            }
        }
        Ok(())
    }

    /// The 30-frame window ending at `frame` (inclusive), zero-padded before frame 0.
    pub fn window(&self, frame: usize) -> Vec<u8> {
        let mut w = vec![0u8; SEQ_LEN * N_FEATURES];
        for i in 0..SEQ_LEN {
            let Some(f) = (frame + i + 1).checked_sub(SEQ_LEN) else { continue };
            if let Some(row) = self.frames.get(f) {
                w[i * N_FEATURES..(i + 1) * N_FEATURES].copy_from_slice(row);
            }
        }
        w
    }

    /// Materializes frames through `t_s` and returns that frame's window.
    pub fn tick_window(&mut self, t_s: f64) -> Result<(usize, Vec<u8>)> {
        let frame = grid_frame(t_s).filter(|&f| f >= 0).ok_or_else(|| Error::Stream(format!("tick {t_s} is off the 0.1 s grid")))?;
        if self.last_tick.is_some_and(|l| frame <= l) {
            return Err(Error::Stream(format!("duplicate or out-of-order tick at {t_s}")));
        }
        self.advance_time(t_s)?;
        self.last_tick = Some(frame);
        let frame = frame as usize;
        self.materialize(frame + 1);
        Ok((frame, self.window(frame)))
    }

    pub fn tick(&mut self, t_s: f64) -> Result<GazeCommand> {
        let model = self.model.ok_or_else(|| Error::Stream("no model loaded".into()))?;
        let started = Instant::now();
        let (frame, window) = self.tick_window(t_s)?;
        let probs = model.predict(&window_to_f64(&window))?.into_vec();
        let current = self.commands.last().map(|c| c.class);
        let class = self.policy.choose(&probs, current);
        let cmd = GazeCommand {
            t_s: frame as f64 / 10.0,
            class,
            yaw_deg: self.bins.midpoint(class),
            probs,
            switched: current.is_some_and(|c| c != class),
        };
        self.latencies.push(started.elapsed());
        self.commands.push(cmd.clone());
        Ok(cmd)
    }

    pub fn commands(&self) -> &[GazeCommand] {
        &self.commands
    }

    pub fn frames(&self) -> &[[u8; N_FEATURES]] {
        &self.frames
    }

    pub fn switch_count(&self) -> usize {
        self.commands.iter().filter(|c| c.switched).count()
    }

    pub fn latency(&self) -> LatencyStats {
        let ms: Vec<f64> = self.latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let n = ms.len();
        LatencyStats {
            ticks: n,
            mean_ms: if n == 0 { 0.0 } else { ms.iter().sum::<f64>() / n as f64 },
            max_ms: ms.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Command log as CSV: `t_s,class,yaw_deg,p0..pK-1,switched`.
    pub fn export_trace(&self) -> Result<String> {
        if self.commands.is_empty() {
            return Err(Error::Stream("session has no commands".into()));
        }
        let mut out = String::from("t_s,class,yaw_deg");
        for k in 0..self.bins.n_classes() {
            let _ = write!(out, ",p{k}");
        }
        out.push_str(",switched\n");
        for c in &self.commands {
            let _ = write!(out, "{:.1},{},{}", c.t_s, c.class, c.yaw_deg);
            for p in &c.probs {
                let _ = write!(out, ",{p}");
            }
            let _ = writeln!(out, ",{}", u8::from(c.switched));
        }
        Ok(out)
    }

    /// Handles one protocol line. Returns the reply, if any; errors become `ERR` lines.
    pub fn handle_line(&mut self, line: &str) -> Option<String> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let result = match parse_line(line) {
            Ok(Input::Event(ev)) => self.ingest_event(&ev).map(|_| None),
            Ok(Input::Tick(t)) => self.tick(t).map(|c| Some(c.to_line())),
            Err(e) => Err(e),
        };
        match result {
            Ok(reply) => reply,
            Err(Error::Stream(reason)) => Some(format!("ERR {reason}")),
            Err(e) => Some(format!("ERR {}", e.to_string().replace('\n', " "))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Event(StreamEvent),
    Tick(f64),
}

fn parse_time(s: &str) -> Result<f64> {
    s.parse::<f64>().ok().filter(|t| t.is_finite()).ok_or_else(|| Error::Stream(format!("bad time `{s}`")))
}

pub fn parse_line(line: &str) -> Result<Input> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["TICK", t] => Ok(Input::Tick(parse_time(t)?)),
        ["EVT", t, entity, kind, yaw, phase] => {
            let kind = kind.parse::<StimulusKind>().map_err(|_| Error::Stream(format!("unknown kind `{kind}`")))?;
            let phase = match *phase {
                "on" => Phase::On,
                "off" => Phase::Off,
                other => return Err(Error::Stream(format!("bad phase `{other}`"))),
            };
            let source_yaw_deg = yaw.parse::<f64>().ok().filter(|y| y.is_finite()).ok_or_else(|| Error::Stream(format!("bad yaw `{yaw}`")))?;
            let entity = (*entity != "-").then(|| entity.to_string());
            Ok(Input::Event(StreamEvent { t_s: parse_time(t)?, entity, kind, phase, source_yaw_deg }))
        }
        ["EVT", ..] => Err(Error::Stream("EVT needs 5 fields: <t_s> <entity|-> <kind> <yaw_deg> <on|off>".into())),
        ["TICK", ..] => Err(Error::Stream("TICK needs 1 field: <t_s>".into())),
        _ => Err(Error::Stream(format!("unrecognized line `{line}`"))),
    }
}

impl StreamEvent {
    pub fn to_line(&self) -> String {
        let phase = match self.phase {
            Phase::On => "on",
            Phase::Off => "off",
        };
        format!("EVT {} {} {} {} {phase}", self.t_s, self.entity.as_deref().unwrap_or("-"), self.kind.name(), self.source_yaw_deg)
    }
}

/// The scenario's timeline as on/off events in time order (offs first on ties).
pub fn scenario_events(spec: &ScenarioSpec) -> Vec<StreamEvent> {
    let mut out = Vec::with_capacity(2 * spec.events.len());
    for e in &spec.events {
        for (t_s, phase) in [(e.start_s, Phase::On), (e.end_s, Phase::Off)] {
            out.push(StreamEvent { t_s, entity: e.entity.clone(), kind: e.kind, phase, source_yaw_deg: e.source_yaw_deg });
        }
    }
    out.sort_by(|a, b| a.t_s.total_cmp(&b.t_s).then((a.phase == Phase::On).cmp(&(b.phase == Phase::On))));
    out
}

/// Protocol lines replaying `spec`: each event right before the first tick whose
/// frame it affects, and one tick per frame of the scenario.
pub fn replay_lines(spec: &ScenarioSpec) -> Vec<String> {
    let events = scenario_events(spec);
    let mut lines = Vec::with_capacity(events.len() + spec.n_frames());
    let mut next = 0;
    for f in 0..spec.n_frames() {
        while next < events.len() && first_frame_at_or_after(events[next].t_s) <= f as i64 {
            lines.push(events[next].to_line());
            next += 1;
        }
        lines.push(format!("TICK {:.1}", f as f64 / 10.0));
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::LstmGazeModel;
    use crate::preprocess::windowize;
    use crate::scenario::rasterize;

    fn ev(t: f64, entity: Option<&str>, kind: StimulusKind, phase: Phase) -> StreamEvent {
        StreamEvent { t_s: t, entity: entity.map(String::from), kind, phase, source_yaw_deg: 0.0 }
    }

    fn door_column(spec: &ScenarioSpec) -> usize {
        spec.event_columns(None, StimulusKind::Door)[0]
    }

    #[test]
    fn on_off_window_matches_raster_convention() {
        let spec = ScenarioSpec::builtin("s1").unwrap();
        let mut s = Session::new(&spec, None, Policy::Argmax).unwrap();
        s.ingest_event(&ev(1.0, None, StimulusKind::Door, Phase::On)).unwrap();
        s.ingest_event(&ev(2.0, None, StimulusKind::Door, Phase::Off)).unwrap();
        s.tick_window(2.9).unwrap();
        let col = door_column(&spec);
        let on: Vec<usize> = (0..30).filter(|&f| s.frames()[f][col] == 1).collect();
        assert_eq!(on, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn unmatched_off_and_time_regression() {
        let spec = ScenarioSpec::builtin("s1").unwrap();
        let mut s = Session::new(&spec, None, Policy::Argmax).unwrap();
        let e = s.ingest_event(&ev(1.0, None, StimulusKind::Door, Phase::Off)).unwrap_err();
        assert!(e.to_string().contains("unmatched off"));
        s.ingest_event(&ev(2.0, None, StimulusKind::Door, Phase::On)).unwrap();
        assert!(s.ingest_event(&ev(1.5, None, StimulusKind::Door, Phase::Off)).is_err());
        assert!(s.tick(2.0).unwrap_err().to_string().contains("no model"));
    }

    #[test]
    fn entities_toggle_independent_columns() {
        let spec = ScenarioSpec::builtin("s1").unwrap();
        let (a, b) = (spec.persons[0].clone(), spec.persons[1].clone());
        let mut s = Session::new(&spec, None, Policy::Argmax).unwrap();
        s.ingest_event(&ev(0.0, Some(&a), StimulusKind::WavingSilent, Phase::On)).unwrap();
        s.ingest_event(&ev(0.5, Some(&b), StimulusKind::WavingSilent, Phase::On)).unwrap();
        s.ingest_event(&ev(1.0, Some(&a), StimulusKind::WavingSilent, Phase::Off)).unwrap();
        s.tick_window(1.4).unwrap();
        let ca = spec.event_columns(Some(&a), StimulusKind::WavingSilent);
        let cb = spec.event_columns(Some(&b), StimulusKind::WavingSilent);
        assert!(ca.iter().all(|&c| s.frames()[12][c] == 0 && s.frames()[3][c] == 1));
        assert!(cb.iter().all(|&c| s.frames()[12][c] == 1 && s.frames()[3][c] == 0));
    }

    #[test]
    fn cold_start_gives_a_valid_command() {
        let spec = ScenarioSpec::builtin("s2").unwrap();
        let model = LstmGazeModel::new(7, 0).unwrap();
        let mut s = Session::new(&spec, Some(&model), Policy::Top3Hysteresis).unwrap();
        let c = s.tick(0.0).unwrap();
        assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(!c.switched);
        assert_eq!(c.yaw_deg, ClassBins::for_scenario(&spec).unwrap().midpoint(c.class));
        assert!(s.tick(0.05).is_err());
        assert!(s.tick(0.0).is_err());
    }

    #[test]
    fn hysteresis_rule() {
        // ranking (4, 2, 0, ...)
        let p = [0.15, 0.05, 0.2, 0.04, 0.5, 0.03, 0.03];
        assert_eq!(Policy::Top3Hysteresis.choose(&p, Some(2)), 2);
        assert_eq!(Policy::Argmax.choose(&p, Some(2)), 4);
        // class 1 is ranked 4th
        assert_eq!(Policy::Top3Hysteresis.choose(&p, Some(1)), 4);
        assert_eq!(Policy::Top3Hysteresis.choose(&p, None), 4);
    }

    #[test]
    fn replay_reproduces_offline_windows() {
        for id in ["s1", "s2"] {
            let spec = ScenarioSpec::builtin(id).unwrap();
            let matrix = rasterize(&spec).unwrap();
            let labels = vec![0; spec.n_frames()];
            let offline = windowize(&matrix, &labels, SEQ_LEN, 1, 0).unwrap().samples;
            let mut s = Session::new(&spec, None, Policy::Argmax).unwrap();
            let mut online = Vec::new();
            for line in replay_lines(&spec) {
                match parse_line(&line).unwrap() {
                    Input::Event(e) => s.ingest_event(&e).unwrap(),
                    Input::Tick(t) => {
                        let (f, w) = s.tick_window(t).unwrap();
                        if f + 1 >= SEQ_LEN {
                            online.push(w);
                        }
                    }
                }
            }
            assert_eq!(online.len(), offline.len());
            for (a, b) in online.iter().zip(&offline) {
                assert_eq!(a, &b.features);
            }
        }
    }

    #[test]
    fn protocol_lines() {
        let spec = ScenarioSpec::builtin("s1").unwrap();
        let model = LstmGazeModel::new(6, 0).unwrap();
        let mut s = Session::new(&spec, Some(&model), Policy::Argmax).unwrap();
        assert_eq!(s.handle_line("EVT 0.0 - door 10 on"), None);
        let reply = s.handle_line("TICK 0.0").unwrap();
        assert!(reply.starts_with("GAZE 0.0 "));
        assert_eq!(reply.split_whitespace().count(), 4 + 6 + 1);
        assert!(s.handle_line("EVT 0.1 - teleport 10 on").unwrap().starts_with("ERR unknown kind"));
        assert!(s.handle_line("EVT 0.1 - door 10").unwrap().starts_with("ERR"));
        assert!(s.handle_line("HELLO").unwrap().starts_with("ERR"));
        assert!(s.handle_line("TICK 0.1").unwrap().starts_with("GAZE 0.1"));
        let csv = s.export_trace().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("t_s,class,yaw_deg,p0,"));
        let line = StreamEvent { t_s: 1.5, entity: Some("p1".into()), kind: StimulusKind::WavingSilent, phase: Phase::Off, source_yaw_deg: -20.0 }.to_line();
        assert_eq!(line, "EVT 1.5 p1 waving-silent -20 off");
        assert!(matches!(parse_line(&line).unwrap(), Input::Event(e) if e.phase == Phase::Off && e.entity.as_deref() == Some("p1")));
    }
}
