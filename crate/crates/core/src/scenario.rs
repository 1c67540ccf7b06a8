//! Scenario catalogs, event timelines and their rasterization into the 10 Hz
//! scene-properties matrix.
//!
//! A scenario has 24 stimulus columns: one block of human features per person
//! (in roster order) followed by the non-human flags. Human stimulus kinds are
//! decomposed into attributes (`waving-speaking` sets both `waving` and
//! `speaking`), so one event can light several columns of its entity's block.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_HZ: u32 = 10;
pub const FRAME_PERIOD_S: f64 = 0.1;
pub const N_FEATURES: usize = 24;
pub const MATRIX_COLUMNS: usize = N_FEATURES + 1;

/// Frame tolerance for times written as decimals (e.g. `0.3 * 10 != 3.0` in binary).
const FRAME_EPS: f64 = 1e-6;

/// First frame index `f` with `f * 0.1 >= t_s`.
pub fn first_frame_at_or_after(t_s: f64) -> i64 {
    (t_s * FRAME_HZ as f64 - FRAME_EPS).ceil() as i64
}

/// Number of frames for a duration.
pub fn frame_count(duration_s: f64) -> usize {
    (duration_s * FRAME_HZ as f64).round().max(0.0) as usize
}

/// Frame index for a time that must lie on the 0.1 s grid.
pub fn grid_frame(t_s: f64) -> Option<i64> {
    let f = (t_s * FRAME_HZ as f64).round();
    ((t_s * FRAME_HZ as f64 - f).abs() <= FRAME_EPS).then_some(f as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Human,
    Nonhuman,
}

macro_rules! kinds {
    ($( $variant:ident => $name:literal, $cat:ident; )*) => {
        /// Closed stimulus catalog.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum StimulusKind {
            $( $variant, )*
        }

        impl StimulusKind {
            pub const ALL: &'static [StimulusKind] = &[$( StimulusKind::$variant, )*];

            pub fn name(self) -> &'static str {
                match self {
                    $( StimulusKind::$variant => $name, )*
                }
            }

            pub fn category(self) -> Category {
                match self {
                    $( StimulusKind::$variant => Category::$cat, )*
                }
            }
        }

        impl FromStr for StimulusKind {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $( $name => Ok(StimulusKind::$variant), )*
                    other => Err(Error::UnknownKind(other.to_string())),
                }
            }
        }
    };
}

kinds! {
    StandingSilent => "standing-silent", Human;
    StandingSpeaking => "standing-speaking", Human;
    MovingRight => "moving-right", Human;
    MovingLeft => "moving-left", Human;
    MovingAhead => "moving-ahead", Human;
    WavingSilent => "waving-silent", Human;
    WavingSpeaking => "waving-speaking", Human;
    ArmsCrossedSilent => "arms-crossed-silent", Human;
    ArmsCrossedSpeaking => "arms-crossed-speaking", Human;
    Conversing => "conversing", Human;
    Entering => "entering", Human;
    Exiting => "exiting", Human;
    Pointing => "pointing", Human;
    Footsteps => "footsteps", Nonhuman;
    TvNews => "tv-news", Nonhuman;
    TvStatic => "tv-static", Nonhuman;
    Door => "door", Nonhuman;
    PhoneRing => "phone-ring", Nonhuman;
    ObjectFall => "object-fall", Nonhuman;
    Doorbell => "doorbell", Nonhuman;
    Alarm => "alarm", Nonhuman;
    Knock => "knock", Nonhuman;
    PhoneAlert => "phone-alert", Nonhuman;
    ScreenOn => "screen-on", Nonhuman;
}

impl StimulusKind {
    pub fn is_human(self) -> bool {
        self.category() == Category::Human
    }

    /// Kinds that involve talking.
    pub fn is_speaking(self) -> bool {
        matches!(
            self,
            StimulusKind::StandingSpeaking
                | StimulusKind::WavingSpeaking
                | StimulusKind::ArmsCrossedSpeaking
                | StimulusKind::Conversing
        )
    }

    /// The silent counterpart of a speaking variant.
    pub fn silent_variant(self) -> Option<StimulusKind> {
        match self {
            StimulusKind::StandingSpeaking => Some(StimulusKind::StandingSilent),
            StimulusKind::WavingSpeaking => Some(StimulusKind::WavingSilent),
            StimulusKind::ArmsCrossedSpeaking => Some(StimulusKind::ArmsCrossedSilent),
            _ => None,
        }
    }

    /// Human attributes this kind switches on, in column-name form.
    pub fn human_attributes(self) -> &'static [&'static str] {
        use StimulusKind::*;
        match self {
            StandingSilent => &["present"],
            StandingSpeaking => &["present", "speaking"],
            MovingRight | MovingLeft | MovingAhead => &["present", "moving"],
            WavingSilent => &["present", "waving", "gesturing"],
            WavingSpeaking => &["present", "waving", "gesturing", "speaking"],
            ArmsCrossedSilent => &["present", "arms-crossed", "gesturing"],
            ArmsCrossedSpeaking => &["present", "arms-crossed", "gesturing", "speaking"],
            Conversing => &["present", "speaking", "conversing"],
            Entering => &["present", "moving", "entering"],
            Exiting => &["present", "moving", "exiting"],
            Pointing => &["present", "pointing", "gesturing"],
            _ => &[],
        }
    }
}

impl fmt::Display for StimulusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KindRepr {
    category: Category,
    name: String,
}

impl Serialize for StimulusKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KindRepr { category: self.category(), name: self.name().to_string() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for StimulusKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = KindRepr::deserialize(d)?;
        let kind: StimulusKind = repr.name.parse().map_err(serde::de::Error::custom)?;
        if kind.category() != repr.category {
            return Err(serde::de::Error::custom(format!("`{}` is not a {:?} stimulus", repr.name, repr.category)));
        }
        Ok(kind)
    }
}

/// Every attribute name a human feature column may carry.
pub const HUMAN_ATTRIBUTES: &[&str] = &[
    "present",
    "speaking",
    "moving",
    "waving",
    "arms-crossed",
    "pointing",
    "gesturing",
    "conversing",
    "entering",
    "exiting",
];

/// Non-human columns that merge several catalog kinds.
pub const NONHUMAN_GROUPS: &[(&str, &[StimulusKind])] = &[
    ("tv", &[StimulusKind::TvNews, StimulusKind::TvStatic]),
    ("chime", &[StimulusKind::Doorbell, StimulusKind::Alarm]),
];

fn nonhuman_column_covers(column: &str, kind: StimulusKind) -> bool {
    if column == kind.name() {
        return true;
    }
    NONHUMAN_GROUPS.iter().any(|(g, members)| *g == column && members.contains(&kind))
}

fn is_valid_nonhuman_column(column: &str) -> bool {
    NONHUMAN_GROUPS.iter().any(|(g, _)| *g == column)
        || StimulusKind::ALL.iter().any(|k| !k.is_human() && k.name() == column)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleConvention {
    pub straight_ahead_deg: f64,
    pub min_deg: f64,
    pub max_deg: f64,
    pub positive_direction: Direction,
}

impl AngleConvention {
    pub fn clamp(&self, yaw: f64) -> f64 {
        yaw.clamp(self.min_deg, self.max_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedEvent {
    pub entity: Option<String>,
    pub kind: StimulusKind,
    pub start_s: f64,
    pub end_s: f64,
    pub source_yaw_deg: f64,
}

impl TimedEvent {
    /// Half-open frame range `[first, end)` this event is active in.
    pub fn frame_range(&self) -> (i64, i64) {
        (first_frame_at_or_after(self.start_s), first_frame_at_or_after(self.end_s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    pub duration_s: f64,
    pub frame_hz: u32,
    pub n_classes: usize,
    pub persons: Vec<String>,
    pub human_feature_names: Vec<String>,
    pub nonhuman_feature_names: Vec<String>,
    pub events: Vec<TimedEvent>,
    pub convention: AngleConvention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub event: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, event: Option<usize>, message: String) {
        self.violations.push(Violation { event, message });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.message.clone()).collect();
            Err(Error::InvalidScenario(msgs.join("; ")))
        }
    }
}

const S1_JSON: &str = include_str!("../scenarios/s1.scenario.json");
const S2_JSON: &str = include_str!("../scenarios/s2.scenario.json");

impl ScenarioSpec {
    /// The bundled scenarios, `s1` (animated, 3 persons) and `s2` (filmed, 4 persons).
    pub fn builtin(name: &str) -> Result<ScenarioSpec> {
        let text = match name {
            "s1" => S1_JSON,
            "s2" => S2_JSON,
            other => return Err(Error::invalid(format!("no built-in scenario `{other}`"))),
        };
        Ok(serde_json::from_str(text)?)
    }

    pub fn builtin_json(name: &str) -> Option<&'static str> {
        match name {
            "s1" => Some(S1_JSON),
            "s2" => Some(S2_JSON),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<ScenarioSpec> {
        Ok(serde_json::from_str(text)?)
    }

    /// A built-in name (`s1`, `s2`) or a path to a scenario JSON file.
    pub fn load(name_or_path: &str) -> Result<ScenarioSpec> {
        if Self::builtin_json(name_or_path).is_some() {
            return Self::builtin(name_or_path);
        }
        let text = std::fs::read_to_string(Path::new(name_or_path))?;
        Self::from_json(&text)
    }

    pub fn n_frames(&self) -> usize {
        frame_count(self.duration_s)
    }

    fn feature_count(&self) -> usize {
        self.persons.len() * self.human_feature_names.len() + self.nonhuman_feature_names.len()
    }

    /// Feature column indices (0-based over the 24 stimulus columns) an event sets.
    pub fn event_columns(&self, entity: Option<&str>, kind: StimulusKind) -> Vec<usize> {
        let per_person = self.human_feature_names.len();
        if kind.is_human() {
            let Some(person) = entity.and_then(|e| self.persons.iter().position(|p| p == e)) else {
                return Vec::new();
            };
            let attrs = kind.human_attributes();
            self.human_feature_names
                .iter()
                .enumerate()
                .filter(|(_, name)| attrs.contains(&name.as_str()))
                .map(|(j, _)| person * per_person + j)
                .collect()
        } else {
            let base = self.persons.len() * per_person;
            self.nonhuman_feature_names
                .iter()
                .enumerate()
                .filter(|(_, name)| nonhuman_column_covers(name, kind))
                .map(|(j, _)| base + j)
                .collect()
        }
    }

    pub fn validate(&self) -> ValidationReport {
        validate_scenario(self)
    }
}

/// Checks every scenario invariant; violations are reported, not raised.
pub fn validate_scenario(spec: &ScenarioSpec) -> ValidationReport {
    let mut report = ValidationReport::default();
    if spec.id.trim().is_empty() {
        report.push(None, "scenario id is empty".into());
    }
    if spec.frame_hz != FRAME_HZ {
        report.push(None, format!("frame_hz {} ≠ {FRAME_HZ}", spec.frame_hz));
    }
    if !(spec.duration_s.is_finite() && spec.duration_s > 0.0) {
        report.push(None, format!("duration {} is not positive", spec.duration_s));
    }
    let count = spec.feature_count();
    if count != N_FEATURES {
        report.push(None, format!("feature count {count} ≠ {N_FEATURES}"));
    }
    if spec.n_classes < 2 || spec.n_classes > u8::MAX as usize {
        report.push(None, format!("n_classes {} outside [2, 255]", spec.n_classes));
    }
    if matches!(spec.id.as_str(), "s1" | "s2") && !matches!(spec.n_classes, 6 | 7) {
        report.push(None, format!("built-in scenario {} must have 6 or 7 classes", spec.id));
    }
    let c = &spec.convention;
    if !(c.min_deg < c.straight_ahead_deg && c.straight_ahead_deg < c.max_deg) {
        report.push(
            None,
            format!("angle convention needs min < straight < max, got {} / {} / {}", c.min_deg, c.straight_ahead_deg, c.max_deg),
        );
    }
    if spec.persons.is_empty() && !spec.human_feature_names.is_empty() {
        report.push(None, "human features declared without persons".into());
    }
    let mut seen = BTreeSet::new();
    for p in &spec.persons {
        if p.is_empty() || p == "nh" || p == "-" || p.contains(char::is_whitespace) {
            report.push(None, format!("invalid person id `{p}`"));
        }
        if !seen.insert(p.as_str()) {
            report.push(None, format!("duplicate person `{p}`"));
        }
    }
    let mut seen = BTreeSet::new();
    for name in &spec.human_feature_names {
        if !HUMAN_ATTRIBUTES.contains(&name.as_str()) {
            report.push(None, format!("unknown human feature `{name}`"));
        }
        if !seen.insert(name.as_str()) {
            report.push(None, format!("duplicate human feature `{name}`"));
        }
    }
    let mut seen = BTreeSet::new();
    for name in &spec.nonhuman_feature_names {
        if !is_valid_nonhuman_column(name) {
            report.push(None, format!("unknown non-human feature `{name}`"));
        }
        if !seen.insert(name.as_str()) {
            report.push(None, format!("duplicate non-human feature `{name}`"));
        }
    }
    for kind in StimulusKind::ALL.iter().filter(|k| !k.is_human()) {
        let n = spec.nonhuman_feature_names.iter().filter(|c| nonhuman_column_covers(c, *kind)).count();
        if n > 1 {
            report.push(None, format!("non-human kind `{kind}` maps to {n} columns"));
        }
    }

    for (i, ev) in spec.events.iter().enumerate() {
        let mut push = |msg: String| report.push(Some(i), format!("event {i}: {msg}"));
        if !(ev.start_s.is_finite() && ev.end_s.is_finite() && ev.source_yaw_deg.is_finite()) {
            push("non-finite field".into());
            continue;
        }
        if ev.end_s < ev.start_s {
            push("negative duration".into());
        } else {
            let (a, b) = ev.frame_range();
            if ev.end_s - ev.start_s < FRAME_PERIOD_S - FRAME_EPS || b <= a {
                push("shorter than one frame".into());
            }
        }
        if ev.start_s < 0.0 {
            push(format!("starts before 0 ({})", ev.start_s));
        }
        if ev.end_s > spec.duration_s + FRAME_EPS {
            push(format!("ends at {} after scenario end {}", ev.end_s, spec.duration_s));
        }
        if ev.source_yaw_deg < c.min_deg || ev.source_yaw_deg > c.max_deg {
            push(format!("source yaw {} outside [{}, {}]", ev.source_yaw_deg, c.min_deg, c.max_deg));
        }
        if ev.kind.is_human() {
            match &ev.entity {
                None => push(format!("human stimulus `{}` needs an entity", ev.kind)),
                Some(e) if !spec.persons.contains(e) => push(format!("unknown entity `{e}`")),
                _ => {}
            }
        }
        let mapped = ev.entity.is_none() && ev.kind.is_human()
            || !spec.event_columns(ev.entity.as_deref(), ev.kind).is_empty();
        if !mapped {
            push(format!("kind `{}` has no feature column", ev.kind));
        }
    }
    report
}

/// Ordered labels of the 24 stimulus columns (`p1.present`, …, `nh.footsteps`, …).
pub fn feature_layout(spec: &ScenarioSpec) -> Result<Vec<String>> {
    validate_scenario(spec).into_result()?;
    let mut labels = Vec::with_capacity(N_FEATURES);
    for p in &spec.persons {
        for f in &spec.human_feature_names {
            labels.push(format!("{p}.{f}"));
        }
    }
    for f in &spec.nonhuman_feature_names {
        labels.push(format!("nh.{f}"));
    }
    Ok(labels)
}

/// `T x 25` scene-properties matrix: a time index column plus 24 binary stimulus flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    features: Vec<u8>,
    n_frames: usize,
}

impl FeatureMatrix {
    pub fn zeros(n_frames: usize) -> Self {
        FeatureMatrix { features: vec![0; n_frames * N_FEATURES], n_frames }
    }

    pub fn from_rows(rows: &[[u8; N_FEATURES]]) -> Self {
        FeatureMatrix { features: rows.iter().flatten().copied().collect(), n_frames: rows.len() }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// The 24 stimulus flags of frame `t` (matrix columns 1..=24).
    pub fn row(&self, t: usize) -> &[u8] {
        &self.features[t * N_FEATURES..(t + 1) * N_FEATURES]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [u8] {
        &mut self.features[t * N_FEATURES..(t + 1) * N_FEATURES]
    }

    /// Full-matrix cell access; column 0 is the time index.
    pub fn get(&self, t: usize, col: usize) -> u32 {
        if col == 0 {
            t as u32
        } else {
            self.row(t)[col - 1] as u32
        }
    }

    /// Flattened `frames x 24` flags for frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> &[u8] {
        &self.features[start * N_FEATURES..(start + len) * N_FEATURES]
    }

    pub fn column_sum(&self, feature: usize) -> usize {
        (0..self.n_frames).map(|t| self.row(t)[feature] as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.features
    }

    /// CSV with the time column followed by one column per layout label.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("t");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for t in 0..self.n_frames {
            out.push_str(&t.to_string());
            for v in self.row(t) {
                out.push(',');
                out.push(if *v == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Rasterizes the event timeline at 10 Hz. Frame `t` has a flag set iff some mapped
/// event satisfies `start_s <= t * 0.1 < end_s`.
pub fn rasterize(spec: &ScenarioSpec) -> Result<FeatureMatrix> {
    validate_scenario(spec).into_result()?;
    let n = spec.n_frames();
    let mut m = FeatureMatrix::zeros(n);
    for ev in &spec.events {
        let cols = spec.event_columns(ev.entity.as_deref(), ev.kind);
        let (a, b) = ev.frame_range();
        for t in a.max(0) as usize..(b.max(0) as usize).min(n) {
            let row = m.row_mut(t);
            for &c in &cols {
                row[c] = 1;
            }
        }
    }
    Ok(m)
}
