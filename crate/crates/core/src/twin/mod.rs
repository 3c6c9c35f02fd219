//! Reduced-order process twin: an energy-density defect model, the feedback
//! controller and the closed-loop simulator.
//!
//! Defect probability is driven by the volumetric energy density
//! `E = P / (v·h·t)` relative to an optimal band of 35–45 J/mm³, plus a
//! penalty for powder feed deviation. Overheating produces spatter and holes,
//! underheating cracks and pinholes.

mod pipeline;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::datagen::{DataError, DefectClass, CLASS_COUNT};
use crate::metrics::{correction_rate, defect_reduction_rate, MetricsError};
use crate::quant::QuantError;
use crate::rng::{child_rng, derive_seed};
use crate::telemetry::TelemetryError;

pub use pipeline::Pipeline;

pub const POWER_BOUNDS_W: (f64, f64) = (150.0, 350.0);
pub const SPEED_BOUNDS_MM_S: (f64, f64) = (500.0, 1500.0);
pub const FEED_BOUNDS: (f64, f64) = (0.8, 1.2);
pub const LAYER_THICKNESS_MM: f64 = 0.05;
pub const HATCH_SPACING_MM: f64 = 0.1;
/// Optimal energy density band, J/mm³.
pub const ENERGY_BAND: (f64, f64) = (35.0, 45.0);
pub const BASE_DEFECT_RATE: f64 = 0.02;
pub const ENERGY_GAIN: f64 = 1.5;
pub const FEED_GAIN: f64 = 0.3;
pub const MAX_DEFECT_RATE: f64 = 0.95;

const COOL_DOWN: (f64, f64) = (-10.0, 50.0);
const FEED_STEP: f64 = 0.02;
const FEED_POWER_STEP: f64 = 10.0;

const STREAM_LAYER: u64 = 0x7717_0001;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{field} = {value} outside [{lo}, {hi}]")]
    OutOfBounds {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pipeline stalled: {0}")]
    Stalled(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, TwinError>;

fn check(field: &'static str, value: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(TwinError::OutOfBounds { field, value, lo, hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProcessState {
    pub laser_power_w: f64,
    pub scan_speed_mm_s: f64,
    pub layer_thickness_mm: f64,
    pub hatch_spacing_mm: f64,
    pub feed_rate_rel: f64,
}

impl ProcessState {
    pub fn new(laser_power_w: f64, scan_speed_mm_s: f64, feed_rate_rel: f64) -> Result<Self> {
        check("laser_power_w", laser_power_w, POWER_BOUNDS_W)?;
        check("scan_speed_mm_s", scan_speed_mm_s, SPEED_BOUNDS_MM_S)?;
        check("feed_rate_rel", feed_rate_rel, FEED_BOUNDS)?;
        Ok(Self {
            laser_power_w,
            scan_speed_mm_s,
            layer_thickness_mm: LAYER_THICKNESS_MM,
            hatch_spacing_mm: HATCH_SPACING_MM,
            feed_rate_rel,
        })
    }

    pub fn energy_density(&self) -> f64 {
        energy_density(self)
    }

    /// Applies `action` and clamps every field to its bounds.
    pub fn apply(&self, action: &ControlAction) -> Self {
        Self {
            laser_power_w: (self.laser_power_w + action.delta_power_w).clamp(POWER_BOUNDS_W.0, POWER_BOUNDS_W.1),
            scan_speed_mm_s: (self.scan_speed_mm_s + action.delta_speed_mm_s)
                .clamp(SPEED_BOUNDS_MM_S.0, SPEED_BOUNDS_MM_S.1),
            feed_rate_rel: (self.feed_rate_rel + action.delta_feed_rel).clamp(FEED_BOUNDS.0, FEED_BOUNDS.1),
            ..*self
        }
    }

    pub fn within_bounds(&self) -> bool {
        (POWER_BOUNDS_W.0..=POWER_BOUNDS_W.1).contains(&self.laser_power_w)
            && (SPEED_BOUNDS_MM_S.0..=SPEED_BOUNDS_MM_S.1).contains(&self.scan_speed_mm_s)
            && (FEED_BOUNDS.0..=FEED_BOUNDS.1).contains(&self.feed_rate_rel)
    }
}

/// Volumetric energy density in J/mm³.
pub fn energy_density(state: &ProcessState) -> f64 {
    state.laser_power_w / (state.scan_speed_mm_s * state.hatch_spacing_mm * state.layer_thickness_mm)
}

/// Per-site outcome distribution: one probability per defect class (class
/// index order) plus the no-defect probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DefectProbabilities {
    pub class: [f64; CLASS_COUNT],
    pub none: f64,
}

impl DefectProbabilities {
    pub fn total_defect(&self) -> f64 {
        self.class.iter().sum()
    }
}

/// Relative distance of `e` from the optimal band; 0 inside it.
pub fn band_deviation(e: f64) -> f64 {
    let (lo, hi) = ENERGY_BAND;
    0f64.max((lo - e) / lo).max((e - hi) / hi)
}

pub fn defect_probability(state: &ProcessState) -> DefectProbabilities {
    let e = energy_density(state);
    let d = band_deviation(e);
    let total = (BASE_DEFECT_RATE + ENERGY_GAIN * d + FEED_GAIN * (state.feed_rate_rel - 1.0).abs()).min(MAX_DEFECT_RATE);
    let mut class = [0.0; CLASS_COUNT];
    let (lo, hi) = ENERGY_BAND;
    if e > hi {
        class[DefectClass::Spatter.index()] = 0.6 * total;
        class[DefectClass::Hole.index()] = total - 0.6 * total;
    } else if e < lo {
        class[DefectClass::Crack.index()] = 0.6 * total;
        class[DefectClass::Pinhole.index()] = total - 0.6 * total;
    } else {
        class = [total / 4.0; CLASS_COUNT];
    }
    DefectProbabilities { class, none: 1.0 - total }
}

/// Per-class defect counts for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DefectCounts {
    pub counts: [u32; CLASS_COUNT],
    pub sites: u32,
}

impl DefectCounts {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    fn of(&self, c: DefectClass) -> u32 {
        self.counts[c.index()]
    }

    pub fn from_sites(sites: &[Option<DefectClass>]) -> Self {
        let mut counts = [0; CLASS_COUNT];
        for c in sites.iter().flatten() {
            counts[c.index()] += 1;
        }
        Self {
            counts,
            sites: sites.len() as u32,
        }
    }
}

/// Draws the outcome of each of `sites` independent sites.
pub fn sample_sites(state: &ProcessState, sites: u32, seed: u64) -> Result<Vec<Option<DefectClass>>> {
    sample_categorical(&defect_probability(state), sites, seed)
}

/// Independent categorical draws from `p`, one per site.
pub fn sample_categorical(p: &DefectProbabilities, sites: u32, seed: u64) -> Result<Vec<Option<DefectClass>>> {
    if sites == 0 {
        return Err(TwinError::InvalidArgument("sites must be at least 1".into()));
    }
    let mut rng = child_rng(seed, STREAM_LAYER, 0);
    Ok((0..sites)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for c in DefectClass::ALL {
                acc += p.class[c.index()];
                if u < acc {
                    return Some(c);
                }
            }
            None
        })
        .collect())
}

pub fn sample_layer_outcome(state: &ProcessState, sites: u32, seed: u64) -> Result<DefectCounts> {
    Ok(DefectCounts::from_sites(&sample_sites(state, sites, seed)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    None = 0,
    CoolDown = 1,
    FeedCorrect = 2,
}

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::None => "none",
            ActionKind::CoolDown => "cool_down",
            ActionKind::FeedCorrect => "feed_correct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlAction {
    pub kind: ActionKind,
    pub delta_power_w: f64,
    pub delta_speed_mm_s: f64,
    pub delta_feed_rel: f64,
}

/// Wire size of an encoded control action.
pub const CONTROL_RECORD_LEN: usize = 13;

impl ControlAction {
    pub const NONE: ControlAction = ControlAction {
        kind: ActionKind::None,
        delta_power_w: 0.0,
        delta_speed_mm_s: 0.0,
        delta_feed_rel: 0.0,
    };

    /// `kind` byte then the three deltas as little-endian f32.
    pub fn encode(&self) -> [u8; CONTROL_RECORD_LEN] {
        let mut out = [0u8; CONTROL_RECORD_LEN];
        out[0] = self.kind as u8;
        for (i, d) in [self.delta_power_w, self.delta_speed_mm_s, self.delta_feed_rel].into_iter().enumerate() {
            out[1 + 4 * i..5 + 4 * i].copy_from_slice(&(d as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != CONTROL_RECORD_LEN {
            return Err(TwinError::InvalidArgument(format!(
                "control record is {} bytes, expected {CONTROL_RECORD_LEN}",
                bytes.len()
            )));
        }
        let kind = match bytes[0] {
            0 => ActionKind::None,
            1 => ActionKind::CoolDown,
            2 => ActionKind::FeedCorrect,
            k => return Err(TwinError::InvalidArgument(format!("unknown action kind {k}"))),
        };
        let f = |i: usize| f32::from_le_bytes(bytes[1 + 4 * i..5 + 4 * i].try_into().expect("4 bytes")) as f64;
        Ok(Self {
            kind,
            delta_power_w: f(0),
            delta_speed_mm_s: f(1),
            delta_feed_rel: f(2),
        })
    }
}

/// Per-site defect-rate thresholds that trigger each corrective action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub hot: f64,
    pub cold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { hot: 0.05, cold: 0.05 }
    }
}

/// Overheating (spatter and holes) takes priority over deposition errors
/// (cracks and pinholes).
pub fn decide_action(counts: &DefectCounts, thresholds: &Thresholds) -> ControlAction {
    if counts.sites == 0 {
        return ControlAction::NONE;
    }
    let sites = counts.sites as f64;
    let hot = (counts.of(DefectClass::Spatter) + counts.of(DefectClass::Hole)) as f64 / sites;
    let cold = (counts.of(DefectClass::Crack) + counts.of(DefectClass::Pinhole)) as f64 / sites;
    if hot >= thresholds.hot {
        ControlAction {
            kind: ActionKind::CoolDown,
            delta_power_w: COOL_DOWN.0,
            delta_speed_mm_s: COOL_DOWN.1,
            delta_feed_rel: 0.0,
        }
    } else if cold >= thresholds.cold {
        ControlAction {
            kind: ActionKind::FeedCorrect,
            delta_power_w: FEED_POWER_STEP,
            delta_speed_mm_s: 0.0,
            delta_feed_rel: FEED_STEP,
        }
    } else {
        ControlAction::NONE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    ModelOnly,
    FullPipeline,
}

impl fmt::Display for LoopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoopMode::ModelOnly => "model_only",
            LoopMode::FullPipeline => "full_pipeline",
        })
    }
}

impl FromStr for LoopMode {
    type Err = TwinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_only" => Ok(LoopMode::ModelOnly),
            "full_pipeline" => Ok(LoopMode::FullPipeline),
            other => Err(TwinError::InvalidArgument(format!(
                "unknown loop mode {other:?} (expected model_only or full_pipeline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopConfig {
    pub layers: u32,
    pub sites: u32,
    pub seed: u64,
    pub controller: bool,
    pub mode: LoopMode,
    pub thresholds: Thresholds,
    pub start: ProcessState,
    pub node_id: u16,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            layers: 200,
            sites: 1000,
            seed: 42,
            controller: true,
            mode: LoopMode::ModelOnly,
            thresholds: Thresholds::default(),
            start: ProcessState::new(350.0, 500.0, 1.0).expect("in bounds"),
            node_id: 1,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(TwinError::InvalidArgument(format!("layers must be at least 2, got {}", self.layers)));
        }
        if self.sites == 0 {
            return Err(TwinError::InvalidArgument("sites must be at least 1".into()));
        }
        for (name, t) in [("hot", self.thresholds.hot), ("cold", self.thresholds.cold)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(TwinError::InvalidArgument(format!("{name} threshold {t} outside (0, 1]")));
            }
        }
        ProcessState::new(self.start.laser_power_w, self.start.scan_speed_mm_s, self.start.feed_rate_rel)?;
        Ok(())
    }

    /// Seed of layer `layer`'s site draws.
    pub fn layer_seed(&self, layer: u32) -> u64 {
        derive_seed(self.seed, STREAM_LAYER, layer as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub layer: u32,
    /// State in effect while the layer was built.
    pub state: ProcessState,
    pub energy_density: f64,
    pub counts: [u32; CLASS_COUNT],
    pub defects: u32,
    /// Counts as seen by the classifier; present in full-pipeline mode.
    pub classified: Option<[u32; CLASS_COUNT]>,
    pub action: ControlAction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopReport {
    pub config: LoopConfig,
    pub layers: Vec<LayerRecord>,
    /// Mean defects per layer over the first window.
    pub baseline_defect_rate: f64,
    /// Mean defects per layer over the last window.
    pub final_defect_rate: f64,
    pub window: u32,
    /// Undefined (None) when the baseline window has no defects.
    pub defect_reduction_pct: Option<f64>,
    pub correction_rate_pct: f64,
    pub actions: u32,
    pub successful_actions: u32,
}

impl LoopReport {
    fn summarise(config: LoopConfig, layers: Vec<LayerRecord>) -> Result<Self> {
        let n = layers.len();
        let window = (n / 2).clamp(1, 10);
        let mean = |recs: &[LayerRecord]| recs.iter().map(|r| r.defects as f64).sum::<f64>() / recs.len() as f64;
        let baseline = mean(&layers[..window]);
        let last = mean(&layers[n - window..]);
        let reduction = if baseline > 0.0 {
            Some(defect_reduction_rate(baseline, last)?)
        } else {
            None
        };
        let mut actions = 0u32;
        let mut successes = 0u32;
        for pair in layers.windows(2) {
            if pair[0].action.kind != ActionKind::None {
                actions += 1;
                if pair[1].defects < pair[0].defects {
                    successes += 1;
                }
            }
        }
        Ok(Self {
            correction_rate_pct: correction_rate(successes as u64, actions as u64)?,
            config,
            layers,
            baseline_defect_rate: baseline,
            final_defect_rate: last,
            window: window as u32,
            defect_reduction_pct: reduction,
            actions,
            successful_actions: successes,
        })
    }

    /// One JSON object per layer, then a summary object.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            config: &'a LoopConfig,
            baseline_defect_rate: f64,
            final_defect_rate: f64,
            window: u32,
            defect_reduction_pct: Option<f64>,
            correction_rate_pct: f64,
            actions: u32,
            successful_actions: u32,
        }
        #[derive(Serialize)]
        struct Layer<'a> {
            record: &'static str,
            #[serde(flatten)]
            layer: &'a LayerRecord,
        }
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&serde_json::to_string(&Layer { record: "layer", layer: l }).expect("serializable"));
            out.push('\n');
        }
        let s = Summary {
            record: "summary",
            config: &self.config,
            baseline_defect_rate: self.baseline_defect_rate,
            final_defect_rate: self.final_defect_rate,
            window: self.window,
            defect_reduction_pct: self.defect_reduction_pct,
            correction_rate_pct: self.correction_rate_pct,
            actions: self.actions,
            successful_actions: self.successful_actions,
        };
        out.push_str(&serde_json::to_string(&s).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn states_within_bounds(&self) -> bool {
        self.layers.iter().all(|l| l.state.within_bounds())
    }
}

/// Runs the loop. `pipeline` is required in full-pipeline mode and ignored
/// otherwise.
pub fn run_closed_loop(config: &LoopConfig, pipeline: Option<&Pipeline<'_>>) -> Result<LoopReport> {
    config.validate()?;
    let layers = match config.mode {
        LoopMode::ModelOnly => run_model_only(config)?,
        LoopMode::FullPipeline => {
            let p = pipeline.ok_or_else(|| {
                TwinError::Config("full_pipeline mode needs a classifier network and a telemetry broker".into())
            })?;
            p.run(config)?
        }
    };
    LoopReport::summarise(config.clone(), layers)
}

fn run_model_only(config: &LoopConfig) -> Result<Vec<LayerRecord>> {
    let mut state = config.start;
    let mut out = Vec::with_capacity(config.layers as usize);
    for layer in 0..config.layers {
        let counts = sample_layer_outcome(&state, config.sites, config.layer_seed(layer))?;
        let action = if config.controller {
            decide_action(&counts, &config.thresholds)
        } else {
            ControlAction::NONE
        };
        out.push(LayerRecord {
            layer,
            state,
            energy_density: state.energy_density(),
            counts: counts.counts,
            defects: counts.total(),
            classified: None,
            action,
        });
        state = state.apply(&action);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(p: f64, v: f64, f: f64) -> ProcessState {
        ProcessState::new(p, v, f).unwrap()
    }

    #[test]
    fn energy_density_values() {
        assert!((st(200.0, 1000.0, 1.0).energy_density() - 40.0).abs() < 1e-12);
        assert!((st(150.0, 1500.0, 1.0).energy_density() - 20.0).abs() < 1e-12);
        assert!((st(350.0, 500.0, 1.0).energy_density() - 140.0).abs() < 1e-12);
        let e1 = st(160.0, 800.0, 1.0).energy_density();
        let e2 = st(320.0, 800.0, 1.0).energy_density();
        assert!((e2 - 2.0 * e1).abs() < 1e-12);
    }

    #[test]
    fn bounds_are_enforced() {
        match ProcessState::new(400.0, 800.0, 1.0) {
            Err(e @ TwinError::OutOfBounds { .. }) => assert!(e.to_string().contains("[150, 350]")),
            other => panic!("{other:?}"),
        }
        assert!(ProcessState::new(200.0, 499.0, 1.0).is_err());
        assert!(ProcessState::new(200.0, 800.0, 1.3).is_err());
        assert!(ProcessState::new(f64::NAN, 800.0, 1.0).is_err());
    }

    #[test]
    fn probability_examples() {
        let p = defect_probability(&st(200.0, 1000.0, 1.0));
        assert!((p.total_defect() - 0.02).abs() < 1e-15);
        assert!((p.class[0] - 0.005).abs() < 1e-15);
        // E = 90 = 2·E_hi: d = 1, total capped
        let p = defect_probability(&st(270.0, 600.0, 1.0));
        assert!((p.total_defect() - 0.95).abs() < 1e-12);
        assert!((p.class[DefectClass::Spatter.index()] - 0.57).abs() < 1e-12);
        assert!((p.class[DefectClass::Hole.index()] - 0.38).abs() < 1e-12);
        // under band: E = 20, d = 15/35
        let p = defect_probability(&st(150.0, 1500.0, 1.0));
        let total = 0.02 + 1.5 * 15.0 / 35.0;
        assert!((p.total_defect() - total).abs() < 1e-12);
        assert!((p.class[DefectClass::Crack.index()] - 0.6 * total).abs() < 1e-12);
    }

    #[test]
    fn sampling_matches_binomial_bounds() {
        let s = st(200.0, 1000.0, 1.0);
        let c = sample_layer_outcome(&s, 10_000, 5).unwrap();
        assert!((140..=260).contains(&c.total()), "{}", c.total());
        assert_eq!(c, sample_layer_outcome(&s, 10_000, 5).unwrap());
        assert!(sample_layer_outcome(&s, 0, 5).is_err());
    }

    #[test]
    fn zero_probability_gives_zero_counts() {
        let p = DefectProbabilities { class: [0.0; 4], none: 1.0 };
        let sites = sample_categorical(&p, 5000, 1).unwrap();
        assert_eq!(DefectCounts::from_sites(&sites).total(), 0);
        // overheating never produces cold classes
        let c = sample_layer_outcome(&st(300.0, 600.0, 1.0), 5000, 1).unwrap();
        assert_eq!(c.counts[DefectClass::Crack.index()] + c.counts[DefectClass::Pinhole.index()], 0);
    }

    #[test]
    fn action_rules() {
        let s = st(155.0, 800.0, 1.0);
        let none = decide_action(&DefectCounts { counts: [0; 4], sites: 100 }, &Thresholds::default());
        assert_eq!(none.kind, ActionKind::None);
        assert_eq!(s.apply(&none), s);

        let hot = decide_action(&DefectCounts { counts: [0, 0, 0, 10], sites: 100 }, &Thresholds::default());
        assert_eq!(hot.kind, ActionKind::CoolDown);
        let next = s.apply(&hot);
        assert_eq!(next.laser_power_w, 150.0);
        assert_eq!(next.scan_speed_mm_s, 850.0);

        let cold = decide_action(&DefectCounts { counts: [8, 0, 0, 0], sites: 100 }, &Thresholds::default());
        assert_eq!(cold.kind, ActionKind::FeedCorrect);
        let next = st(200.0, 800.0, 1.19).apply(&cold);
        assert_eq!(next.feed_rate_rel, 1.2);
        assert_eq!(next.laser_power_w, 210.0);

        // hot wins when both exceed
        let both = decide_action(&DefectCounts { counts: [10, 0, 0, 10], sites: 100 }, &Thresholds::default());
        assert_eq!(both.kind, ActionKind::CoolDown);
    }

    #[test]
    fn control_record_round_trip() {
        for a in [
            ControlAction::NONE,
            decide_action(&DefectCounts { counts: [0, 0, 0, 10], sites: 100 }, &Thresholds::default()),
            decide_action(&DefectCounts { counts: [10, 0, 0, 0], sites: 100 }, &Thresholds::default()),
        ] {
            let bytes = a.encode();
            assert_eq!(bytes.len(), 13);
            let back = ControlAction::decode(&bytes).unwrap();
            assert_eq!(back.kind, a.kind);
            assert!((back.delta_feed_rel - a.delta_feed_rel).abs() < 1e-7);
            assert_eq!(back.delta_power_w, a.delta_power_w);
        }
        assert!(ControlAction::decode(&[9; 13]).is_err());
        assert!(ControlAction::decode(&[0; 12]).is_err());
    }

    #[test]
    fn controller_recovers_from_overheating() {
        let r = run_closed_loop(&LoopConfig::default(), None).unwrap();
        assert!(r.states_within_bounds());
        assert!(r.defect_reduction_pct.unwrap() >= 60.0);
        let again = run_closed_loop(&LoopConfig::default(), None).unwrap();
        assert_eq!(r.to_jsonl(), again.to_jsonl());
        // energy approaches the band monotonically while above it
        for w in r.layers.windows(2) {
            if w[0].energy_density > ENERGY_BAND.1 && w[0].action.kind != ActionKind::None {
                assert!(band_deviation(w[1].energy_density) <= band_deviation(w[0].energy_density));
            }
        }
    }

    #[test]
    fn full_pipeline_without_resources_is_a_config_error() {
        let cfg = LoopConfig {
            mode: LoopMode::FullPipeline,
            ..LoopConfig::default()
        };
        assert!(matches!(run_closed_loop(&cfg, None), Err(TwinError::Config(_))));
    }

    #[test]
    fn report_jsonl_shape() {
        let cfg = LoopConfig {
            layers: 6,
            sites: 50,
            ..LoopConfig::default()
        };
        let r = run_closed_loop(&cfg, None).unwrap();
        assert_eq!(r.window, 3);
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 7);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["record"], "layer");
        assert_eq!(first["action"]["kind"], "cool_down");
    }

    fn arb_state() -> impl Strategy<Value = ProcessState> {
        (150.0..=350.0f64, 500.0..=1500.0f64, 0.8..=1.2f64).prop_map(|(p, v, f)| ProcessState::new(p, v, f).unwrap())
    }

    proptest! {
        #[test]
        fn probabilities_normalised(s in arb_state()) {
            let p = defect_probability(&s);
            let sum: f64 = p.class.iter().sum::<f64>() + p.none;
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for v in p.class.iter().chain([&p.none]) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn clamping_is_total(s in arb_state(), kinds in proptest::collection::vec(0u8..3, 0..100)) {
            let mut s = s;
            for k in kinds {
                let counts = match k {
                    0 => DefectCounts { counts: [0; 4], sites: 10 },
                    1 => DefectCounts { counts: [0, 0, 5, 5], sites: 10 },
                    _ => DefectCounts { counts: [5, 5, 0, 0], sites: 10 },
                };
                s = s.apply(&decide_action(&counts, &Thresholds::default()));
                prop_assert!(s.within_bounds());
            }
        }

        #[test]
        fn over_band_energy_never_rises(p in 250.0..=350.0f64, v in 500.0..=700.0f64, seed in 0u64..50) {
            let cfg = LoopConfig { layers: 40, sites: 200, seed, start: ProcessState::new(p, v, 1.0).unwrap(), ..LoopConfig::default() };
            let r = run_closed_loop(&cfg, None).unwrap();
            for w in r.layers.windows(2) {
                if w[0].energy_density > ENERGY_BAND.1 {
                    prop_assert!(band_deviation(w[1].energy_density) <= band_deviation(w[0].energy_density));
                }
            }
        }
    }
}
