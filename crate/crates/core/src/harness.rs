//! Scenario orchestration: event-log ingestion, the simulated human, closed-loop
//! runs, multi-controller comparison and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clbf::{train_clbf_with, BmmPlant, Certificate, CertificateBundle, ClbfConfig, ClbfModel, Nominal, NeuralController, SafeSet};
use crate::controllers::{
    bolus_wizard, mpc_step, Controller, MealPredictor, MpcConfig, MpcController, PidController, PidGains, RescueLogic, TherapySettings,
};
use crate::error::{Error, Result};
use crate::fis::{fis_eval, iob, ActionRecord, FisModel};
use crate::mc::{cluster_meals, Event, EventSequence, MarkovChain};
use crate::plant::{BmmParams, PlantState};
use crate::rng::{self, Stage};
use crate::sim::{simulate, Action, HumanAgent, SimOptions, TimedAction, Trace};
use crate::stl::{glycemic_metrics, GlycemicMetrics};

pub const MINUTES_PER_DAY: f64 = 1440.0;
pub use crate::plant::INSULIN_DURATION_MIN;

// ---------------------------------------------------------------------------
// Event logs

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Meal,
    Bolus,
    Settings,
}

impl LogKind {
    fn as_str(self) -> &'static str {
        match self {
            LogKind::Meal => "meal",
            LogKind::Bolus => "bolus",
            LogKind::Settings => "settings",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t_min: f64,
    pub event_type: LogKind,
    pub value: f64,
}

/// Parsed event log: all rows as a labelled event sequence, plus the bolus
/// decisions as action records when CGM data was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub rows: Vec<LogRow>,
    pub events: EventSequence,
    pub records: Vec<ActionRecord>,
}

impl EventLog {
    pub fn meal_values(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.event_type == LogKind::Meal).map(|r| r.value).collect()
    }

    /// Meal events labelled by size cluster (k clusters).
    pub fn meal_sequence(&self, k: usize) -> Result<(EventSequence, Vec<(String, f64)>)> {
        let values = self.meal_values();
        let clustering = cluster_meals(&values, k)?;
        let events = self
            .rows
            .iter()
            .filter(|r| r.event_type == LogKind::Meal)
            .map(|r| Event {
                t_min: r.t_min,
                label: clustering.classify(r.value).to_string(),
            })
            .collect();
        Ok((EventSequence::new(events)?, clustering.named_centers()))
    }
}

pub const EVENT_LOG_HEADER: [&str; 3] = ["t_min", "event_type", "value"];

pub fn write_event_log<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_LOG_HEADER)?;
    for r in rows {
        w.write_record([format!("{:?}", r.t_min), r.event_type.as_str().to_string(), format!("{:?}", r.value)])?;
    }
    w.flush().map_err(|e| Error::io("<event log>", e))
}

/// Parse `t_min,event_type,value` rows, collecting every malformed line.
pub fn read_event_log<R: Read>(input: R) -> Result<Vec<LogRow>> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = rd.headers()?.clone();
    let missing: Vec<String> = EVENT_LOG_HEADER
        .iter()
        .filter(|h| !headers.iter().any(|x| x.trim() == **h))
        .map(|h| format!("missing column `{h}`"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion(missing));
    }
    let col = |name: &str| headers.iter().position(|x| x.trim() == name).unwrap();
    let (ct, ck, cv) = (col("t_min"), col("event_type"), col("value"));
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let field = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let t = field(ct).parse::<f64>();
        let v = field(cv).parse::<f64>();
        let kind = match field(ck) {
            "meal" => Some(LogKind::Meal),
            "bolus" => Some(LogKind::Bolus),
            "settings" => Some(LogKind::Settings),
            _ => None,
        };
        match (t, kind, v) {
            (Ok(t), Some(event_type), Ok(value)) if t.is_finite() && value.is_finite() => {
                if event_type != LogKind::Settings && value < 0.0 {
                    bad.push(format!("line {line}: negative {} amount {value}", event_type.as_str()));
                } else {
                    rows.push(LogRow { t_min: t, event_type, value });
                }
            }
            (t, kind, v) => {
                let mut why = Vec::new();
                if t.as_ref().map_or(true, |t| !t.is_finite()) {
                    why.push(format!("bad t_min `{}`", field(ct)));
                }
                if kind.is_none() {
                    why.push(format!("unknown event_type `{}`", field(ck)));
                }
                if v.as_ref().map_or(true, |v| !v.is_finite()) {
                    why.push(format!("bad value `{}`", field(cv)));
                }
                bad.push(format!("line {line}: {}", why.join(", ")));
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Ingestion(bad));
    }
    if rows.is_empty() {
        return Err(Error::Ingestion(vec!["event log has no rows".into()]));
    }
    rows.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
    Ok(rows)
}

/// Load an event log. With a CGM trace, each bolus becomes an action record
/// `[mean CGM over the previous 30 min, IOB, carbs within ±15 min] → units`.
pub fn load_event_log(path: impl AsRef<Path>, cgm: Option<&Trace>) -> Result<EventLog> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = read_event_log(file)?;
    event_log_from_rows(rows, cgm)
}

pub fn event_log_from_rows(rows: Vec<LogRow>, cgm: Option<&Trace>) -> Result<EventLog> {
    let events = EventSequence::new(
        rows.iter()
            .map(|r| Event {
                t_min: r.t_min,
                label: r.event_type.as_str().to_string(),
            })
            .collect(),
    )?;
    let mut records = Vec::new();
    if let Some(trace) = cgm {
        let mut doses: Vec<(f64, f64)> = Vec::new();
        for r in rows.iter().filter(|r| r.event_type == LogKind::Bolus) {
            let window: Vec<f64> = (0..trace.len())
                .filter(|&k| {
                    let t = trace.time(k);
                    t <= r.t_min && t > r.t_min - 30.0
                })
                .map(|k| trace.samples()[k].state.glucose)
                .collect();
            if window.is_empty() {
                log::warn!("no CGM before bolus at t = {}; skipped", r.t_min);
                continue;
            }
            let mean_cgm = window.iter().sum::<f64>() / window.len() as f64;
            let carbs: f64 = rows
                .iter()
                .filter(|m| m.event_type == LogKind::Meal && (m.t_min - r.t_min).abs() <= 15.0)
                .map(|m| m.value)
                .sum();
            let on_board = iob(&doses, r.t_min, INSULIN_DURATION_MIN)?;
            records.push(ActionRecord {
                features: [mean_cgm, on_board, carbs],
                event: Some(if carbs > 0.0 { "meal" } else { "correction" }.to_string()),
                bolus: r.value,
            });
            doses.push((r.t_min, r.value));
        }
    }
    Ok(EventLog { rows, events, records })
}

/// Synthetic action records labelled by the bolus wizard: mean CGM uniform in
/// [70, 300] mg/dL, IOB uniform in [0, 5] U, carbs 0 g with probability 0.3
/// and uniform in [10, 100] g otherwise.
pub fn wizard_training_data(n: usize, therapy: &TherapySettings, seed: u64) -> Vec<ActionRecord> {
    let mut rng = rng::stream(seed, Stage::FisData, 0);
    (0..n)
        .map(|_| {
            let cgm = rng.gen_range(70.0..=300.0);
            let on_board = rng.gen_range(0.0..=5.0);
            let carbs = if rng.gen::<f64>() < 0.3 { 0.0 } else { rng.gen_range(10.0..=100.0) };
            ActionRecord {
                features: [cgm, on_board, carbs],
                event: Some(if carbs > 0.0 { "meal" } else { "correction" }.to_string()),
                bolus: bolus_wizard(cgm, therapy, carbs),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Meal model and simulated human

/// Meal-size chain with cluster centers (g) and within-cluster spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealModel {
    pub chain: MarkovChain,
    pub centers: Vec<(String, f64)>,
    pub size_sd: f64,
    /// Nominal meal times of day, min after midnight.
    pub meal_times: Vec<f64>,
    pub timing_sd: f64,
}

impl Default for MealModel {
    fn default() -> Self {
        let states = vec!["Small".to_string(), "Medium".to_string(), "Large".to_string()];
        let chain = MarkovChain::new(
            states.clone(),
            vec![vec![0.2, 0.5, 0.3], vec![0.3, 0.4, 0.3], vec![0.4, 0.4, 0.2]],
        )
        .expect("valid default chain");
        Self {
            chain,
            centers: states.into_iter().zip([25.0, 55.0, 90.0]).collect(),
            size_sd: 8.0,
            meal_times: vec![7.0 * 60.0, 12.5 * 60.0, 19.0 * 60.0],
            timing_sd: 20.0,
        }
    }
}

impl MealModel {
    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        if self.centers.len() != self.chain.len() {
            return Err(Error::Config("meal model needs one center per chain state".into()));
        }
        for (i, (name, _)) in self.centers.iter().enumerate() {
            if self.chain.states()[i] != *name {
                return Err(Error::Config(format!("center `{name}` does not match chain state order")));
            }
        }
        if !(self.size_sd >= 0.0 && self.timing_sd >= 0.0) {
            return Err(Error::Config("meal spreads must be >= 0".into()));
        }
        Ok(())
    }

    /// Sampled meal timetable `(t_min, label, carbs_g)` for `days` days. Uses
    /// the meal-event, meal-size and meal-timing streams of `seed` only.
    pub fn sample_meals(&self, days: usize, seed: u64) -> Vec<(f64, String, f64)> {
        let mut ev = rng::stream(seed, Stage::MealEvents, 0);
        let mut sz = rng::stream(seed, Stage::MealSizes, 0);
        let mut tm = rng::stream(seed, Stage::MealTiming, 0);
        let size_noise = Normal::new(0.0, self.size_sd.max(1e-12)).expect("finite sd");
        let time_noise = Normal::new(0.0, self.timing_sd.max(1e-12)).expect("finite sd");
        let mut state = ev.gen_range(0..self.chain.len());
        let mut out = Vec::new();
        for day in 0..days {
            for &t0 in &self.meal_times {
                let t = (day as f64 * MINUTES_PER_DAY + t0 + time_noise.sample(&mut tm)).round().max(0.0);
                let carbs = (self.centers[state].1 + size_noise.sample(&mut sz)).max(5.0);
                out.push((t, self.chain.states()[state].clone(), carbs));
                state = self.chain.step(state, &mut ev);
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }
}

/// Knobs of the simulated person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanBehavior {
    /// Relative spread of the meal-bolus dose error.
    pub bolus_error_sd: f64,
    /// Probability that a meal bolus is badly underestimated.
    pub underbolus_probability: f64,
    /// Dose multiplier of an underestimated bolus.
    pub underbolus_factor: f64,
    /// CGM above which the person may take a correction, mg/dL.
    pub correction_threshold: f64,
    /// Minimum time since the last bolus before a correction, min.
    pub correction_wait_min: f64,
    /// Probability that a correction opportunity is acted upon.
    pub correction_probability: f64,
    /// Subtract IOB from corrections.
    pub correction_uses_iob: bool,
    pub rescue: bool,
}

impl Default for HumanBehavior {
    fn default() -> Self {
        Self {
            bolus_error_sd: 0.2,
            underbolus_probability: 0.0,
            underbolus_factor: 0.2,
            correction_threshold: 250.0,
            correction_wait_min: 120.0,
            correction_probability: 0.5,
            correction_uses_iob: false,
            rescue: true,
        }
    }
}

/// Simulated person: pre-sampled meals, a bolus at every meal from the FIS
/// (bolus wizard without one), occasional naive corrections and rescue carbs.
///
/// All randomness is drawn up front from the scenario seed, so the person's
/// random choices do not depend on the controller in the loop.
pub struct SimulatedHuman {
    meals: Vec<(f64, f64)>,
    /// Per-meal multiplicative dose error.
    dose_factors: Vec<f64>,
    /// Per 5-min slot: whether a correction opportunity is taken.
    correction_draws: Vec<f64>,
    fis: Option<FisModel<f64>>,
    therapy: TherapySettings,
    behavior: HumanBehavior,
    cgm: Vec<(f64, f64)>,
    doses: Vec<(f64, f64)>,
    next_meal: usize,
    rescue: RescueLogic,
}

const CGM_PERIOD_MIN: f64 = 5.0;

impl SimulatedHuman {
    pub fn new(
        meals: Vec<(f64, f64)>,
        duration_min: f64,
        fis: Option<FisModel<f64>>,
        therapy: TherapySettings,
        behavior: HumanBehavior,
        seed: u64,
    ) -> Self {
        let mut noise = rng::stream(seed, Stage::HumanNoise, 0);
        let dose = Normal::new(0.0, behavior.bolus_error_sd.max(1e-12)).expect("finite sd");
        let dose_factors = meals
            .iter()
            .map(|_| {
                let f = dose.sample(&mut noise).exp();
                if noise.gen::<f64>() < behavior.underbolus_probability {
                    f * behavior.underbolus_factor
                } else {
                    f
                }
            })
            .collect();
        let slots = (duration_min / CGM_PERIOD_MIN).ceil() as usize + 1;
        let correction_draws = (0..slots).map(|_| noise.gen::<f64>()).collect();
        let fis = fis.filter(|m| {
            let ok = m.input_dim == 3;
            if !ok {
                log::warn!("FIS with input dimension {} unsupported by the simulated human; using the bolus wizard", m.input_dim);
            }
            ok
        });
        Self {
            meals,
            dose_factors,
            correction_draws,
            fis,
            therapy,
            behavior,
            cgm: Vec::new(),
            doses: Vec::new(),
            next_meal: 0,
            rescue: RescueLogic::default(),
        }
    }

    fn mean_cgm(&self, t: f64) -> f64 {
        let recent: Vec<f64> = self.cgm.iter().filter(|(s, _)| *s > t - 30.0).map(|&(_, g)| g).collect();
        if recent.is_empty() {
            self.cgm.last().map_or(120.0, |c| c.1)
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        }
    }

    fn meal_bolus(&self, t: f64, carbs: f64) -> f64 {
        let cgm = self.mean_cgm(t);
        let on_board = iob(&self.doses, t, INSULIN_DURATION_MIN).unwrap_or(0.0);
        match &self.fis {
            Some(m) => fis_eval(m, &[cgm, on_board, carbs]).unwrap_or_else(|_| bolus_wizard(cgm, &self.therapy, carbs)),
            None => bolus_wizard(cgm, &self.therapy, carbs),
        }
        .max(0.0)
    }
}

impl HumanAgent for SimulatedHuman {
    fn act(&mut self, t: f64, dt: f64, state: &PlantState<f64>) -> Vec<Action> {
        let mut out = Vec::new();
        let slot = (t / CGM_PERIOD_MIN).round();
        let on_cgm = (t - slot * CGM_PERIOD_MIN).abs() < 1e-9;
        if on_cgm {
            self.cgm.push((t, state.glucose));
        }
        while self.next_meal < self.meals.len() && self.meals[self.next_meal].0 < t + dt {
            let (tm, carbs) = self.meals[self.next_meal];
            let units = self.meal_bolus(tm.max(t), carbs) * self.dose_factors[self.next_meal];
            out.push(Action::Meal { carbs_g: carbs });
            if units > 0.0 {
                out.push(Action::Bolus { units });
                self.doses.push((t, units));
            }
            self.next_meal += 1;
        }
        if on_cgm {
            let g = state.glucose;
            if self.behavior.rescue {
                let carbs = self.rescue.check(t, g);
                if carbs > 0.0 {
                    out.push(Action::Rescue { carbs_g: carbs });
                }
            }
            let since_bolus = self.doses.last().map_or(f64::INFINITY, |d| t - d.0);
            let draw = self.correction_draws.get(slot as usize).copied().unwrap_or(1.0);
            if g > self.behavior.correction_threshold
                && since_bolus >= self.behavior.correction_wait_min
                && draw < self.behavior.correction_probability
            {
                let mut units = (g - self.therapy.target) / self.therapy.correction_factor;
                if self.behavior.correction_uses_iob {
                    units -= iob(&self.doses, t, INSULIN_DURATION_MIN).unwrap_or(0.0);
                }
                if units > 0.5 {
                    out.push(Action::Bolus { units });
                    self.doses.push((t, units));
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Pid,
    Mpc,
    Neural,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Pid => "pid",
            ControllerKind::Mpc => "mpc",
            ControllerKind::Neural => "neural",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pid" => Ok(Self::Pid),
            "mpc" => Ok(Self::Mpc),
            "neural" | "nn" => Ok(Self::Neural),
            other => Err(Error::Config(format!("unknown controller `{other}` (pid, mpc, neural)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSource {
    /// No external events.
    None,
    /// Meals from the meal chain; boluses from the FIS (or bolus wizard).
    MonteCarlo,
    /// Fixed timetable.
    Schedule { actions: Vec<TimedAction> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Virtual-patient JSON file; default parameters when absent.
    #[serde(default)]
    pub patient_file: Option<PathBuf>,
    pub controller: ControllerKind,
    #[serde(default)]
    pub therapy: TherapySettings,
    pub events: EventSource,
    pub duration_days: f64,
    pub seed: u64,
    /// Safety tuning probability used when the certificate was built.
    #[serde(default = "default_stp")]
    pub stp: f64,
    /// Initial glucose, mg/dL; the rest of the state starts at basal.
    #[serde(default)]
    pub initial_glucose: Option<f64>,
    #[serde(default)]
    pub human: HumanBehavior,
}

fn default_stp() -> f64 {
    0.95
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            patient_file: None,
            controller: ControllerKind::Pid,
            therapy: TherapySettings::default(),
            events: EventSource::MonteCarlo,
            duration_days: 1.0,
            seed: 0,
            stp: default_stp(),
            initial_glucose: None,
            human: HumanBehavior::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_days >= 1.0) {
            return Err(Error::Config(format!("duration must be >= 1 day, got {}", self.duration_days)));
        }
        if !(0.0..=1.0).contains(&self.stp) {
            return Err(Error::Config(format!("STP must lie in [0, 1], got {}", self.stp)));
        }
        self.therapy.validate()
    }

    pub fn patient(&self) -> Result<BmmParams<f64>> {
        match &self.patient_file {
            Some(p) => BmmParams::load(p),
            None => Ok(BmmParams::default()),
        }
    }

    pub fn duration_min(&self) -> f64 {
        (self.duration_days * MINUTES_PER_DAY).round()
    }
}

/// Learned artifacts a scenario may draw on.
#[derive(Debug, Clone, Default)]
pub struct ScenarioAssets {
    pub meals: Option<MealModel>,
    pub fis: Option<FisModel<f64>>,
    pub certificate: Option<CertificateBundle>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub trace: Trace,
    pub metrics: GlycemicMetrics,
    pub daily: Vec<GlycemicMetrics>,
    pub actions: Vec<TimedAction>,
}

fn build_controller(
    kind: ControllerKind,
    params: &BmmParams<f64>,
    meals: &MealModel,
    neural: Option<&ClbfModel>,
) -> Result<Box<dyn Controller>> {
    Ok(match kind {
        ControllerKind::Pid => Box::new(PidController::new(PidGains::for_params(params))),
        ControllerKind::Mpc => Box::new(MpcController::new(MpcConfig::for_params(params), *params).with_predictor(MealPredictor {
            chain: meals.chain.clone(),
            centers: meals.centers.clone(),
            last_label: None,
        })),
        ControllerKind::Neural => {
            let model = neural.ok_or_else(|| Error::Config("the neural controller needs a certificate bundle".into()))?;
            Box::new(NeuralController { model: model.clone() })
        }
    })
}

/// Split a trace into whole days and compute per-day metrics.
pub fn daily_metrics(trace: &Trace) -> Vec<GlycemicMetrics> {
    let per_day = (MINUTES_PER_DAY / trace.dt()).round() as usize;
    let samples = trace.samples();
    // The final sample closes the last day and is left out of per-day counts.
    let body = &samples[..samples.len().saturating_sub(1).max(1)];
    body.chunks(per_day.max(1))
        .map(|chunk| glycemic_metrics(&Trace::new(trace.dt(), chunk.to_vec()).expect("non-empty chunk")))
        .collect()
}

/// Closed-loop run for one patient under one controller.
pub fn run_scenario_with(config: &ScenarioConfig, params: &BmmParams<f64>, assets: &ScenarioAssets) -> Result<ScenarioOutcome> {
    config.validate()?;
    params.validate().map_err(|e| e.at("patient"))?;
    let meal_model = assets.meals.clone().unwrap_or_default();
    meal_model.validate()?;
    let neural = match (&assets.certificate, config.controller) {
        (Some(b), ControllerKind::Neural) => Some(b.clone().into_certificate().map_err(|e| e.at("certificate"))?.model),
        _ => None,
    };
    let mut controller = build_controller(config.controller, params, &meal_model, neural.as_ref())?;
    run_with_controller(config, params, assets, controller.as_mut())
}

fn run_with_controller(
    config: &ScenarioConfig,
    params: &BmmParams<f64>,
    assets: &ScenarioAssets,
    controller: &mut dyn Controller,
) -> Result<ScenarioOutcome> {
    let meal_model = assets.meals.clone().unwrap_or_default();
    let duration = config.duration_min();
    let mut initial = params.goal_state();
    if let Some(g) = config.initial_glucose {
        initial.glucose = g;
    }

    let mut agent: Box<dyn HumanAgent> = match &config.events {
        EventSource::None => Box::new(crate::sim::Schedule::default()),
        EventSource::Schedule { actions } => Box::new(crate::sim::Schedule::new(actions.clone())),
        EventSource::MonteCarlo => {
            let days = config.duration_days.ceil() as usize;
            let meals = meal_model
                .sample_meals(days, config.seed)
                .into_iter()
                .filter(|m| m.0 < duration)
                .map(|(t, _, c)| (t, c))
                .collect();
            Box::new(SimulatedHuman::new(meals, duration, assets.fis.clone(), config.therapy, config.human, config.seed))
        }
    };
    let out = simulate(initial, params, agent.as_mut(), controller, &SimOptions::with_duration(duration))
        .map_err(|e| e.at("simulate"))?;
    Ok(ScenarioOutcome {
        metrics: glycemic_metrics(&out.trace),
        daily: daily_metrics(&out.trace),
        trace: out.trace,
        actions: out.actions,
    })
}

/// Records every `(state, rate)` decision of the wrapped controller.
struct Recorder<'a> {
    inner: &'a mut dyn Controller,
    pairs: Vec<(Vec<f64>, f64)>,
}

impl Controller for Recorder<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn insulin_rate(&mut self, t_min: f64, state: &PlantState<f64>) -> f64 {
        let u = self.inner.insulin_rate(t_min, state);
        self.pairs.push((state.to_array().to_vec(), u.max(0.0)));
        u
    }

    fn observe(&mut self, t_min: f64, state: &PlantState<f64>, action: &Action) {
        self.inner.observe(t_min, state, action);
    }
}

/// Closed-loop `(state, rate)` pairs of the nominal controller (MPC with the
/// meal forecast) under `config`, for each patient. These serve as control-loss
/// labels when training the neural controller.
pub fn collect_demonstrations(
    config: &ScenarioConfig,
    patients: &[BmmParams<f64>],
    assets: &ScenarioAssets,
) -> Result<Vec<(Vec<f64>, f64)>> {
    config.validate()?;
    let meal_model = assets.meals.clone().unwrap_or_default();
    meal_model.validate()?;
    let mut pairs = Vec::new();
    for params in patients {
        params.validate().map_err(|e| e.at("patient"))?;
        let mut mpc = build_controller(ControllerKind::Mpc, params, &meal_model, None)?;
        let mut rec = Recorder { inner: mpc.as_mut(), pairs: Vec::new() };
        run_with_controller(config, params, assets, &mut rec)?;
        pairs.append(&mut rec.pairs);
    }
    Ok(pairs)
}

/// End-to-end synthesis of the neural controller for `params`: demonstrations
/// of the nominal controller under `demo` on every patient, CLBF training over
/// the default safe set, then the nominal membership check against the
/// state-feedback MPC.
pub fn synthesize_neural_controller(
    params: &BmmParams<f64>,
    demo: &ScenarioConfig,
    patients: &[BmmParams<f64>],
    assets: &ScenarioAssets,
    config: &ClbfConfig,
) -> Result<Certificate> {
    let demos = collect_demonstrations(demo, patients, assets)?;
    log::info!("{} demonstration pairs", demos.len());
    let plant = BmmPlant::new(*params);
    let set = SafeSet::bmm_default(params);
    let mut cert = train_clbf_with(&plant, Nominal::Demonstrations(&demos), &set, config)?;
    let mpc = MpcConfig::for_params(params);
    let nominal = |x: &[f64]| mpc_step(&mpc, params, &PlantState::new(x[0], x[1], x[2]), &[]).rate;
    cert.check_nominal(&plant, &nominal);
    Ok(cert)
}

pub fn run_scenario(config: &ScenarioConfig, assets: &ScenarioAssets) -> Result<ScenarioOutcome> {
    let params = config.patient().map_err(|e| e.at("patient"))?;
    run_scenario_with(config, &params, assets)
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub controller: ControllerKind,
    pub patient: usize,
    pub seed: u64,
    pub day: usize,
    pub metrics: GlycemicMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

/// Aggregates across runs (one run = one patient × seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub controller: ControllerKind,
    pub runs: usize,
    pub pct_below_70: MeanSd,
    pub pct_in_range: MeanSd,
    pub pct_above_180: MeanSd,
    pub hypo_events: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub exists: bool,
    pub violation_rate: f64,
    pub nominal_certified: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Report {
    pub scenario: Option<ScenarioConfig>,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub certificate: Option<CertificateSummary>,
    /// Set when every (patient, seed) pair saw the same meal stream under all controllers.
    pub shared_events: bool,
    #[serde(skip)]
    pub bundle: Option<CertificateBundle>,
    /// Plotted glucose traces, labelled.
    #[serde(skip)]
    pub traces: Vec<(String, Trace)>,
}

/// Parallelism cap from `HILHIP_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("HILHIP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn meal_stream(actions: &[TimedAction]) -> Vec<(u64, u64)> {
    actions
        .iter()
        .filter_map(|a| match a.action {
            Action::Meal { carbs_g } => Some((a.t_min.to_bits(), carbs_g.to_bits())),
            _ => None,
        })
        .collect()
}

struct Job {
    controller: ControllerKind,
    patient: usize,
    seed: u64,
}

/// Run every controller on every patient × seed with shared scenario seeds.
/// Seeds are `base.seed, base.seed + 1, …`. Results are merged in job order.
pub fn compare_controllers(
    base: &ScenarioConfig,
    patients: &[BmmParams<f64>],
    controllers: &[ControllerKind],
    n_seeds: usize,
    assets: &ScenarioAssets,
    keep_traces: usize,
) -> Result<Report> {
    base.validate()?;
    if controllers.contains(&ControllerKind::Neural) && assets.certificate.is_none() {
        return Err(Error::Config("comparison includes the neural controller but no certificate bundle was given".into()));
    }
    let mut jobs = Vec::new();
    for p in 0..patients.len() {
        for s in 0..n_seeds as u64 {
            for &c in controllers {
                jobs.push(Job {
                    controller: c,
                    patient: p,
                    seed: base.seed + s,
                });
            }
        }
    }
    let threads = thread_cap().min(jobs.len()).max(1);
    let results: Vec<Result<ScenarioOutcome>> = {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<ScenarioOutcome>>>> = jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let cfg = ScenarioConfig {
                        controller: job.controller,
                        seed: job.seed,
                        ..base.clone()
                    };
                    let r = run_scenario_with(&cfg, &patients[job.patient], assets);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("job ran")).collect()
    };

    let mut report = Report {
        scenario: Some(base.clone()),
        shared_events: true,
        ..Report::default()
    };
    let mut streams: BTreeMap<(usize, u64), Vec<(u64, u64)>> = BTreeMap::new();
    let mut per_run: BTreeMap<ControllerKind, Vec<GlycemicMetrics>> = BTreeMap::new();
    for (job, result) in jobs.iter().zip(results) {
        let out = result?;
        let stream = meal_stream(&out.actions);
        match streams.get(&(job.patient, job.seed)) {
            Some(s) if *s != stream => report.shared_events = false,
            Some(_) => {}
            None => {
                streams.insert((job.patient, job.seed), stream);
            }
        }
        for (day, m) in out.daily.iter().enumerate() {
            report.runs.push(RunRecord {
                controller: job.controller,
                patient: job.patient,
                seed: job.seed,
                day,
                metrics: *m,
            });
        }
        per_run.entry(job.controller).or_default().push(out.metrics);
        if report.traces.len() < keep_traces {
            report.traces.push((format!("{}_p{}_s{}", job.controller.name(), job.patient, job.seed), out.trace));
        }
    }
    for &c in controllers {
        let ms = per_run.remove(&c).unwrap_or_default();
        let col = |f: fn(&GlycemicMetrics) -> f64| MeanSd::of(&ms.iter().map(f).collect::<Vec<_>>());
        report.aggregates.push(Aggregate {
            controller: c,
            runs: ms.len(),
            pct_below_70: col(|m| m.pct_below_70),
            pct_in_range: col(|m| m.pct_in_range),
            pct_above_180: col(|m| m.pct_above_180),
            hypo_events: col(|m| m.hypo_events as f64),
        });
    }
    if let Some(b) = &assets.certificate {
        report.certificate = Some(CertificateSummary {
            exists: b.exists,
            violation_rate: b.violation_rate,
            nominal_certified: b.nominal_certified,
        });
        report.bundle = Some(b.clone());
    }
    Ok(report)
}

impl Report {
    pub fn aggregate(&self, c: ControllerKind) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.controller == c)
    }
}

// ---------------------------------------------------------------------------
// Report files

pub const METRICS_CSV_HEADER: [&str; 8] = [
    "controller",
    "patient",
    "seed",
    "day",
    "pct_below_70",
    "pct_in_range",
    "pct_above_180",
    "hypo_events",
];

pub fn write_metrics_csv<W: std::io::Write>(runs: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_CSV_HEADER)?;
    for r in runs {
        w.write_record([
            r.controller.name().to_string(),
            r.patient.to_string(),
            r.seed.to_string(),
            r.day.to_string(),
            r.metrics.pct_below_70.to_string(),
            r.metrics.pct_in_range.to_string(),
            r.metrics.pct_above_180.to_string(),
            r.metrics.hypo_events.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 300.0;
const SVG_PAD: f64 = 40.0;

/// Glucose trace plot with dashed 70 and 180 mg/dL guides.
pub fn trace_svg(label: &str, trace: &Trace) -> String {
    let t_end = trace.time(trace.len() - 1).max(trace.dt());
    let g_max = trace.max_glucose().max(250.0);
    let g_min = trace.min_glucose().min(40.0);
    let x = |t: f64| SVG_PAD + (SVG_W - 2.0 * SVG_PAD) * t / t_end;
    let y = |g: f64| SVG_H - SVG_PAD - (SVG_H - 2.0 * SVG_PAD) * (g - g_min) / (g_max - g_min);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#);
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(label));
    for g in [70.0, 180.0] {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="grey" stroke-dasharray="4 4"/>"#,
            x(0.0),
            y(g),
            x(t_end),
            y(g)
        );
    }
    let mut pts = String::new();
    for (k, g) in trace.glucose().enumerate() {
        let _ = write!(pts, "{:.2},{:.2} ", x(trace.time(k)), y(g));
    }
    let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" points="{}"/>"#, pts.trim_end());
    s.push_str("</svg>\n");
    s
}

/// Bars of mean %time below 70 per controller.
pub fn metrics_svg(aggregates: &[Aggregate]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#);
    let top = aggregates.iter().map(|a| a.pct_below_70.mean).filter(|v| v.is_finite()).fold(1.0, f64::max);
    let n = aggregates.len().max(1) as f64;
    let bw = (SVG_W - 2.0 * SVG_PAD) / n;
    for (i, a) in aggregates.iter().enumerate() {
        let v = if a.pct_below_70.mean.is_finite() { a.pct_below_70.mean } else { 0.0 };
        let h = (SVG_H - 2.0 * SVG_PAD) * v / top;
        let x0 = SVG_PAD + i as f64 * bw + 0.1 * bw;
        let _ = writeln!(
            s,
            r#"<rect x="{x0:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="indianred"/>"#,
            SVG_H - SVG_PAD - h,
            0.8 * bw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{} {:.2}%</text>"#,
            x0 + 0.4 * bw,
            SVG_H - SVG_PAD / 3.0,
            a.controller.name(),
            v
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write `metrics.csv`, `report.json`, `certificate.json` (when present),
/// `metrics.svg` (when there are aggregates) and one SVG per kept trace.
pub fn emit_report(report: &Report, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let write = |name: &str, bytes: &[u8], written: &mut Vec<PathBuf>| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };

    let mut csv_bytes = Vec::new();
    write_metrics_csv(&report.runs, &mut csv_bytes)?;
    write("metrics.csv", &csv_bytes, &mut written)?;
    write("report.json", serde_json::to_string_pretty(report)?.as_bytes(), &mut written)?;
    if let Some(b) = &report.bundle {
        write("certificate.json", serde_json::to_string_pretty(b)?.as_bytes(), &mut written)?;
    }
    if !report.aggregates.is_empty() {
        write("metrics.svg", metrics_svg(&report.aggregates).as_bytes(), &mut written)?;
    }
    for (label, trace) in &report.traces {
        let safe: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
        write(&format!("trace_{safe}.svg"), trace_svg(label, trace).as_bytes(), &mut written)?;
    }
    Ok(written)
}
