//! Baseline and nominal insulin controllers, bolus wizard and rescue logic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mc::MarkovChain;
use crate::plant::{meal_appearance, rk4_step, BmmParams, InputSample, PlantState, MICRO_UNITS_PER_UNIT};
use crate::sim::Action;

/// Glucose set point, mg/dL.
pub const SET_POINT: f64 = 120.0;

/// Closed-loop insulin controller. Rates are µU/min.
pub trait Controller {
    fn name(&self) -> &str;

    fn insulin_rate(&mut self, t_min: f64, state: &PlantState<f64>) -> f64;

    /// Notification of an external action (meal onset, bolus, rescue).
    fn observe(&mut self, _t_min: f64, _state: &PlantState<f64>, _action: &Action) {}
}

/// Constant delivery.
#[derive(Debug, Clone)]
pub struct ConstantRate(pub f64);

impl Controller for ConstantRate {
    fn name(&self) -> &str {
        "constant"
    }

    fn insulin_rate(&mut self, _t_min: f64, _state: &PlantState<f64>) -> f64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// PID

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    /// µU/min per mg/dL.
    pub kp: f64,
    /// µU/min per (mg/dL · min).
    pub ki: f64,
    /// µU/min per (mg/dL / min).
    pub kd: f64,
    /// µU/min.
    pub basal_rate: f64,
    /// µU/min.
    pub u_max: f64,
}

impl PidGains {
    pub fn for_params(params: &BmmParams<f64>) -> Self {
        let basal = params.basal_rate();
        Self {
            kp: basal / 60.0,
            ki: basal / 60.0 / 90.0,
            kd: basal / 60.0 * 30.0,
            basal_rate: basal,
            u_max: 5.0 * basal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u_max > 0.0) {
            return Err(Error::domain("PID u_max must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// One PID update with output clamping and integral freeze while clamped.
pub fn pid_step(gains: &PidGains, cgm: f64, setpoint: f64, dt: f64, state: &mut PidState) -> f64 {
    let e = cgm - setpoint;
    let de = match state.prev_error {
        Some(prev) if dt > 0.0 => (e - prev) / dt,
        _ => 0.0,
    };
    let integral = state.integral + e * dt;
    let raw = gains.basal_rate + gains.kp * e + gains.ki * integral + gains.kd * de;
    let u = raw.clamp(0.0, gains.u_max);
    if u == raw {
        state.integral = integral;
    }
    state.prev_error = Some(e);
    u
}

#[derive(Debug, Clone)]
pub struct PidController {
    pub gains: PidGains,
    pub setpoint: f64,
    state: PidState,
    last_t: Option<f64>,
}

impl PidController {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            setpoint: SET_POINT,
            state: PidState::default(),
            last_t: None,
        }
    }
}

impl Controller for PidController {
    fn name(&self) -> &str {
        "pid"
    }

    fn insulin_rate(&mut self, t_min: f64, state: &PlantState<f64>) -> f64 {
        let dt = self.last_t.map_or(0.0, |t0| t_min - t0);
        self.last_t = Some(t_min);
        pid_step(&self.gains, state.glucose, self.setpoint, dt, &mut self.state)
    }
}

// ---------------------------------------------------------------------------
// Bayesian meal forecast

/// Next-meal distribution from the chain row of the last observed meal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealForecast {
    /// (label, probability) in chain state order.
    pub distribution: Vec<(String, f64)>,
    pub expected_carbs: f64,
}

/// `centers` maps chain labels to representative meal sizes (grams).
pub fn bayesian_meal_forecast(mc: &MarkovChain, last_event: &str, centers: &[(String, f64)]) -> MealForecast {
    let probs: Vec<f64> = match mc.index_of(last_event) {
        Some(i) => mc.row(i).to_vec(),
        None => {
            log::warn!("unknown event {last_event:?}; using a uniform prior");
            vec![1.0 / mc.len() as f64; mc.len()]
        }
    };
    let expected_carbs = mc
        .states()
        .iter()
        .zip(&probs)
        .map(|(label, p)| {
            let size = centers.iter().find(|(l, _)| l == label).map_or(0.0, |&(_, c)| c);
            p * size
        })
        .sum();
    MealForecast {
        distribution: mc.states().iter().cloned().zip(probs).collect(),
        expected_carbs,
    }
}

// ---------------------------------------------------------------------------
// MPC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Prediction steps.
    pub horizon: usize,
    /// Minutes per prediction step.
    pub step_min: f64,
    /// Integration step inside the rollout, min.
    pub dt: f64,
    pub glucose_weight: f64,
    pub insulin_weight: f64,
    /// Candidate constant rates, µU/min.
    pub rate_grid: Vec<f64>,
    pub setpoint: f64,
}

impl MpcConfig {
    /// 12 × 5 min horizon and 21 rates spanning `[0, 5 × basal]`.
    pub fn for_params(params: &BmmParams<f64>) -> Self {
        let basal = params.basal_rate();
        Self {
            horizon: 12,
            step_min: 5.0,
            dt: 1.0,
            glucose_weight: 1.0,
            insulin_weight: 1.0e-9,
            rate_grid: (0..21).map(|k| k as f64 * 5.0 * basal / 20.0).collect(),
            setpoint: SET_POINT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::domain("MPC horizon must be >= 1"));
        }
        if self.glucose_weight < 0.0 || self.insulin_weight < 0.0 {
            return Err(Error::domain("MPC weights must be >= 0"));
        }
        if self.rate_grid.is_empty() {
            return Err(Error::domain("MPC rate grid must be non-empty"));
        }
        Ok(())
    }
}

/// Meal known to the predictor: `t_since` minutes since onset at decision
/// time (negative for a future meal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownMeal {
    pub t_since: f64,
    pub carbs_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcDecision {
    pub rate: f64,
    pub cost: f64,
    /// Set when every rollout failed and basal was returned.
    pub fell_back: bool,
}

/// Cost of holding `rate` over the horizon.
pub fn mpc_cost(config: &MpcConfig, params: &BmmParams<f64>, state: &PlantState<f64>, meals: &[KnownMeal], rate: f64) -> Result<f64> {
    let substeps = (config.step_min / config.dt).round().max(1.0) as usize;
    let mut x = *state;
    let mut t = 0.0;
    let mut cost = 0.0;
    for _ in 0..config.horizon {
        for _ in 0..substeps {
            let mut carb_rate = 0.0;
            for m in meals {
                let since = m.t_since + t;
                if since >= 0.0 {
                    carb_rate += meal_appearance(m.carbs_g, since, params)?;
                }
            }
            x = rk4_step(&x, params, &InputSample::new(rate, carb_rate), config.dt)?.state;
            t += config.dt;
        }
        let e = x.glucose - config.setpoint;
        cost += config.glucose_weight * e * e + config.insulin_weight * rate * rate;
    }
    Ok(cost)
}

/// Exhaustive search over the constant-rate grid; ties go to the lower rate.
pub fn mpc_step(config: &MpcConfig, params: &BmmParams<f64>, state: &PlantState<f64>, meals: &[KnownMeal]) -> MpcDecision {
    let mut grid = config.rate_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &rate in &grid {
        match mpc_cost(config, params, state, meals, rate) {
            Ok(c) if c.is_finite()
                && best.is_none_or(|(_, bc)| c < bc) => {
                    best = Some((rate, c));
                }
            _ => {}
        }
    }
    match best {
        Some((rate, cost)) => MpcDecision {
            rate,
            cost,
            fell_back: false,
        },
        None => {
            log::warn!("all MPC rollouts failed; falling back to basal");
            MpcDecision {
                rate: params.basal_rate(),
                cost: f64::NAN,
                fell_back: true,
            }
        }
    }
}

/// Meal-size estimator used by the MPC at an announced meal onset.
#[derive(Debug, Clone)]
pub struct MealPredictor {
    pub chain: MarkovChain,
    pub centers: Vec<(String, f64)>,
    pub last_label: Option<String>,
}

impl MealPredictor {
    pub fn predict(&self) -> f64 {
        match &self.last_label {
            Some(l) => bayesian_meal_forecast(&self.chain, l, &self.centers).expected_carbs,
            None => self.centers.iter().map(|c| c.1).sum::<f64>() / self.centers.len().max(1) as f64,
        }
    }

    fn record(&mut self, carbs_g: f64) {
        self.last_label = self
            .centers
            .iter()
            .min_by(|a, b| (a.1 - carbs_g).abs().total_cmp(&(b.1 - carbs_g).abs()))
            .map(|c| c.0.clone());
    }
}

#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    pub params: BmmParams<f64>,
    /// Without a predictor announced meals are ignored by the rollout.
    pub predictor: Option<MealPredictor>,
    /// (onset time, estimated carbs)
    meals: Vec<(f64, f64)>,
    pub fallbacks: usize,
}

impl MpcController {
    pub fn new(config: MpcConfig, params: BmmParams<f64>) -> Self {
        Self {
            config,
            params,
            predictor: None,
            meals: Vec::new(),
            fallbacks: 0,
        }
    }

    pub fn with_predictor(mut self, predictor: MealPredictor) -> Self {
        self.predictor = Some(predictor);
        self
    }
}

impl Controller for MpcController {
    fn name(&self) -> &str {
        "mpc"
    }

    fn insulin_rate(&mut self, t_min: f64, state: &PlantState<f64>) -> f64 {
        // Appearance is negligible after 8 time constants.
        let horizon = 8.0 * self.params.tau_meal;
        self.meals.retain(|&(t0, _)| t_min - t0 < horizon);
        let known: Vec<KnownMeal> = self
            .meals
            .iter()
            .map(|&(t0, c)| KnownMeal {
                t_since: t_min - t0,
                carbs_g: c,
            })
            .collect();
        let d = mpc_step(&self.config, &self.params, state, &known);
        if d.fell_back {
            self.fallbacks += 1;
        }
        d.rate
    }

    fn observe(&mut self, t_min: f64, _state: &PlantState<f64>, action: &Action) {
        match *action {
            Action::Meal { carbs_g } => {
                if let Some(p) = self.predictor.as_mut() {
                    self.meals.push((t_min, p.predict()));
                    p.record(carbs_g);
                }
            }
            Action::Rescue { carbs_g } => self.meals.push((t_min, carbs_g)),
            Action::Bolus { .. } => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Human-side rules

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TherapySettings {
    /// Correction factor, mg/dL per U.
    pub correction_factor: f64,
    /// Carb ratio, g per U.
    pub carb_ratio: f64,
    /// mg/dL
    pub target: f64,
}

impl Default for TherapySettings {
    fn default() -> Self {
        Self {
            correction_factor: 20.0,
            carb_ratio: 10.0,
            target: SET_POINT,
        }
    }
}

impl TherapySettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.correction_factor > 0.0 && self.carb_ratio > 0.0) {
            return Err(Error::domain("CF and CR must be > 0"));
        }
        Ok(())
    }
}

/// `max(0, (cgm - target) / CF) + carbs / CR`, in units.
pub fn bolus_wizard(cgm: f64, settings: &TherapySettings, carbs: f64) -> f64 {
    ((cgm - settings.target) / settings.correction_factor).max(0.0) + carbs.max(0.0) / settings.carb_ratio
}

pub const RESCUE_THRESHOLD: f64 = 70.0;
pub const RESCUE_CARBS: f64 = 15.0;
pub const RESCUE_REFRACTORY_MIN: f64 = 30.0;

/// Stateless rule: 15 g when CGM is strictly below 70 mg/dL.
pub fn rescue_logic(cgm: f64) -> f64 {
    if cgm < RESCUE_THRESHOLD {
        RESCUE_CARBS
    } else {
        0.0
    }
}

/// Rescue rule with a refractory period between treatments.
#[derive(Debug, Clone, Default)]
pub struct RescueLogic {
    last: Option<f64>,
}

impl RescueLogic {
    pub fn check(&mut self, t_min: f64, cgm: f64) -> f64 {
        let ready = self.last.is_none_or(|t0| t_min - t0 >= RESCUE_REFRACTORY_MIN);
        let carbs = rescue_logic(cgm);
        if ready && carbs > 0.0 {
            self.last = Some(t_min);
            carbs
        } else {
            0.0
        }
    }
}

/// Rate (µU/min) of a bolus of `units` spread over `interval_min`.
pub fn bolus_to_rate(units: f64, interval_min: f64) -> f64 {
    units * MICRO_UNITS_PER_UNIT / interval_min
}

/// Additive composition `u = π(X) + u_ex`.
pub fn nominal_step(controller_rate: f64, external_rate: f64) -> Result<f64> {
    if !(controller_rate >= 0.0 && external_rate >= 0.0) {
        return Err(Error::domain("controller and external rates must be >= 0"));
    }
    Ok(controller_rate + external_rate)
}
