//! Closed-loop simulation and traces.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::controllers::Controller;
use crate::error::{Error, Result};
use crate::plant::{meal_appearance, rk4_step_with_floor, BmmParams, InputSample, PlantState, StateFloor, MICRO_UNITS_PER_UNIT};

pub const TRACE_CSV_HEADER: [&str; 6] = ["t_min", "glucose", "insulin_action", "plasma_insulin", "insulin_rate", "carb_rate"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub state: PlantState<f64>,
    pub input: InputSample<f64>,
}

/// Uniformly sampled closed-loop record. Sample `k` is at `k * dt` minutes and
/// its input is the one applied over `[k dt, (k + 1) dt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    dt: f64,
    samples: Vec<TraceSample>,
}

impl Trace {
    pub fn new(dt: f64, samples: Vec<TraceSample>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("trace dt must be > 0, got {dt}")));
        }
        if samples.is_empty() {
            return Err(Error::domain("trace must be non-empty"));
        }
        Ok(Self { dt, samples })
    }

    /// Glucose-only trace with zero inputs and basal-like insulin fields, for monitors and metrics.
    pub fn from_glucose(dt: f64, glucose: &[f64]) -> Result<Self> {
        Self::new(
            dt,
            glucose
                .iter()
                .map(|&g| TraceSample {
                    state: PlantState::new(g, 0.0, 0.0),
                    input: InputSample::default(),
                })
                .collect(),
        )
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn glucose(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.state.glucose)
    }

    pub fn min_glucose(&self) -> f64 {
        self.glucose().fold(f64::INFINITY, f64::min)
    }

    pub fn max_glucose(&self) -> f64 {
        self.glucose().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn push(&mut self, sample: TraceSample) {
        self.samples.push(sample);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_CSV_HEADER)?;
        for (k, s) in self.samples.iter().enumerate() {
            w.write_record(&[
                self.time(k).to_string(),
                s.state.glucose.to_string(),
                s.state.insulin_action.to_string(),
                s.state.plasma_insulin.to_string(),
                s.input.insulin_rate.to_string(),
                s.input.carb_rate.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().ne(TRACE_CSV_HEADER.iter().copied()) {
            return Err(Error::domain(format!("unexpected trace header {headers:?}")));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for row in r.records() {
            let row = row?;
            let v: Vec<f64> = row
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| Error::domain(format!("bad trace value {c:?}: {e}"))))
                .collect::<Result<_>>()?;
            times.push(v[0]);
            samples.push(TraceSample {
                state: PlantState::new(v[1], v[2], v[3]),
                input: InputSample::new(v[4], v[5]),
            });
        }
        let dt = if times.len() > 1 { times[1] - times[0] } else { 1.0 };
        Self::new(dt, samples)
    }
}

/// Human or scheduled action applied to the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Meal { carbs_g: f64 },
    /// External insulin bolus in units, delivered over one control interval.
    Bolus { units: f64 },
    /// Rescue carbohydrate in grams.
    Rescue { carbs_g: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub t_min: f64,
    pub action: Action,
}

/// Source of external inputs; asked once per integration step.
pub trait HumanAgent {
    /// Actions taken in `[t_min, t_min + dt)` having observed `state` at `t_min`.
    fn act(&mut self, t_min: f64, dt: f64, state: &PlantState<f64>) -> Vec<Action>;
}

/// Fixed timetable of actions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub actions: Vec<TimedAction>,
}

impl Schedule {
    pub fn new(mut actions: Vec<TimedAction>) -> Self {
        actions.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        Self { actions }
    }

    pub fn meal(mut self, t_min: f64, carbs_g: f64) -> Self {
        self.actions.push(TimedAction {
            t_min,
            action: Action::Meal { carbs_g },
        });
        self.actions.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        self
    }

    pub fn bolus(mut self, t_min: f64, units: f64) -> Self {
        self.actions.push(TimedAction {
            t_min,
            action: Action::Bolus { units },
        });
        self.actions.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        self
    }
}

impl HumanAgent for Schedule {
    fn act(&mut self, t_min: f64, dt: f64, _state: &PlantState<f64>) -> Vec<Action> {
        self.actions
            .iter()
            .filter(|a| a.t_min >= t_min && a.t_min < t_min + dt)
            .map(|a| a.action)
            .collect()
    }
}

/// Two agents acting together (e.g. a timetable plus reactive rescue logic).
pub struct Both<'a>(pub &'a mut dyn HumanAgent, pub &'a mut dyn HumanAgent);

impl HumanAgent for Both<'_> {
    fn act(&mut self, t_min: f64, dt: f64, state: &PlantState<f64>) -> Vec<Action> {
        let mut out = self.0.act(t_min, dt, state);
        out.extend(self.1.act(t_min, dt, state));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub duration_min: f64,
    pub dt: f64,
    /// Controller and CGM period, min.
    pub control_interval: f64,
    pub floor: StateFloor<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            duration_min: 24.0 * 60.0,
            dt: 1.0,
            control_interval: 5.0,
            floor: StateFloor::default(),
        }
    }
}

impl SimOptions {
    pub fn with_duration(duration_min: f64) -> Self {
        Self {
            duration_min,
            ..Self::default()
        }
    }

    fn steps(&self) -> Result<(usize, usize)> {
        let ratio = |a: f64, b: f64| {
            let r = a / b;
            let k = r.round();
            ((r - k).abs() < 1e-9).then_some(k as usize)
        };
        if !(self.duration_min >= 0.0) {
            return Err(Error::domain("duration must be >= 0"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::domain("dt must be > 0"));
        }
        let n = ratio(self.duration_min, self.dt)
            .ok_or_else(|| Error::domain(format!("dt {} does not divide duration {}", self.dt, self.duration_min)))?;
        let every = ratio(self.control_interval, self.dt)
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::domain("dt must divide the control interval"))?;
        Ok((n, every))
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: Trace,
    pub actions: Vec<TimedAction>,
    /// Number of steps where the state floor was applied.
    pub clamp_events: usize,
}

/// Closed-loop simulation: the controller is sampled every control interval
/// (zero-order hold), the agent every step; meals superpose their appearance
/// curves and boluses are spread over one control interval.
pub fn simulate(
    initial: PlantState<f64>,
    params: &BmmParams<f64>,
    agent: &mut dyn HumanAgent,
    controller: &mut dyn Controller,
    options: &SimOptions,
) -> Result<SimOutput> {
    initial.validate()?;
    params.validate()?;
    let (n_steps, control_every) = options.steps()?;
    let dt = options.dt;

    let mut state = initial;
    let mut samples = Vec::with_capacity(n_steps + 1);
    let mut actions = Vec::new();
    let mut meals: Vec<(f64, f64)> = Vec::new();
    // (end time, rate µU/min)
    let mut boluses: Vec<(f64, f64)> = Vec::new();
    let mut controller_rate = 0.0;
    let mut clamp_events = 0;

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        if k < n_steps {
            for action in agent.act(t, dt, &state) {
                match action {
                    Action::Meal { carbs_g } | Action::Rescue { carbs_g } => meals.push((t, carbs_g)),
                    Action::Bolus { units } => {
                        boluses.push((t + options.control_interval, units * MICRO_UNITS_PER_UNIT / options.control_interval))
                    }
                }
                controller.observe(t, &state, &action);
                actions.push(TimedAction { t_min: t, action });
            }
        }
        if k % control_every == 0 {
            controller_rate = controller.insulin_rate(t, &state).max(0.0);
        }
        boluses.retain(|&(end, _)| end > t + 1e-9);
        let bolus_rate: f64 = boluses.iter().map(|&(_, r)| r).sum();
        let mut carb_rate = 0.0;
        for &(t0, carbs) in &meals {
            carb_rate += meal_appearance(carbs, t - t0, params)?;
        }
        let input = InputSample::new(controller_rate + bolus_rate, carb_rate);
        samples.push(TraceSample { state, input });
        if k == n_steps {
            break;
        }
        let out = rk4_step_with_floor(&state, params, &input, dt, &options.floor).map_err(|e| match e {
            Error::Integration { stage, .. } => Error::Integration { t_min: t, stage },
            other => other,
        })?;
        if out.clamped {
            clamp_events += 1;
            log::warn!("state floor applied at t = {t} min");
        }
        state = out.state;
    }

    Ok(SimOutput {
        trace: Trace::new(dt, samples)?,
        actions,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::ConstantRate;

    fn basal_run(schedule: Schedule, minutes: f64) -> SimOutput {
        let params = BmmParams::default();
        let mut agent = schedule;
        let mut ctl = ConstantRate(params.basal_rate());
        simulate(params.goal_state(), &params, &mut agent, &mut ctl, &SimOptions::with_duration(minutes)).unwrap()
    }

    #[test]
    fn zero_duration_gives_the_initial_sample() {
        let out = basal_run(Schedule::default(), 0.0);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace.samples()[0].state, BmmParams::<f64>::default().goal_state());
    }

    #[test]
    fn equilibrium_holds_for_a_day() {
        let out = basal_run(Schedule::default(), 1440.0);
        let g = BmmParams::<f64>::default().goal_state();
        assert_eq!(out.trace.len(), 1441);
        for s in out.trace.samples() {
            assert!((s.state.glucose - g.glucose).abs() < 1e-9);
            assert!(s.state.insulin_action.abs() < 1e-9);
            assert!((s.state.plasma_insulin - g.plasma_insulin).abs() < 1e-9);
        }
        assert_eq!(out.clamp_events, 0);
    }

    #[test]
    fn meal_with_small_bolus_makes_an_excursion() {
        let out = basal_run(Schedule::default().meal(30.0, 100.0).bolus(30.0, 2.0), 600.0);
        let g: Vec<f64> = out.trace.glucose().collect();
        let (peak_k, peak) = g.iter().enumerate().fold((0, 0.0), |a, (k, &v)| if v > a.1 { (k, v) } else { a });
        assert!(peak > 180.0, "peak {peak}");
        assert!(peak_k > 30);
        assert!(*g.last().unwrap() < peak - 50.0);
        assert_eq!(out.actions.len(), 2);
    }

    #[test]
    fn bolus_is_spread_over_one_control_interval() {
        let out = basal_run(Schedule::default().bolus(10.0, 1.0), 30.0);
        let basal = BmmParams::<f64>::default().basal_rate();
        let extra: f64 = out.trace.samples().iter().map(|s| s.input.insulin_rate - basal).sum();
        assert!((extra - MICRO_UNITS_PER_UNIT).abs() < 1e-6, "{extra}");
        assert!((out.trace.samples()[10].input.insulin_rate - basal - 2e5).abs() < 1e-6);
        assert!((out.trace.samples()[15].input.insulin_rate - basal).abs() < 1e-6);
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = basal_run(Schedule::default().meal(60.0, 70.0).bolus(60.0, 4.0), 720.0);
        let b = basal_run(Schedule::default().meal(60.0, 70.0).bolus(60.0, 4.0), 720.0);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn options_are_validated() {
        let params = BmmParams::default();
        let mut ctl = ConstantRate(0.0);
        let mut agent = Schedule::default();
        let bad = SimOptions {
            duration_min: 10.5,
            ..SimOptions::default()
        };
        assert!(simulate(params.goal_state(), &params, &mut agent, &mut ctl, &bad).is_err());
        let bad = SimOptions {
            control_interval: 2.5,
            ..SimOptions::default()
        };
        assert!(simulate(params.goal_state(), &params, &mut agent, &mut ctl, &bad).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let out = basal_run(Schedule::default().meal(5.0, 40.0), 60.0);
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_min,glucose,insulin_action,plasma_insulin,insulin_rate,carb_rate\n"));
        let back = Trace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, out.trace);
    }

    #[test]
    fn trace_rejects_bad_construction() {
        assert!(Trace::new(0.0, vec![]).is_err());
        assert!(Trace::from_glucose(1.0, &[]).is_err());
        assert!(Trace::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
