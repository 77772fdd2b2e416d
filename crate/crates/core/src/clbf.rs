//! Neural control Lyapunov barrier function (CLBF) synthesis.
//!
//! Two networks are trained jointly over samples of a box-shaped safe set `C`:
//! a scalar certificate `V` and a controller `π`. The loss combines
//!
//! * `[ε - V(x)]₊` off the goal (positivity),
//! * `V(x_g)²` (zero at the goal),
//! * `[L_f V + L_g V (π(x) + u*) + λ V]₊` (decrease), where `u*` is the endpoint
//!   of the external-input interval that maximizes the left side, i.e. the
//!   upper endpoint when `L_g V > 0` and the lower one otherwise,
//! * `((π(x) - π_nom(x)) / u_scale)²` (imitation of the nominal controller),
//! * optionally `[V(x) - c]₊` on safe samples and `[c + ε - V(x)]₊` on samples
//!   of a configured unsafe region, which ties the sublevel set `V ≤ c` to the
//!   region the controller must keep the state out of.
//!
//! Lie derivatives are directional derivatives of `V` along `f` and `g`; their
//! parameter gradients come from the tangent-carrying backward pass of [`Mlp`].

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::Controller;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::plant::{BmmParams, PlantState, INSULIN_DURATION_MIN, MICRO_UNITS_PER_UNIT};
use crate::reach::{Enclosure, Interval};
use crate::rng::{self, Stage};

/// Control-affine plant `x' = f(x) + g(x) u` with one input.
pub trait AffinePlant: Sync {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64]) -> Vec<f64>;
    fn gain(&self, x: &[f64]) -> Vec<f64>;
    /// Actuator limits applied to the synthesized controller.
    fn control_bounds(&self) -> (f64, f64);
}

/// Bergman minimal model without meal appearance; the input is insulin (µU/min).
#[derive(Debug, Clone)]
pub struct BmmPlant {
    pub params: BmmParams<f64>,
    pub u_max: f64,
}

impl BmmPlant {
    pub fn new(params: BmmParams<f64>) -> Self {
        Self {
            u_max: 5.0 * params.basal_rate(),
            params,
        }
    }
}

impl AffinePlant for BmmPlant {
    fn dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.params.drift([x[0], x[1], x[2]]).to_vec()
    }

    fn gain(&self, _x: &[f64]) -> Vec<f64> {
        self.params.insulin_gain().to_vec()
    }

    fn control_bounds(&self) -> (f64, f64) {
        (0.0, self.u_max)
    }
}

/// `x' = a x + b u` in one dimension, with optional actuator limits.
#[derive(Debug, Clone)]
pub struct ScalarPlant {
    pub a: f64,
    pub b: f64,
    pub bounds: (f64, f64),
}

impl ScalarPlant {
    pub fn new(a: f64, b: f64) -> Self {
        Self {
            a,
            b,
            bounds: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

impl AffinePlant for ScalarPlant {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![self.a * x[0]]
    }

    fn gain(&self, _x: &[f64]) -> Vec<f64> {
        vec![self.b]
    }

    fn control_bounds(&self) -> (f64, f64) {
        self.bounds
    }
}

/// Box-shaped safe set with its goal point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub goal: Vec<f64>,
}

impl SafeSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, goal: Vec<f64>) -> Result<Self> {
        let s = Self { lo, hi, goal };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lo.len();
        if n == 0 || self.hi.len() != n || self.goal.len() != n {
            return Err(Error::domain("safe set bounds and goal must share a non-zero dimension"));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::domain("safe set must be a non-degenerate finite box"));
        }
        if !self.contains(&self.goal) {
            return Err(Error::domain("goal must lie in the safe set"));
        }
        Ok(())
    }

    /// Safe set for the glucose model: glucose [70, 400] mg/dL, insulin action
    /// [-0.015, 0.12] 1/min, plasma insulin [0, 1000] µU/mL; goal at basal.
    pub fn bmm_default(params: &BmmParams<f64>) -> Self {
        let goal = params.goal_state();
        Self {
            lo: vec![70.0, -0.015, 0.0],
            hi: vec![400.0, 0.12, 1000.0],
            goal: vec![goal.glucose, goal.insulin_action, goal.plasma_insulin],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lo.len() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| l <= v && v <= h)
    }

    fn half_width(&self, k: usize) -> f64 {
        0.5 * (self.hi[k] - self.lo[k])
    }

    /// Affine map of the box onto `[-1, 1]^n`.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| (v - 0.5 * (self.lo[k] + self.hi[k])) / self.half_width(k))
            .collect()
    }

    fn scale_direction(&self, d: &[f64]) -> Vec<f64> {
        d.iter().enumerate().map(|(k, v)| v / self.half_width(k)).collect()
    }

    /// Nearest point of the box.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, v)| v.clamp(self.lo[k], self.hi[k])).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..self.dim()).map(|k| rng.gen_range(self.lo[k]..=self.hi[k])).collect())
            .collect()
    }

    /// Regular grid with `per_dim` points per axis, endpoints included.
    pub fn grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let per_dim = per_dim.max(2);
        let total = per_dim.pow(n as u32);
        (0..total)
            .map(|mut idx| {
                let mut x = vec![0.0; n];
                for k in (0..n).rev() {
                    let i = idx % per_dim;
                    idx /= per_dim;
                    x[k] = self.lo[k] + (self.hi[k] - self.lo[k]) * i as f64 / (per_dim - 1) as f64;
                }
                x
            })
            .collect()
    }

    /// Normalized distance to the goal.
    pub fn goal_distance(&self, x: &[f64]) -> f64 {
        let z = self.normalize(x);
        let g = self.normalize(&self.goal);
        z.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClbfConfig {
    /// Decrease rate, 1 / time unit of the plant.
    pub lambda: f64,
    /// Positivity margin for the training hinge.
    pub epsilon: f64,
    /// External-input bound in enclosure units (e.g. insulin units).
    pub u_ex: Enclosure<f64>,
    /// Plant input units per enclosure unit.
    pub u_ex_scale: f64,
    /// Controller output scale (plant input units per network unit).
    pub u_scale: f64,
    pub hidden: Vec<usize>,
    pub train_samples: usize,
    pub validation_per_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch relative to `learning_rate`.
    pub final_lr_fraction: f64,
    pub decrease_weight: f64,
    /// Training-only margin: the decrease hinge is `[lhs + margin]₊`.
    /// Validation always uses the strict condition `lhs <= 0`.
    pub decrease_margin: f64,
    pub control_weight: f64,
    /// Weight of the `V(goal)²` term.
    pub goal_weight: f64,
    /// Box of unsafe states `(lo, hi)` for the optional level-set terms.
    pub unsafe_region: Option<(Vec<f64>, Vec<f64>)>,
    /// Level `c` separating safe (`V <= c`) from unsafe (`V >= c + ε`) states.
    pub barrier_level: f64,
    /// Weight of the level-set terms; zero disables them.
    pub barrier_weight: f64,
    /// Normalized radius around the goal excluded from positivity.
    pub goal_radius: f64,
    /// Largest admissible decrease-violation rate on the validation grid.
    pub violation_threshold: f64,
    /// Smallest admissible off-goal positivity rate on the validation grid.
    pub positivity_threshold: f64,
    pub seed: u64,
}

impl Default for ClbfConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epsilon: 0.01,
            u_ex: Enclosure {
                u_lo: 0.0,
                u_hi: 0.0,
                subdivisions: 1,
                certified: true,
            },
            u_ex_scale: 1.0,
            u_scale: 1.0,
            hidden: vec![128, 128],
            train_samples: 20_000,
            validation_per_dim: 1001,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            decrease_weight: 1.0,
            decrease_margin: 0.0,
            control_weight: 1.0,
            goal_weight: 1.0,
            unsafe_region: None,
            barrier_level: 1.0,
            barrier_weight: 0.0,
            goal_radius: 0.02,
            violation_threshold: 0.02,
            positivity_threshold: 0.98,
            seed: 0,
        }
    }
}

impl ClbfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decrease_margin >= 0.0 && self.decrease_weight >= 0.0 && self.control_weight >= 0.0 && self.goal_weight >= 0.0) {
            return Err(Error::domain("loss weights and margin must be >= 0"));
        }
        if !(self.lambda > 0.0 && self.epsilon > 0.0) {
            return Err(Error::domain("lambda and epsilon must be > 0"));
        }
        if !(self.u_scale > 0.0 && self.u_ex_scale.is_finite()) {
            return Err(Error::domain("u_scale must be > 0"));
        }
        if !(self.learning_rate > 0.0 && (0.0..=1.0).contains(&self.final_lr_fraction)) {
            return Err(Error::domain("learning rate must be > 0 and its final fraction in [0, 1]"));
        }
        if self.train_samples == 0 || self.batch_size == 0 {
            return Err(Error::domain("sample and batch counts must be >= 1"));
        }
        if !(self.barrier_weight >= 0.0 && self.barrier_level.is_finite()) {
            return Err(Error::domain("barrier weight must be >= 0 and its level finite"));
        }
        if let Some((lo, hi)) = &self.unsafe_region {
            if lo.len() != hi.len() || lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::domain("unsafe region must be a finite box"));
            }
        }
        if self.u_ex.u_lo > self.u_ex.u_hi {
            return Err(Error::domain("external-input enclosure is empty"));
        }
        Ok(())
    }

    /// Desk-scale settings for the BMM: `u_ex` is a bolus enclosure in units,
    /// spread over the insulin action duration to give a rate.
    pub fn bmm(params: &BmmParams<f64>, u_ex: Enclosure<f64>) -> Self {
        let safe = SafeSet::bmm_default(params);
        // Mild hypoglycemia band below the safe set.
        let mut unsafe_lo = safe.lo.clone();
        let mut unsafe_hi = safe.hi.clone();
        unsafe_lo[0] = 40.0;
        unsafe_hi[0] = 70.0;
        Self {
            lambda: 0.005,
            u_ex,
            u_ex_scale: MICRO_UNITS_PER_UNIT / INSULIN_DURATION_MIN,
            u_scale: params.basal_rate(),
            epsilon: 0.01,
            hidden: vec![32, 32],
            train_samples: 4000,
            validation_per_dim: 21,
            epochs: 100,
            batch_size: 128,
            learning_rate: 3e-3,
            final_lr_fraction: 1.0,
            decrease_weight: 1000.0,
            decrease_margin: 1e-3,
            goal_weight: 10.0,
            control_weight: 1.0,
            unsafe_region: Some((unsafe_lo, unsafe_hi)),
            barrier_weight: 1.0,
            barrier_level: 1.0,
            seed: 0,
            ..Self::default()
        }
    }

    /// External input interval in plant input units.
    pub fn u_ex_interval(&self) -> Interval<f64> {
        let a = self.u_ex.u_lo * self.u_ex_scale;
        let b = self.u_ex.u_hi * self.u_ex_scale;
        Interval { lo: a.min(b), hi: a.max(b) }
    }
}

/// The two networks plus the coordinate conventions needed to evaluate them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClbfModel {
    pub v_net: Mlp<f64>,
    pub pi_net: Mlp<f64>,
    pub safe_set: SafeSet,
    pub u_scale: f64,
    pub bounds: (f64, f64),
}

impl ClbfModel {
    pub fn new<R: Rng + ?Sized>(safe_set: SafeSet, hidden: &[usize], u_scale: f64, bounds: (f64, f64), rng: &mut R) -> Result<Self> {
        let n = safe_set.dim();
        let sizes = |out: usize| {
            let mut s = vec![n];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Ok(Self {
            v_net: Mlp::random(&sizes(1), rng)?,
            pi_net: Mlp::random(&sizes(1), rng)?,
            safe_set,
            u_scale,
            bounds,
        })
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        self.v_net.eval(&self.safe_set.normalize(x)).expect("dimension checked by safe set")[0]
    }

    /// Gradient of `V` in plant coordinates.
    pub fn grad_v(&self, x: &[f64]) -> Vec<f64> {
        let (_, gz) = self.v_net.grad(&self.safe_set.normalize(x), 0).expect("dimension checked by safe set");
        self.safe_set.scale_direction(&gz)
    }

    /// Unclamped controller output in plant units. States outside `C` are
    /// projected onto the box first.
    pub fn pi_raw(&self, x: &[f64]) -> f64 {
        let z = self.safe_set.normalize(&self.safe_set.project(x));
        self.u_scale * self.pi_net.eval(&z).expect("dimension checked by safe set")[0]
    }

    /// Deployed controller: network output clamped to the actuator limits.
    pub fn pi(&self, x: &[f64]) -> f64 {
        self.pi_raw(x).clamp(self.bounds.0, self.bounds.1)
    }
}

/// Lie derivatives and the worst-case decrease expression at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecreaseTerms {
    pub v: f64,
    pub lf_v: f64,
    pub lg_v: f64,
    pub u_star: f64,
    /// `L_f V + L_g V (u + u*) + λ V`.
    pub lhs: f64,
}

/// Endpoint of `u_ex` maximizing `L_g V · u`.
pub fn worst_case_input(lg_v: f64, u_ex: &Interval<f64>) -> f64 {
    if lg_v > 0.0 {
        u_ex.hi
    } else {
        u_ex.lo
    }
}

/// Decrease condition for control `u` at `x`, computed from the input gradient of `V`.
pub fn decrease_terms(model: &ClbfModel, plant: &dyn AffinePlant, x: &[f64], u: f64, u_ex: &Interval<f64>, lambda: f64) -> DecreaseTerms {
    let v = model.v(x);
    let gv = model.grad_v(x);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let lf_v = dot(&gv, &plant.drift(x));
    let lg_v = dot(&gv, &plant.gain(x));
    let u_star = worst_case_input(lg_v, u_ex);
    DecreaseTerms {
        v,
        lf_v,
        lg_v,
        u_star,
        lhs: lf_v + lg_v * (u + u_star) + lambda * v,
    }
}

/// Loss and gradients over a batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_v: Vec<f64>,
    pub grad_pi: Vec<f64>,
}

/// CLBF loss (positivity, goal and decrease terms), optionally with gradients
/// for both networks.
pub fn clbf_loss_grad(
    model: &ClbfModel,
    plant: &dyn AffinePlant,
    samples: &[Vec<f64>],
    config: &ClbfConfig,
    with_grad: bool,
) -> Result<LossGrad> {
    let u_ex = config.u_ex_interval();
    let set = &model.safe_set;
    let n = samples.len().max(1) as f64;
    let mut grad_v = vec![0.0; if with_grad { model.v_net.params().len() } else { 0 }];
    let mut grad_pi = vec![0.0; if with_grad { model.pi_net.params().len() } else { 0 }];
    let mut loss = 0.0;

    for x in samples {
        let z = set.normalize(x);
        let df = set.scale_direction(&plant.drift(x));
        let dg = set.scale_direction(&plant.gain(x));

        let pi_cache = model.pi_net.forward(&z, None)?;
        let pi_raw = model.u_scale * pi_cache.output()[0];
        let pi = pi_raw.clamp(model.bounds.0, model.bounds.1);
        let pi_clamped = pi != pi_raw;

        let v_cache = model.v_net.forward(&z, None)?;
        let v = v_cache.output()[0];
        let mut scratch = vec![0.0; model.v_net.params().len()];
        let gz = model.v_net.backward(&v_cache, &[1.0], None, &mut scratch);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lf_v = dot(&gz, &df);
        let lg_v = dot(&gz, &dg);
        let u_star = worst_case_input(lg_v, &u_ex);
        let lhs = lf_v + lg_v * (pi + u_star) + config.lambda * v;

        let positivity_active = set.goal_distance(x) > config.goal_radius && v < config.epsilon;
        if positivity_active {
            loss += (config.epsilon - v) / n;
        }
        let hinge = lhs + config.decrease_margin;
        if hinge > 0.0 {
            loss += config.decrease_weight * hinge / n;
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite CLBF loss at sample {x:?}")));
        }

        if with_grad {
            let mut adj_y = 0.0;
            let mut adj_dy = 0.0;
            if positivity_active {
                adj_y -= 1.0 / n;
            }
            if hinge > 0.0 {
                let w = config.decrease_weight / n;
                adj_y += w * config.lambda;
                adj_dy += w;
                if !pi_clamped {
                    let scale = w * lg_v * model.u_scale;
                    model.pi_net.backward(&pi_cache, &[scale], None, &mut grad_pi);
                }
            }
            if adj_dy != 0.0 {
                let d: Vec<f64> = df.iter().zip(&dg).map(|(f, g)| f + g * (pi + u_star)).collect();
                let cache = model.v_net.forward(&z, Some(&d))?;
                model.v_net.backward(&cache, &[adj_y], Some(&[adj_dy]), &mut grad_v);
            } else if adj_y != 0.0 {
                model.v_net.backward(&v_cache, &[adj_y], None, &mut grad_v);
            }
        }
    }

    // Goal term.
    let zg = set.normalize(&set.goal);
    let goal_cache = model.v_net.forward(&zg, None)?;
    let vg = goal_cache.output()[0];
    loss += config.goal_weight * vg * vg;
    if with_grad {
        model.v_net.backward(&goal_cache, &[2.0 * config.goal_weight * vg], None, &mut grad_v);
    }
    Ok(LossGrad { loss, grad_v, grad_pi })
}

pub fn clbf_loss(model: &ClbfModel, plant: &dyn AffinePlant, samples: &[Vec<f64>], config: &ClbfConfig) -> Result<f64> {
    Ok(clbf_loss_grad(model, plant, samples, config, false)?.loss)
}

/// Level-set terms `[V(x) - c]₊` over safe samples and `[c + ε - V(x)]₊`
/// over unsafe samples, each averaged and scaled by `barrier_weight`.
pub fn barrier_loss_grad(model: &ClbfModel, safe: &[Vec<f64>], unsafe_states: &[Vec<f64>], config: &ClbfConfig, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; if with_grad { model.v_net.params().len() } else { 0 }];
    let mut loss = 0.0;
    let c = config.barrier_level;
    let w = config.barrier_weight;
    for (xs, sign, offset) in [(safe, 1.0, -c), (unsafe_states, -1.0, c + config.epsilon)] {
        let n = xs.len().max(1) as f64;
        for x in xs {
            let cache = model.v_net.forward(&model.safe_set.normalize(x), None)?;
            let h = sign * cache.output()[0] + offset;
            if h > 0.0 {
                loss += w * h / n;
                if with_grad {
                    model.v_net.backward(&cache, &[w * sign / n], None, &mut grad);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Training("non-finite barrier loss".into()));
    }
    Ok((loss, grad))
}

/// Mean squared difference between the raw network controller and the
/// nominal labels, both divided by `scale`. States are projected onto `C`.
pub fn control_loss_grad(pi_net: &Mlp<f64>, safe_set: &SafeSet, samples: &[Vec<f64>], labels: &[f64], scale: f64, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    let n = samples.len().max(1) as f64;
    let mut grad = vec![0.0; if with_grad { pi_net.params().len() } else { 0 }];
    let mut loss = 0.0;
    for (x, &label) in samples.iter().zip(labels) {
        let cache = pi_net.forward(&safe_set.normalize(&safe_set.project(x)), None)?;
        let e = cache.output()[0] - label / scale;
        loss += e * e / n;
        if with_grad {
            pi_net.backward(&cache, &[2.0 * e / n], None, &mut grad);
        }
    }
    Ok((loss, grad))
}

pub fn control_loss(pi_net: &Mlp<f64>, safe_set: &SafeSet, samples: &[Vec<f64>], labels: &[f64], scale: f64) -> Result<f64> {
    Ok(control_loss_grad(pi_net, safe_set, samples, labels, scale, false)?.0)
}

// ---------------------------------------------------------------------------
// Training

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    pub violation_rate: f64,
    pub positivity_rate: f64,
    pub points: usize,
}

/// Fraction of points where the decrease condition fails for `controller`.
pub fn violation_rate(
    model: &ClbfModel,
    plant: &dyn AffinePlant,
    points: &[Vec<f64>],
    controller: &dyn Fn(&[f64]) -> f64,
    u_ex: &Interval<f64>,
    lambda: f64,
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let violations = points
        .iter()
        .filter(|x| decrease_terms(model, plant, x, controller(x), u_ex, lambda).lhs > 0.0)
        .count();
    violations as f64 / points.len() as f64
}

/// Off-goal fraction with `V > 0`.
pub fn positivity_rate(model: &ClbfModel, points: &[Vec<f64>], goal_radius: f64) -> f64 {
    let off: Vec<&Vec<f64>> = points
        .iter()
        .filter(|x| model.safe_set.goal_distance(x) > goal_radius)
        .collect();
    if off.is_empty() {
        return 1.0;
    }
    off.iter().filter(|x| model.v(x) > 0.0).count() as f64 / off.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub exists: bool,
    pub model: ClbfModel,
    pub violation_rate: f64,
    pub positivity_rate: f64,
    pub goal_value: f64,
    pub nominal_certified: Option<bool>,
    pub nominal_violation_rate: Option<f64>,
    pub config: ClbfConfig,
    pub loss_history: Vec<f64>,
    pub diverged: bool,
}

impl Certificate {
    pub fn validation_points(&self) -> Vec<Vec<f64>> {
        self.model.safe_set.grid(self.config.validation_per_dim)
    }
}

/// Source of control-loss labels.
#[derive(Clone, Copy)]
pub enum Nominal<'a> {
    /// Labels `π_nom(x)` at the CLBF training samples.
    Policy(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
    /// Recorded `(state, rate)` pairs, e.g. from closed-loop runs of `π_nom`.
    Demonstrations(&'a [(Vec<f64>, f64)]),
}

/// Joint gradient descent (Adam, mini-batches) on the CLBF and control
/// losses, then validation on a regular grid over `C`.
pub fn train_clbf(
    plant: &dyn AffinePlant,
    nominal: &(dyn Fn(&[f64]) -> f64 + Sync),
    safe_set: &SafeSet,
    config: &ClbfConfig,
) -> Result<Certificate> {
    train_clbf_with(plant, Nominal::Policy(nominal), safe_set, config)
}

/// [`train_clbf`] with a choice of label source. With demonstrations, each
/// CLBF batch is paired with an equally sized batch of demonstrations, cycling
/// through a per-epoch shuffle.
pub fn train_clbf_with(plant: &dyn AffinePlant, nominal: Nominal<'_>, safe_set: &SafeSet, config: &ClbfConfig) -> Result<Certificate> {
    config.validate()?;
    safe_set.validate()?;
    if safe_set.dim() != plant.dim() {
        return Err(Error::domain("safe set and plant dimensions differ"));
    }
    let mut init_rng = rng::stream(config.seed, Stage::ClbfInit, 0);
    let mut model = ClbfModel::new(safe_set.clone(), &config.hidden, config.u_scale, plant.control_bounds(), &mut init_rng)?;
    let samples = safe_set.sample(config.train_samples, &mut rng::stream(config.seed, Stage::ClbfSamples, 0));
    let (demo_x, demo_y): (Vec<Vec<f64>>, Vec<f64>) = match nominal {
        Nominal::Policy(f) => (samples.clone(), samples.iter().map(|x| f(x)).collect()),
        Nominal::Demonstrations(d) => {
            if d.is_empty() {
                return Err(Error::domain("no demonstrations"));
            }
            if d.iter().any(|(x, u)| x.len() != safe_set.dim() || !u.is_finite()) {
                return Err(Error::domain("demonstration dimension mismatch or non-finite rate"));
            }
            d.iter().cloned().unzip()
        }
    };
    let paired = matches!(nominal, Nominal::Policy(_));
    let unsafe_samples: Vec<Vec<f64>> = match (&config.unsafe_region, config.barrier_weight > 0.0) {
        (Some((lo, hi)), true) => {
            if lo.len() != safe_set.dim() {
                return Err(Error::domain("unsafe region and safe set dimensions differ"));
            }
            let mut r = rng::stream(config.seed, Stage::ClbfSamples, 1);
            (0..config.train_samples)
                .map(|_| lo.iter().zip(hi).map(|(l, h)| r.gen_range(*l..=*h)).collect())
                .collect()
        }
        _ => Vec::new(),
    };
    let mut demo_order: Vec<usize> = (0..demo_x.len()).collect();

    let mut adam_v = Adam::new(model.v_net.params().len());
    let mut adam_pi = Adam::new(model.pi_net.params().len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch_rng = rng::stream(config.seed, Stage::ClbfBatches, 0);
    let mut history = Vec::with_capacity(config.epochs);
    let mut diverged = false;

    'epochs: for epoch in 0..config.epochs {
        // Cosine decay from the base rate to `final_lr_fraction` of it.
        let progress = epoch as f64 / config.epochs.max(2).saturating_sub(1) as f64;
        let lr = config.learning_rate
            * (config.final_lr_fraction + (1.0 - config.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut batch_rng);
        if !paired {
            demo_order.shuffle(&mut batch_rng);
        }
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let demo_idx: Vec<usize> = if paired {
                chunk.to_vec()
            } else {
                (0..chunk.len()).map(|j| demo_order[(b * config.batch_size + j) % demo_order.len()]).collect()
            };
            let dx: Vec<Vec<f64>> = demo_idx.iter().map(|&i| demo_x[i].clone()).collect();
            let ys: Vec<f64> = demo_idx.iter().map(|&i| demo_y[i]).collect();
            let lg = match clbf_loss_grad(&model, plant, &xs, config, true) {
                Ok(lg) => lg,
                Err(e) => {
                    log::warn!("CLBF training diverged: {e}");
                    diverged = true;
                    break 'epochs;
                }
            };
            let (cl, cg) = control_loss_grad(&model.pi_net, safe_set, &dx, &ys, config.u_scale, true)?;
            let mut lg = lg;
            if !unsafe_samples.is_empty() {
                let us: Vec<Vec<f64>> = chunk.iter().map(|&i| unsafe_samples[i].clone()).collect();
                match barrier_loss_grad(&model, &xs, &us, config, true) {
                    Ok((bl, bg)) => {
                        lg.loss += bl;
                        lg.grad_v.iter_mut().zip(&bg).for_each(|(a, b)| *a += b);
                    }
                    Err(e) => {
                        log::warn!("CLBF training diverged: {e}");
                        diverged = true;
                        break 'epochs;
                    }
                }
            }
            let total = lg.loss + config.control_weight * cl;
            if !total.is_finite() {
                diverged = true;
                break 'epochs;
            }
            epoch_loss += total * xs.len() as f64 / samples.len() as f64;
            let grad_pi: Vec<f64> = lg.grad_pi.iter().zip(&cg).map(|(a, b)| a + config.control_weight * b).collect();
            adam_v.step(model.v_net.params_mut(), &lg.grad_v, lr);
            adam_pi.step(model.pi_net.params_mut(), &grad_pi, lr);
            if model.v_net.params().iter().chain(model.pi_net.params()).any(|p| !p.is_finite()) {
                diverged = true;
                break 'epochs;
            }
        }
        history.push(epoch_loss);
    }

    let config = config.clone();
    if diverged {
        return Ok(Certificate {
            exists: false,
            violation_rate: 1.0,
            positivity_rate: 0.0,
            goal_value: f64::NAN,
            nominal_certified: None,
            nominal_violation_rate: None,
            model,
            config,
            loss_history: history,
            diverged: true,
        });
    }

    let points = safe_set.grid(config.validation_per_dim);
    let u_ex = config.u_ex_interval();
    let vr = violation_rate(&model, plant, &points, &|x| model.pi(x), &u_ex, config.lambda);
    let pr = positivity_rate(&model, &points, config.goal_radius);
    let goal_value = model.v(&safe_set.goal);
    Ok(Certificate {
        exists: vr < config.violation_threshold && pr >= config.positivity_threshold,
        violation_rate: vr,
        positivity_rate: pr,
        goal_value,
        nominal_certified: None,
        nominal_violation_rate: None,
        model,
        config,
        loss_history: history,
        diverged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalCheck {
    pub certified: bool,
    pub violation_rate: f64,
}

/// Evaluate the decrease condition with a black-box controller substituted.
pub fn certify_nominal(
    model: &ClbfModel,
    nominal: &dyn Fn(&[f64]) -> f64,
    points: &[Vec<f64>],
    u_ex: &Interval<f64>,
    plant: &dyn AffinePlant,
    lambda: f64,
    threshold: f64,
) -> NominalCheck {
    let rate = violation_rate(model, plant, points, nominal, u_ex, lambda);
    NominalCheck {
        certified: rate < threshold,
        violation_rate: rate,
    }
}

impl Certificate {
    /// Run [`certify_nominal`] on the certificate's own grid and record the result.
    pub fn check_nominal(&mut self, plant: &dyn AffinePlant, nominal: &dyn Fn(&[f64]) -> f64) -> NominalCheck {
        let check = certify_nominal(
            &self.model,
            nominal,
            &self.validation_points(),
            &self.config.u_ex_interval(),
            plant,
            self.config.lambda,
            self.config.violation_threshold,
        );
        self.nominal_certified = Some(check.certified);
        self.nominal_violation_rate = Some(check.violation_rate);
        check
    }
}

// ---------------------------------------------------------------------------
// Bundle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetBlob {
    pub layer_sizes: Vec<usize>,
    /// Little-endian f64, base64.
    pub weights: String,
}

impl NetBlob {
    fn of(net: &Mlp<f64>) -> Self {
        Self {
            layer_sizes: net.sizes().to_vec(),
            weights: net.to_f64_le_base64(),
        }
    }

    fn net(&self) -> Result<Mlp<f64>> {
        Mlp::from_f64_le_base64(&self.layer_sizes, &self.weights)
    }
}

/// Certificate bundle JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateBundle {
    pub config: ClbfConfig,
    pub safe_set: SafeSet,
    pub u_scale: f64,
    /// Unbounded sides are written as `null`.
    #[serde(with = "optional_bounds")]
    pub control_bounds: (f64, f64),
    pub v_net: NetBlob,
    pub pi_net: NetBlob,
    pub violation_rate: f64,
    pub positivity_rate: f64,
    pub goal_value: f64,
    pub exists: bool,
    pub nominal_certified: Option<bool>,
    pub nominal_violation_rate: Option<f64>,
    pub diverged: bool,
}

impl CertificateBundle {
    pub fn from_certificate(c: &Certificate) -> Self {
        Self {
            config: c.config.clone(),
            safe_set: c.model.safe_set.clone(),
            u_scale: c.model.u_scale,
            control_bounds: c.model.bounds,
            v_net: NetBlob::of(&c.model.v_net),
            pi_net: NetBlob::of(&c.model.pi_net),
            violation_rate: c.violation_rate,
            positivity_rate: c.positivity_rate,
            goal_value: c.goal_value,
            exists: c.exists,
            nominal_certified: c.nominal_certified,
            nominal_violation_rate: c.nominal_violation_rate,
            diverged: c.diverged,
        }
    }

    pub fn into_certificate(self) -> Result<Certificate> {
        let bounds = self.control_bounds;
        Ok(Certificate {
            exists: self.exists,
            model: ClbfModel {
                v_net: self.v_net.net()?,
                pi_net: self.pi_net.net()?,
                safe_set: self.safe_set,
                u_scale: self.u_scale,
                bounds,
            },
            violation_rate: self.violation_rate,
            positivity_rate: self.positivity_rate,
            goal_value: self.goal_value,
            nominal_certified: self.nominal_certified,
            nominal_violation_rate: self.nominal_violation_rate,
            config: self.config,
            loss_history: Vec::new(),
            diverged: self.diverged,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

mod optional_bounds {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        let side = |v: f64| v.is_finite().then_some(v);
        (side(b.0), side(b.1)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(f64, f64), D::Error> {
        let (lo, hi) = <(Option<f64>, Option<f64>)>::deserialize(d)?;
        Ok((lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY)))
    }
}

/// Closed-loop controller backed by a trained `π` network.
#[derive(Debug, Clone)]
pub struct NeuralController {
    pub model: ClbfModel,
}

impl Controller for NeuralController {
    fn name(&self) -> &str {
        "neural"
    }

    fn insulin_rate(&mut self, _t_min: f64, state: &PlantState<f64>) -> f64 {
        self.model.pi(&state.to_array())
    }
}
