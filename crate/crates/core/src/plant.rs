//! Bergman minimal model of glucose-insulin dynamics for a person without
//! endogenous insulin, with a gamma-shaped meal appearance and fixed-step RK4.
//!
//! State `(G, X, I)`:
//!
//! ```text
//! dG/dt = -p1 (G - Gb) - X G + Ra(t) / V
//! dX/dt = -p2 X + p3 (I - Ib)
//! dI/dt = -n I + u(t) / (100 V)
//! ```
//!
//! `G` in mg/dL, `X` in 1/min, `I` in µU/mL, `Ra` in mg/min, `u` in µU/min and
//! `V` in dL (100 mL per dL). The model is control affine in `u`:
//! `x' = f(x) + g_u u + g_c Ra`. The basal equilibrium `(Gb, 0, Ib)` is held by
//! the basal delivery `u_b = 100 n Ib V`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Micro-units per insulin unit.
pub const MICRO_UNITS_PER_UNIT: f64 = 1.0e6;
/// Insulin action duration used for IOB, min.
pub const INSULIN_DURATION_MIN: f64 = 240.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState<T> {
    /// mg/dL
    pub glucose: T,
    /// Remote-compartment insulin action, 1/min.
    pub insulin_action: T,
    /// µU/mL
    pub plasma_insulin: T,
}

impl<T: Scalar> PlantState<T> {
    pub fn new(glucose: T, insulin_action: T, plasma_insulin: T) -> Self {
        Self {
            glucose,
            insulin_action,
            plasma_insulin,
        }
    }

    pub fn to_array(self) -> [T; 3] {
        [self.glucose, self.insulin_action, self.plasma_insulin]
    }

    pub fn from_array(x: [T; 3]) -> Self {
        Self::new(x[0], x[1], x[2])
    }

    pub fn is_finite(&self) -> bool {
        self.glucose.is_finite() && self.insulin_action.is_finite() && self.plasma_insulin.is_finite()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::domain(format!("non-finite plant state {self:?}")));
        }
        if self.glucose <= T::zero() || self.plasma_insulin < T::zero() {
            return Err(Error::domain(format!(
                "plant state out of domain (glucose must be > 0, plasma insulin >= 0): {self:?}"
            )));
        }
        Ok(())
    }
}

/// Model parameters. The JSON form uses exactly the keys
/// `p1, p2, p3, n, Gb, Ib, V, bioavailability, tau_meal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmmParams<T> {
    /// Glucose effectiveness, 1/min.
    pub p1: T,
    /// Remote insulin decay, 1/min.
    pub p2: T,
    /// Remote insulin gain, mL/(µU·min²).
    pub p3: T,
    /// Plasma insulin clearance, 1/min.
    pub n: T,
    #[serde(rename = "Gb")]
    pub basal_glucose: T,
    #[serde(rename = "Ib")]
    pub basal_insulin: T,
    /// Distribution volume, dL.
    #[serde(rename = "V")]
    pub volume: T,
    pub bioavailability: T,
    /// Meal absorption time constant, min.
    pub tau_meal: T,
}

impl<T: Scalar> Default for BmmParams<T> {
    fn default() -> Self {
        Self {
            p1: T::of(0.0287),
            p2: T::of(0.0283),
            p3: T::of(1.007e-5),
            n: T::of(0.0926),
            basal_glucose: T::of(120.0),
            basal_insulin: T::of(28.0),
            volume: T::of(100.0),
            bioavailability: T::of(0.9),
            tau_meal: T::of(40.0),
        }
    }
}

impl<T: Scalar> BmmParams<T> {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.p1,
            self.p2,
            self.p3,
            self.n,
            self.basal_glucose,
            self.basal_insulin,
            self.volume,
            self.bioavailability,
            self.tau_meal,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite BMM parameter"));
        }
        if self.p1 <= T::zero() || self.p2 <= T::zero() || self.p3 <= T::zero() || self.n <= T::zero() {
            return Err(Error::domain("BMM rate constants must be > 0"));
        }
        if self.volume <= T::zero() || self.tau_meal <= T::zero() {
            return Err(Error::domain("V and tau_meal must be > 0"));
        }
        if self.basal_glucose <= T::zero() || self.basal_insulin < T::zero() {
            return Err(Error::domain("basal glucose must be > 0 and basal insulin >= 0"));
        }
        if !(self.bioavailability > T::zero() && self.bioavailability <= T::one()) {
            return Err(Error::domain("bioavailability must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Insulin rate (µU/min) that holds the basal equilibrium.
    pub fn basal_rate(&self) -> T {
        T::of(100.0) * self.n * self.basal_insulin * self.volume
    }

    pub fn goal_state(&self) -> PlantState<T> {
        PlantState::new(self.basal_glucose, T::zero(), self.basal_insulin)
    }

    /// Unforced field `f(x)` (no insulin, no carbohydrate appearance).
    pub fn drift(&self, x: [T; 3]) -> [T; 3] {
        let [g, xa, i] = x;
        [
            -self.p1 * (g - self.basal_glucose) - xa * g,
            -self.p2 * xa + self.p3 * (i - self.basal_insulin),
            -self.n * i,
        ]
    }

    /// Input column for insulin rate (µU/min).
    pub fn insulin_gain(&self) -> [T; 3] {
        [T::zero(), T::zero(), T::one() / (T::of(100.0) * self.volume)]
    }

    /// Input column for carbohydrate appearance (mg/min).
    pub fn carb_gain(&self) -> [T; 3] {
        [T::one() / self.volume, T::zero(), T::zero()]
    }
}

impl BmmParams<f64> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The nominal patient plus four perturbed variants (five virtual subjects).
    pub fn virtual_cohort() -> Vec<Self> {
        // (insulin sensitivity scale, glucose effectiveness scale, meal time constant)
        const VARIANTS: [(f64, f64, f64); 5] = [
            (1.0, 1.0, 40.0),
            (0.8, 1.1, 45.0),
            (1.2, 0.9, 35.0),
            (0.9, 0.85, 50.0),
            (1.1, 1.15, 38.0),
        ];
        VARIANTS
            .iter()
            .map(|&(s_i, s_g, tau)| {
                let base = Self::default();
                Self {
                    p3: base.p3 * s_i,
                    p1: base.p1 * s_g,
                    tau_meal: tau,
                    ..base
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InputSample<T> {
    /// Total insulin delivery (controller plus external bolus), µU/min.
    pub insulin_rate: T,
    /// Carbohydrate appearance, mg/min.
    pub carb_rate: T,
}

impl<T: Scalar> InputSample<T> {
    pub fn new(insulin_rate: T, carb_rate: T) -> Self {
        Self {
            insulin_rate,
            carb_rate,
        }
    }
}

/// `f(x) + g_u u + g_c Ra`.
pub fn bmm_derivative<T: Scalar>(state: &PlantState<T>, params: &BmmParams<T>, input: &InputSample<T>) -> Result<[T; 3]> {
    if !state.is_finite() {
        return Err(Error::domain(format!("non-finite state {state:?}")));
    }
    if !input.insulin_rate.is_finite() || !input.carb_rate.is_finite() {
        return Err(Error::domain(format!("non-finite input {input:?}")));
    }
    Ok(field(state.to_array(), params, input))
}

fn field<T: Scalar>(x: [T; 3], params: &BmmParams<T>, input: &InputSample<T>) -> [T; 3] {
    let f = params.drift(x);
    let gu = params.insulin_gain();
    let gc = params.carb_gain();
    [
        f[0] + gu[0] * input.insulin_rate + gc[0] * input.carb_rate,
        f[1] + gu[1] * input.insulin_rate + gc[1] * input.carb_rate,
        f[2] + gu[2] * input.insulin_rate + gc[2] * input.carb_rate,
    ]
}

/// Carbohydrate appearance rate (mg/min) of a meal of `carbs_g` grams,
/// `t_since_meal` minutes after ingestion.
pub fn meal_appearance<T: Scalar>(carbs_g: T, t_since_meal: T, params: &BmmParams<T>) -> Result<T> {
    if !(carbs_g >= T::zero()) || !(t_since_meal >= T::zero()) {
        return Err(Error::domain(format!(
            "meal appearance needs carbs >= 0 and t >= 0, got {carbs_g}, {t_since_meal}"
        )));
    }
    let tau = params.tau_meal;
    let total_mg = carbs_g * T::of(1000.0) * params.bioavailability;
    let s = t_since_meal / tau;
    Ok(total_mg / tau * s * (-s).exp())
}

/// One classical RK4 step of `x' = rhs(x)`. On a non-finite stage the error
/// carries the 1-based stage index.
pub fn rk4<T: Scalar, const N: usize>(
    x: [T; N],
    dt: T,
    mut rhs: impl FnMut(&[T; N]) -> [T; N],
) -> std::result::Result<[T; N], usize> {
    let half = dt / T::of(2.0);
    let axpy = |a: &[T; N], k: &[T; N], h: T| {
        let mut out = *a;
        for (o, ki) in out.iter_mut().zip(k) {
            *o += h * *ki;
        }
        out
    };
    let finite = |v: &[T; N]| v.iter().all(|c| c.is_finite());

    let k1 = rhs(&x);
    if !finite(&k1) {
        return Err(1);
    }
    let k2 = rhs(&axpy(&x, &k1, half));
    if !finite(&k2) {
        return Err(2);
    }
    let k3 = rhs(&axpy(&x, &k2, half));
    if !finite(&k3) {
        return Err(3);
    }
    let k4 = rhs(&axpy(&x, &k3, dt));
    if !finite(&k4) {
        return Err(4);
    }
    let sixth = dt / T::of(6.0);
    let mut out = x;
    for i in 0..N {
        out[i] += sixth * (k1[i] + T::of(2.0) * (k2[i] + k3[i]) + k4[i]);
    }
    if !finite(&out) {
        return Err(5);
    }
    Ok(out)
}

/// Lower bounds applied after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateFloor<T> {
    pub glucose: T,
    pub plasma_insulin: T,
}

impl<T: Scalar> Default for StateFloor<T> {
    fn default() -> Self {
        Self {
            glucose: T::one(),
            plasma_insulin: T::zero(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<T> {
    pub state: PlantState<T>,
    /// Set when the floor had to be applied.
    pub clamped: bool,
}

/// RK4 advance with the input held over `[t, t + dt)`.
pub fn rk4_step<T: Scalar>(
    state: &PlantState<T>,
    params: &BmmParams<T>,
    input: &InputSample<T>,
    dt: T,
) -> Result<StepOutcome<T>> {
    rk4_step_with_floor(state, params, input, dt, &StateFloor::default())
}

pub fn rk4_step_with_floor<T: Scalar>(
    state: &PlantState<T>,
    params: &BmmParams<T>,
    input: &InputSample<T>,
    dt: T,
    floor: &StateFloor<T>,
) -> Result<StepOutcome<T>> {
    if !(dt > T::zero() && dt <= T::of(5.0)) {
        return Err(Error::domain(format!("dt must lie in (0, 5] min, got {dt}")));
    }
    bmm_derivative(state, params, input)?;
    let next = rk4(state.to_array(), dt, |x| field(*x, params, input))
        .map_err(|stage| Error::Integration { t_min: f64::NAN, stage })?;
    let mut out = PlantState::from_array(next);
    let mut clamped = false;
    if out.glucose < floor.glucose {
        out.glucose = floor.glucose;
        clamped = true;
    }
    if out.plasma_insulin < floor.plasma_insulin {
        out.plasma_insulin = floor.plasma_insulin;
        clamped = true;
    }
    Ok(StepOutcome { state: out, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> BmmParams<f64> {
        BmmParams::default()
    }

    #[test]
    fn basal_equilibrium_is_a_fixed_point_of_the_field() {
        let params = p();
        let d = bmm_derivative(&params.goal_state(), &params, &InputSample::new(params.basal_rate(), 0.0)).unwrap();
        for v in d {
            assert!(v.abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn derivative_is_affine_in_insulin() {
        let params = p();
        let s = PlantState::new(180.0, 0.02, 60.0);
        let g = params.insulin_gain();
        for &(u, du) in &[(0.0, 1000.0), (25_000.0, -3_000.0), (1e5, 7.5)] {
            let a = bmm_derivative(&s, &params, &InputSample::new(u, 50.0)).unwrap();
            let b = bmm_derivative(&s, &params, &InputSample::new(u + du, 50.0)).unwrap();
            for k in 0..3 {
                assert_relative_eq!(b[k] - a[k], g[k] * du, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn derivative_regression_value() {
        // dG = -0.0287 * 30 - 0.01 * 150 + 100 / 100
        // dX = -0.0283 * 0.01 + 1.007e-5 * 12
        // dI = -0.0926 * 40 + 30000 / 10000
        let d = bmm_derivative(&PlantState::new(150.0, 0.01, 40.0), &p(), &InputSample::new(30_000.0, 100.0)).unwrap();
        assert_relative_eq!(d[0], -1.361, epsilon = 1e-12);
        assert_relative_eq!(d[1], -1.6216e-4, epsilon = 1e-12);
        assert_relative_eq!(d[2], -0.704, epsilon = 1e-12);
    }

    #[test]
    fn derivative_rejects_non_finite() {
        let params = p();
        assert!(bmm_derivative(&PlantState::new(f64::NAN, 0.0, 0.0), &params, &InputSample::default()).is_err());
        assert!(bmm_derivative(&params.goal_state(), &params, &InputSample::new(f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn meal_appearance_edges_and_mass() {
        let params = p();
        assert_eq!(meal_appearance(0.0, 37.0, &params).unwrap(), 0.0);
        assert_eq!(meal_appearance(50.0, 0.0, &params).unwrap(), 0.0);
        assert!(meal_appearance(-1.0, 1.0, &params).is_err());
        assert!(meal_appearance(1.0, -1.0, &params).is_err());
        // Trapezoid rule over 12 h at 0.1 min.
        let h = 0.1;
        let n = (720.0 / h) as usize;
        let f = |k: usize| meal_appearance(60.0, k as f64 * h, &params).unwrap();
        let integral: f64 = (0..n).map(|k| 0.5 * h * (f(k) + f(k + 1))).sum();
        let expected = 60.0 * 1000.0 * params.bioavailability;
        assert!((integral - expected).abs() / expected < 0.01, "{integral} vs {expected}");
    }

    #[test]
    fn rk4_scalar_decay() {
        let x = rk4([1.0], 0.1, |s| [-s[0]]).unwrap();
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_single_step_order() {
        let err = |dt: f64| (rk4([1.0], dt, |s| [-s[0]]).unwrap()[0] - (-dt).exp()).abs();
        let ratio = err(0.2) / err(0.1);
        assert!((8.0..=32.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rk4_reports_failing_stage() {
        assert_eq!(rk4([1.0], 1.0, |_| [f64::NAN]), Err(1));
        assert_eq!(rk4([1.0], 1.0, |s| [if s[0] == 1.0 { 1.0 } else { f64::NAN }]), Err(2));
    }

    #[test]
    fn step_keeps_equilibrium() {
        let params = p();
        let s = params.goal_state();
        let out = rk4_step(&s, &params, &InputSample::new(params.basal_rate(), 0.0), 1.0).unwrap();
        assert!(!out.clamped);
        assert!((out.state.glucose - s.glucose).abs() < 1e-12);
        assert!(out.state.insulin_action.abs() < 1e-15);
        assert!((out.state.plasma_insulin - s.plasma_insulin).abs() < 1e-12);
    }

    #[test]
    fn step_matches_fine_euler() {
        let params = p();
        let s = PlantState::new(200.0, 0.01, 80.0);
        let input = InputSample::new(40_000.0, 300.0);
        let rk = rk4_step(&s, &params, &input, 1.0).unwrap().state.to_array();
        let mut x = s.to_array();
        let h = 1e-3;
        for _ in 0..1000 {
            let d = bmm_derivative(&PlantState::from_array(x), &params, &input).unwrap();
            for k in 0..3 {
                x[k] += h * d[k];
            }
        }
        for k in 0..3 {
            assert!((rk[k] - x[k]).abs() <= 1e-4 * x[k].abs().max(1e-6), "component {k}: {} vs {}", rk[k], x[k]);
        }
    }

    #[test]
    fn step_validates_dt_and_clamps() {
        let params = p();
        let s = params.goal_state();
        assert!(rk4_step(&s, &params, &InputSample::default(), 0.0).is_err());
        assert!(rk4_step(&s, &params, &InputSample::default(), 6.0).is_err());
        let floor = StateFloor {
            glucose: 200.0,
            plasma_insulin: 0.0,
        };
        let out = rk4_step_with_floor(&s, &params, &InputSample::default(), 5.0, &floor).unwrap();
        assert!(out.clamped);
        assert_eq!(out.state.glucose, 200.0);
        assert!(!rk4_step(&s, &params, &InputSample::default(), 5.0).unwrap().clamped);
    }

    #[test]
    fn params_validation_and_json_keys() {
        let mut bad = p();
        bad.p1 = -1.0;
        assert!(bad.validate().is_err());
        let json = serde_json::to_value(p()).unwrap();
        let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["Gb", "Ib", "V", "bioavailability", "n", "p1", "p2", "p3", "tau_meal"]);
        assert!(serde_json::from_str::<BmmParams<f64>>(r#"{"p1":1}"#).is_err());
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patient.json");
        let cohort = BmmParams::virtual_cohort();
        assert_eq!(cohort.len(), 5);
        cohort[2].save(&path).unwrap();
        assert_eq!(BmmParams::load(&path).unwrap(), cohort[2]);
    }

    #[test]
    fn f32_alias_agrees_with_f64() {
        let p32: BmmParams<f32> = BmmParams::default();
        let d = bmm_derivative(&PlantState::new(150.0f32, 0.01, 40.0), &p32, &InputSample::new(30_000.0, 100.0)).unwrap();
        assert!((d[0] - -1.361).abs() < 1e-5);
    }
}
