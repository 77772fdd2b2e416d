//! Zero-order Sugeno fuzzy inference with sigmoid memberships and min t-norm,
//! trained ANFIS-style (least squares for consequents, gradient descent for
//! premises).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stage};
use crate::scalar::{sigmoid, Scalar};

/// Default feature layout: mean CGM (mg/dL), insulin on board (U), carbs (g).
pub const DEFAULT_INPUT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidMf<T> {
    /// Slope, per input unit. Positive for "high", negative for "low".
    pub a: T,
    /// Center, input units.
    pub c: T,
}

impl<T: Scalar> SigmoidMf<T> {
    pub fn new(a: T, c: T) -> Self {
        Self { a, c }
    }

    pub fn eval(&self, x: T) -> T {
        sigmoid(self.a * (x - self.c))
    }

    /// `(∂A/∂a, ∂A/∂c)` at `x`.
    pub fn param_grad(&self, x: T) -> (T, T) {
        let v = self.eval(x);
        let s = v * (T::one() - v);
        (s * (x - self.c), -self.a * s)
    }

    pub fn is_increasing(&self) -> bool {
        self.a > T::zero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyRule<T> {
    pub premise: Vec<SigmoidMf<T>>,
    /// Singleton output, insulin units.
    pub consequent: T,
}

impl<T: Scalar> FuzzyRule<T> {
    /// Firing strength `min_j A_j(x_j)` and the index of the minimizing input.
    pub fn firing(&self, x: &[T]) -> (T, usize) {
        let mut best = T::infinity();
        let mut arg = 0;
        for (j, (mf, &xj)) in self.premise.iter().zip(x).enumerate() {
            let v = mf.eval(xj);
            if v < best {
                best = v;
                arg = j;
            }
        }
        (best, arg)
    }
}

/// Serialized as `{input_dim, rules: [{premise: [{a, c}...], consequent}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisModel<T> {
    pub input_dim: usize,
    pub rules: Vec<FuzzyRule<T>>,
}

impl<T: Scalar> FisModel<T> {
    pub fn new(input_dim: usize, rules: Vec<FuzzyRule<T>>) -> Result<Self> {
        let m = Self { input_dim, rules };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::domain("a fuzzy model needs at least one rule"));
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.premise.len() != self.input_dim {
                return Err(Error::domain(format!(
                    "rule {i} has {} premises, expected {}",
                    r.premise.len(),
                    self.input_dim
                )));
            }
            if r.premise.iter().any(|mf| !mf.a.is_finite() || mf.a == T::zero() || !mf.c.is_finite()) {
                return Err(Error::domain(format!("rule {i} has a zero or non-finite membership parameter")));
            }
            if !r.consequent.is_finite() {
                return Err(Error::domain(format!("rule {i} has a non-finite consequent")));
            }
        }
        Ok(())
    }

    pub fn consequent_range(&self) -> (T, T) {
        self.rules.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), r| {
            (lo.min(r.consequent), hi.max(r.consequent))
        })
    }

    /// Convert to another scalar type.
    pub fn cast<U: Scalar>(&self) -> FisModel<U> {
        FisModel {
            input_dim: self.input_dim,
            rules: self
                .rules
                .iter()
                .map(|r| FuzzyRule {
                    premise: r.premise.iter().map(|mf| SigmoidMf::new(U::of(mf.a.as_f64()), U::of(mf.c.as_f64()))).collect(),
                    consequent: U::of(r.consequent.as_f64()),
                })
                .collect(),
        }
    }
}

impl FisModel<f64> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Weighted average of singleton consequents by min-t-norm firing strengths.
pub fn fis_eval<T: Scalar>(model: &FisModel<T>, x: &[T]) -> Result<T> {
    if x.len() != model.input_dim {
        return Err(Error::domain(format!(
            "input has dimension {}, model expects {}",
            x.len(),
            model.input_dim
        )));
    }
    Ok(weighted_output(model, x))
}

pub(crate) fn weighted_output<T: Scalar>(model: &FisModel<T>, x: &[T]) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for r in &model.rules {
        let (w, _) = r.firing(x);
        num += w * r.consequent;
        den += w;
    }
    if den > T::zero() {
        num / den
    } else {
        log_domain_output(model, x)
    }
}

/// Fallback when every firing strength underflows: renormalize in log space.
fn log_domain_output<T: Scalar>(model: &FisModel<T>, x: &[T]) -> T {
    let log_sig = |z: T| -> T {
        if z >= T::zero() {
            -(T::one() + (-z).exp()).ln()
        } else {
            z - (T::one() + z.exp()).ln()
        }
    };
    let logw: Vec<T> = model
        .rules
        .iter()
        .map(|r| {
            r.premise
                .iter()
                .zip(x)
                .map(|(mf, &xj)| log_sig(mf.a * (xj - mf.c)))
                .fold(T::infinity(), T::min)
        })
        .collect();
    let top = logw.iter().copied().fold(T::neg_infinity(), T::max);
    let mut num = T::zero();
    let mut den = T::zero();
    for (r, &lw) in model.rules.iter().zip(&logw) {
        let w = (lw - top).exp();
        num += w * r.consequent;
        den += w;
    }
    num / den
}

/// Normalized firing strengths for one input.
pub fn normalized_firing(model: &FisModel<f64>, x: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = model.rules.iter().map(|r| r.firing(x).0).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / w.len() as f64; w.len()]
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    /// [mean CGM mg/dL, IOB U, carbs g]
    pub features: [f64; 3],
    pub event: Option<String>,
    /// Observed bolus, U.
    pub bolus: f64,
}

impl ActionRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.bolus >= 0.0) || self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("invalid action record {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ActionRow {
    mean_cgm: f64,
    iob: f64,
    carbs: f64,
    event: String,
    bolus: f64,
}

/// Training data CSV `mean_cgm,iob,carbs,event,bolus`; empty `event` means none.
pub fn write_action_csv<W: Write>(records: &[ActionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(ActionRow {
            mean_cgm: r.features[0],
            iob: r.features[1],
            carbs: r.features[2],
            event: r.event.clone().unwrap_or_default(),
            bolus: r.bolus,
        })?;
    }
    w.flush().map_err(|e| Error::io("<action csv>", e))
}

pub fn read_action_csv<R: Read>(input: R) -> Result<Vec<ActionRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (line, row) in rd.deserialize::<ActionRow>().enumerate() {
        match row {
            Ok(r) => {
                let rec = ActionRecord {
                    features: [r.mean_cgm, r.iob, r.carbs],
                    event: (!r.event.is_empty()).then_some(r.event),
                    bolus: r.bolus,
                };
                match rec.validate() {
                    Ok(()) => out.push(rec),
                    Err(e) => bad.push(format!("line {}: {e}", line + 2)),
                }
            }
            Err(e) => bad.push(format!("line {}: {e}", line + 2)),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Ingestion(bad));
    }
    Ok(out)
}

/// Insulin on board with a linear decay over `duration` minutes.
pub fn iob(dose_history: &[(f64, f64)], now: f64, duration: f64) -> Result<f64> {
    if !(duration > 0.0) {
        return Err(Error::domain("insulin action duration must be > 0"));
    }
    let mut total = 0.0;
    for &(t, units) in dose_history {
        if t > now {
            log::warn!("ignoring dose at t = {t} after now = {now}");
            continue;
        }
        total += units * (1.0 - (now - t) / duration).max(0.0);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Gradients

/// Mean squared error of the model on `(x, y)` pairs.
pub fn mse(model: &FisModel<f64>, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let n = xs.len().max(1) as f64;
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| {
            let e = weighted_output(model, x) - y;
            e * e
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`mse`] with respect to every rule's premise parameters,
/// `grad[i][j] = (∂/∂a_ij, ∂/∂c_ij)`. The min t-norm routes each rule's
/// gradient to its minimizing input only.
pub fn premise_gradient(model: &FisModel<f64>, xs: &[Vec<f64>], ys: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let mut grad = vec![vec![(0.0, 0.0); model.input_dim]; model.rules.len()];
    let n = xs.len().max(1) as f64;
    let mut fired = Vec::with_capacity(model.rules.len());
    for (x, &y) in xs.iter().zip(ys) {
        fired.clear();
        fired.extend(model.rules.iter().map(|r| r.firing(x)));
        let s: f64 = fired.iter().map(|f| f.0).sum();
        if s <= 0.0 {
            continue;
        }
        let out = fired.iter().zip(&model.rules).map(|(f, r)| f.0 * r.consequent).sum::<f64>() / s;
        let scale = 2.0 * (out - y) / n;
        for (i, (r, &(_, j))) in model.rules.iter().zip(&fired).enumerate() {
            let d_out_d_w = (r.consequent - out) / s;
            let (da, dc) = r.premise[j].param_grad(x[j]);
            grad[i][j].0 += scale * d_out_d_w * da;
            grad[i][j].1 += scale * d_out_d_w * dc;
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnfisConfig {
    pub rules_per_dim: usize,
    pub epochs: usize,
    /// Step size for premise updates in standardized input coordinates.
    pub lr: f64,
    pub seed: u64,
    pub train_fraction: f64,
    /// When set, append one one-hot feature per label for the record's event.
    pub event_labels: Option<Vec<String>>,
}

impl Default for AnfisConfig {
    fn default() -> Self {
        Self {
            rules_per_dim: 2,
            epochs: 200,
            lr: 0.05,
            seed: 0,
            train_fraction: 0.8,
            event_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnfisOutcome {
    pub model: FisModel<f64>,
    pub train_rmse: f64,
    pub test_rmse: f64,
    /// Training RMSE after each epoch's least-squares pass.
    pub history: Vec<f64>,
    /// RMSE of the best constant predictor on the training split.
    pub constant_rmse: f64,
    /// Set when some input had zero spread, so its premises get no gradient.
    pub zero_premise_gradient: bool,
    pub n_train: usize,
    pub n_test: usize,
}

/// Shared membership functions of a grid rule base, in standardized inputs.
struct Grid {
    /// mfs[j][k]: k-th membership of input j.
    mfs: Vec<Vec<SigmoidMf<f64>>>,
    /// rule -> mf index per input
    index: Vec<Vec<usize>>,
}

impl Grid {
    fn new(dim: usize, m: usize) -> Self {
        let per_dim: Vec<SigmoidMf<f64>> = (0..m)
            .map(|k| {
                if m == 1 {
                    return SigmoidMf::new(1.0, 0.0);
                }
                if m == 2 {
                    return SigmoidMf::new(if k == 0 { -2.0 } else { 2.0 }, 0.0);
                }
                let c = -1.5 + 3.0 * (k as f64 + 0.5) / m as f64;
                let slope = 2.0 * m as f64 / 2.0;
                SigmoidMf::new(if 2 * k + 1 < m { -slope } else { slope }, c)
            })
            .collect();
        let mfs = vec![per_dim; dim];
        let mut index = vec![Vec::new()];
        for _ in 0..dim {
            index = index
                .into_iter()
                .flat_map(|prefix: Vec<usize>| {
                    (0..m).map(move |k| {
                        let mut p = prefix.clone();
                        p.push(k);
                        p
                    })
                })
                .collect();
        }
        Self { mfs, index }
    }

    fn model(&self, consequents: &[f64]) -> FisModel<f64> {
        FisModel {
            input_dim: self.mfs.len(),
            rules: self
                .index
                .iter()
                .zip(consequents)
                .map(|(idx, &b)| FuzzyRule {
                    premise: idx.iter().enumerate().map(|(j, &k)| self.mfs[j][k]).collect(),
                    consequent: b,
                })
                .collect(),
        }
    }
}

fn least_squares_consequents(model: &FisModel<f64>, xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let r = model.rules.len();
    let rows: Vec<Vec<f64>> = xs.iter().map(|x| normalized_firing(model, x)).collect();
    let a = DMatrix::from_fn(xs.len(), r, |i, k| rows[i][k]);
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    match svd.solve(&b, 1e-12) {
        Ok(sol) => sol.iter().copied().collect(),
        Err(_) => vec![ys.iter().sum::<f64>() / ys.len() as f64; r],
    }
}

fn features(record: &ActionRecord, config: &AnfisConfig) -> Vec<f64> {
    let mut f = record.features.to_vec();
    if let Some(labels) = &config.event_labels {
        for l in labels {
            f.push((record.event.as_deref() == Some(l.as_str())) as u8 as f64);
        }
    }
    f
}

fn rmse(model: &FisModel<f64>, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    mse(model, xs, ys).sqrt()
}

/// Hybrid ANFIS training on a seeded 80/20 split.
pub fn anfis_train(data: &[ActionRecord], config: &AnfisConfig) -> Result<AnfisOutcome> {
    if data.len() < 10 {
        return Err(Error::domain("ANFIS training needs at least 10 records"));
    }
    if config.rules_per_dim == 0 {
        return Err(Error::domain("rules_per_dim must be >= 1"));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::domain("train_fraction must lie in (0, 1)"));
    }
    for r in data {
        r.validate()?;
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, Stage::FisData, 0));
    let n_train = ((data.len() as f64) * config.train_fraction).round() as usize;
    let (train_idx, test_idx) = order.split_at(n_train.clamp(1, data.len() - 1));

    let raw = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            idx.iter().map(|&i| features(&data[i], config)).collect(),
            idx.iter().map(|&i| data[i].bolus).collect(),
        )
    };
    let (train_x, train_y) = raw(train_idx);
    let (test_x, test_y) = raw(test_idx);
    let dim = train_x[0].len();

    // Standardize with training statistics.
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for x in &train_x {
        for j in 0..dim {
            mean[j] += x[j] / train_x.len() as f64;
        }
    }
    for x in &train_x {
        for j in 0..dim {
            sd[j] += (x[j] - mean[j]).powi(2) / train_x.len() as f64;
        }
    }
    let mut zero_premise_gradient = false;
    for s in sd.iter_mut() {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
            zero_premise_gradient = true;
        }
    }
    if zero_premise_gradient {
        log::warn!("constant input feature: its premise parameters receive no gradient");
    }
    let standardize = |x: &Vec<f64>| -> Vec<f64> { x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let zx: Vec<Vec<f64>> = train_x.iter().map(standardize).collect();

    let y_mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
    let constant_rmse = (train_y.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / train_y.len() as f64).sqrt();

    let mut grid = Grid::new(dim, config.rules_per_dim);
    let mut consequents = vec![y_mean; grid.index.len()];
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        consequents = least_squares_consequents(&grid.model(&consequents), &zx, &train_y);
        let model = grid.model(&consequents);
        history.push(rmse(&model, &zx, &train_y));
        let g = premise_gradient(&model, &zx, &train_y);
        let mut shared = vec![vec![(0.0, 0.0); config.rules_per_dim]; dim];
        for (rule, gi) in grid.index.iter().zip(&g) {
            for j in 0..dim {
                shared[j][rule[j]].0 += gi[j].0;
                shared[j][rule[j]].1 += gi[j].1;
            }
        }
        for j in 0..dim {
            for k in 0..config.rules_per_dim {
                let mf = &mut grid.mfs[j][k];
                let a = mf.a - config.lr * shared[j][k].0;
                // Keep the membership orientation; a zero slope is not a valid sigmoid.
                mf.a = if a.signum() == mf.a.signum() && a.abs() > 1e-3 { a } else { mf.a.signum() * 1e-3 };
                mf.c -= config.lr * shared[j][k].1;
            }
        }
    }
    consequents = least_squares_consequents(&grid.model(&consequents), &zx, &train_y);
    let zmodel = grid.model(&consequents);

    // Map back to raw input units: a' = a / sd, c' = mean + sd c.
    let model = FisModel {
        input_dim: dim,
        rules: zmodel
            .rules
            .iter()
            .map(|r| FuzzyRule {
                premise: r
                    .premise
                    .iter()
                    .enumerate()
                    .map(|(j, mf)| SigmoidMf::new(mf.a / sd[j], mean[j] + sd[j] * mf.c))
                    .collect(),
                consequent: r.consequent,
            })
            .collect(),
    };
    model.validate()?;
    Ok(AnfisOutcome {
        train_rmse: rmse(&model, &train_x, &train_y),
        test_rmse: rmse(&model, &test_x, &test_y),
        model,
        history,
        constant_rmse,
        zero_premise_gradient,
        n_train: train_x.len(),
        n_test: test_x.len(),
    })
}
