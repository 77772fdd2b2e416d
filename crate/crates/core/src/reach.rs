//! Guaranteed enclosure of fuzzy-model outputs over an input box, and the
//! rule-per-mode hybrid automaton view of a fuzzy model.
//!
//! Each sub-box is bounded in interval arithmetic: sigmoid memberships are
//! monotone so their range is spanned by the endpoint values, firing strengths
//! take the interval min, and the weighted-average quotient is bounded both by
//! the interval quotient `Σ[w]B / Σ[w]` and by the exact extremes of the
//! linear-fractional map over the weight box. The result is the hull over all
//! sub-boxes, widened outward by a few ulps to absorb rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fis::{weighted_output, FisModel, SigmoidMf};
use crate::scalar::Scalar;

/// Outward rounding applied to final bounds, in units of machine epsilon.
const OUTWARD_ULPS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::domain("interval bounds must be finite"));
        }
        if lo > hi {
            return Err(Error::domain(format!("interval lower bound {lo} exceeds upper bound {hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: T) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> T {
        self.hi - self.lo
    }

    pub fn mid(&self) -> T {
        self.lo + (self.hi - self.lo) / T::of(2.0)
    }

    pub fn contains(&self, v: T) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    pub fn hull(&self, other: &Self) -> Self {
        Self {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn intersect(&self, other: &Self) -> Option<Self> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Self { lo, hi })
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            lo: self.lo + other.lo,
            hi: self.hi + other.hi,
        }
    }

    pub fn scale(&self, k: T) -> Self {
        if k >= T::zero() {
            Self {
                lo: self.lo * k,
                hi: self.hi * k,
            }
        } else {
            Self {
                lo: self.hi * k,
                hi: self.lo * k,
            }
        }
    }

    /// Quotient by a strictly positive interval.
    pub fn div_positive(&self, d: &Self) -> Option<Self> {
        if !(d.lo > T::zero()) {
            return None;
        }
        let c = [self.lo / d.lo, self.lo / d.hi, self.hi / d.lo, self.hi / d.hi];
        Some(Self {
            lo: c.iter().copied().fold(T::infinity(), T::min),
            hi: c.iter().copied().fold(T::neg_infinity(), T::max),
        })
    }

    /// Range of a monotone sigmoid membership over this interval.
    pub fn membership(&self, mf: &SigmoidMf<T>) -> Self {
        let (a, b) = (mf.eval(self.lo), mf.eval(self.hi));
        Self { lo: a.min(b), hi: a.max(b) }
    }

    fn widen(&self, ulps: T) -> Self {
        let eps = T::epsilon() * ulps;
        Self {
            lo: self.lo - eps * self.lo.abs().max(T::one()),
            hi: self.hi + eps * self.hi.abs().max(T::one()),
        }
    }
}

/// Axis-aligned box of closed intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputBox<T> {
    pub dims: Vec<Interval<T>>,
}

impl<T: Scalar> InputBox<T> {
    pub fn new(bounds: &[(T, T)]) -> Result<Self> {
        Ok(Self {
            dims: bounds.iter().map(|&(lo, hi)| Interval::new(lo, hi)).collect::<Result<_>>()?,
        })
    }

    pub fn point(x: &[T]) -> Self {
        Self {
            dims: x.iter().map(|&v| Interval::point(v)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.dims {
            Interval::new(d.lo, d.hi)?;
        }
        Ok(())
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dims.len() && self.dims.iter().zip(x).all(|(d, &v)| d.contains(v))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims.len() == other.dims.len() && self.dims.iter().zip(&other.dims).all(|(a, b)| a.is_subset_of(b))
    }

    /// Piece `k` of `parts` equal pieces along dimension `j`. Cut points are
    /// computed as `lo + (w k) / parts`, so refining `parts` by a factor of two
    /// reproduces the coarse cut points bit-exactly.
    fn piece(&self, j: usize, k: usize, parts: usize) -> Interval<T> {
        let d = self.dims[j];
        let w = d.hi - d.lo;
        let cut = |m: usize| {
            if m == 0 {
                d.lo
            } else if m == parts {
                d.hi
            } else {
                d.lo + (w * T::of(m as f64)) / T::of(parts as f64)
            }
        };
        Interval { lo: cut(k), hi: cut(k + 1) }
    }

    /// Uniform grid of `parts^dim` sub-boxes.
    pub fn subdivide(&self, parts: usize) -> impl Iterator<Item = InputBox<T>> + '_ {
        let dim = self.dims.len();
        let total = parts.pow(dim as u32);
        (0..total).map(move |mut idx| {
            let mut dims = Vec::with_capacity(dim);
            for j in (0..dim).rev() {
                dims.push(self.piece(j, idx % parts, parts));
                idx /= parts;
            }
            dims.reverse();
            InputBox { dims }
        })
    }
}

// ---------------------------------------------------------------------------
// Hybrid automaton

/// Per-mode flow: the defuzzification contribution of one rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFlow<T> {
    pub premise: Vec<SigmoidMf<T>>,
    pub consequent: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode<T> {
    pub name: String,
    pub flow: ModeFlow<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Guard {
    /// Fires immediately and unconditionally.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    pub guard: Guard,
    /// Zero dwell time in the source mode.
    pub instantaneous: bool,
}

/// `(Q, V, F, Inv)`: one mode per rule, variables are the model inputs, flows
/// accumulate the rule's weighted contribution, and the mode chain advances
/// through instantaneous default transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridAutomaton<T> {
    pub variables: Vec<String>,
    pub modes: Vec<Mode<T>>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution<T> {
    /// Modes in visiting order.
    pub path: Vec<usize>,
    /// Accumulated `(Σ w B, Σ w)` after each mode.
    pub accumulators: Vec<(T, T)>,
    pub output: T,
}

pub fn fis_to_hybrid<T: Scalar>(model: &FisModel<T>) -> HybridAutomaton<T> {
    let modes: Vec<Mode<T>> = model
        .rules
        .iter()
        .enumerate()
        .map(|(i, r)| Mode {
            name: format!("R{i}"),
            flow: ModeFlow {
                premise: r.premise.clone(),
                consequent: r.consequent,
            },
        })
        .collect();
    let transitions = (1..modes.len())
        .map(|i| Transition {
            from: i - 1,
            to: i,
            guard: Guard::Always,
            instantaneous: true,
        })
        .collect();
    HybridAutomaton {
        variables: (0..model.input_dim).map(|j| format!("x{j}")).collect(),
        modes,
        transitions,
    }
}

impl<T: Scalar> HybridAutomaton<T> {
    /// Guard of the transition leaving `mode`, if any.
    pub fn guard_from(&self, mode: usize) -> Option<Guard> {
        self.transitions.iter().find(|t| t.from == mode).map(|t| t.guard)
    }

    /// Run the automaton on a point input; the final output is the
    /// defuzzified value.
    pub fn execute(&self, x: &[T]) -> Result<Execution<T>> {
        if x.len() != self.variables.len() {
            return Err(Error::domain(format!(
                "input has dimension {}, automaton has {} variables",
                x.len(),
                self.variables.len()
            )));
        }
        let mut path = Vec::with_capacity(self.modes.len());
        let mut accumulators = Vec::with_capacity(self.modes.len());
        let (mut num, mut den) = (T::zero(), T::zero());
        let mut mode = 0;
        loop {
            let flow = &self.modes[mode].flow;
            let w = flow
                .premise
                .iter()
                .zip(x)
                .map(|(mf, &xj)| mf.eval(xj))
                .fold(T::infinity(), T::min);
            num += w * flow.consequent;
            den += w;
            path.push(mode);
            accumulators.push((num, den));
            match self.transitions.iter().find(|t| t.from == mode) {
                Some(t) => match t.guard {
                    Guard::Always => mode = t.to,
                },
                None => break,
            }
        }
        let output = if den > T::zero() {
            num / den
        } else {
            // Every firing strength underflowed; defer to the log-domain evaluation.
            weighted_output(&self.as_model(), x)
        };
        Ok(Execution {
            path,
            accumulators,
            output,
        })
    }

    fn as_model(&self) -> FisModel<T> {
        FisModel {
            input_dim: self.variables.len(),
            rules: self
                .modes
                .iter()
                .map(|m| crate::fis::FuzzyRule {
                    premise: m.flow.premise.clone(),
                    consequent: m.flow.consequent,
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Enclosure

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enclosure<T> {
    pub u_lo: T,
    pub u_hi: T,
    /// Pieces per input dimension.
    pub subdivisions: usize,
    /// False when a sub-box fell back to the consequent hull.
    pub certified: bool,
}

impl<T: Scalar> Enclosure<T> {
    pub fn interval(&self) -> Interval<T> {
        Interval {
            lo: self.u_lo,
            hi: self.u_hi,
        }
    }

    pub fn width(&self) -> T {
        self.u_hi - self.u_lo
    }

    pub fn contains(&self, v: T) -> bool {
        self.u_lo <= v && v <= self.u_hi
    }
}

/// JSON report `{box, subdivisions, u_lo, u_hi}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnclosureReport {
    #[serde(rename = "box")]
    pub input_box: Vec<[f64; 2]>,
    pub subdivisions: usize,
    pub u_lo: f64,
    pub u_hi: f64,
}

impl EnclosureReport {
    pub fn new(input_box: &InputBox<f64>, enclosure: &Enclosure<f64>) -> Self {
        Self {
            input_box: input_box.dims.iter().map(|d| [d.lo, d.hi]).collect(),
            subdivisions: enclosure.subdivisions,
            u_lo: enclosure.u_lo,
            u_hi: enclosure.u_hi,
        }
    }
}

/// Exact extremes of `Σ w_i B_i / Σ w_i` over `w_i ∈ [lo_i, hi_i]`, all
/// `lo_i >= 0` and `Σ hi_i > 0`. The optimum puts every weight at an endpoint
/// with a threshold on `B`, so scanning the thresholds over the sorted
/// consequents is exhaustive.
fn fractional_bounds<T: Scalar>(weights: &[Interval<T>], b: &[T]) -> Option<Interval<T>> {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&i, &j| b[i].partial_cmp(&b[j]).unwrap_or(std::cmp::Ordering::Equal));
    let n = order.len();
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for k in 0..=n {
        // Max candidate: ranks >= k at their upper weight; min candidate: ranks < k.
        let (mut num_max, mut den_max, mut num_min, mut den_min) = (T::zero(), T::zero(), T::zero(), T::zero());
        for (rank, &i) in order.iter().enumerate() {
            let (w_max, w_min) = if rank >= k {
                (weights[i].hi, weights[i].lo)
            } else {
                (weights[i].lo, weights[i].hi)
            };
            num_max += w_max * b[i];
            den_max += w_max;
            num_min += w_min * b[i];
            den_min += w_min;
        }
        if den_max > T::zero() {
            hi = hi.max(num_max / den_max);
        }
        if den_min > T::zero() {
            lo = lo.min(num_min / den_min);
        }
    }
    (lo <= hi).then_some(Interval { lo, hi })
}

fn enclose_box<T: Scalar>(model: &FisModel<T>, sub: &InputBox<T>, hull_b: Interval<T>) -> (Interval<T>, bool) {
    let weights: Vec<Interval<T>> = model
        .rules
        .iter()
        .map(|r| {
            r.premise
                .iter()
                .zip(&sub.dims)
                .map(|(mf, d)| d.membership(mf))
                .fold(Interval::point(T::infinity()), |acc, m| Interval {
                    lo: acc.lo.min(m.lo),
                    hi: acc.hi.min(m.hi),
                })
        })
        .collect();
    let b: Vec<T> = model.rules.iter().map(|r| r.consequent).collect();
    let num = weights
        .iter()
        .zip(&b)
        .fold(Interval::point(T::zero()), |acc, (w, &bi)| acc.add(&w.scale(bi)));
    let den = weights.iter().fold(Interval::point(T::zero()), |acc, w| acc.add(w));
    let Some(quotient) = num.div_positive(&den) else {
        return (hull_b, false);
    };
    let mut out = quotient.intersect(&hull_b).unwrap_or(hull_b);
    if let Some(exact) = fractional_bounds(&weights, &b) {
        out = out.intersect(&exact).unwrap_or(exact);
    }
    (out, true)
}

/// Guaranteed over-approximation of `{ fis_eval(model, x) : x ∈ box }` using
/// `subdivisions` pieces per dimension.
pub fn enclose_output<T: Scalar>(model: &FisModel<T>, input_box: &InputBox<T>, subdivisions: usize) -> Result<Enclosure<T>> {
    model.validate()?;
    input_box.validate()?;
    if input_box.dim() != model.input_dim {
        return Err(Error::domain(format!(
            "box has dimension {}, model expects {}",
            input_box.dim(),
            model.input_dim
        )));
    }
    if subdivisions == 0 {
        return Err(Error::domain("subdivisions must be >= 1"));
    }
    let (b_lo, b_hi) = model.consequent_range();
    let hull_b = Interval { lo: b_lo, hi: b_hi };
    let mut acc: Option<Interval<T>> = None;
    let mut certified = true;
    for sub in input_box.subdivide(subdivisions) {
        let (iv, ok) = enclose_box(model, &sub, hull_b);
        certified &= ok;
        acc = Some(acc.map_or(iv, |a| a.hull(&iv)));
    }
    let out = acc.expect("at least one sub-box").widen(T::of(OUTWARD_ULPS));
    Ok(Enclosure {
        u_lo: out.lo,
        u_hi: out.hi,
        subdivisions,
        certified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fis::{fis_eval, FuzzyRule};
    use crate::rng::{self, Stage};
    use rand::Rng;

    fn random_model<R: Rng>(rng: &mut R, rules: usize, dim: usize) -> FisModel<f64> {
        FisModel::new(
            dim,
            (0..rules)
                .map(|_| FuzzyRule {
                    premise: (0..dim)
                        .map(|_| {
                            let a = rng.gen_range(0.2..3.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                            SigmoidMf::new(a, rng.gen_range(-1.0..1.0))
                        })
                        .collect(),
                    consequent: rng.gen_range(-2.0..10.0),
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_box<R: Rng>(rng: &mut R, dim: usize) -> InputBox<f64> {
        let b: Vec<(f64, f64)> = (0..dim)
            .map(|_| {
                let lo = rng.gen_range(-2.0..1.0);
                (lo, lo + rng.gen_range(0.0..2.0))
            })
            .collect();
        InputBox::new(&b).unwrap()
    }

    #[test]
    fn interval_basics() {
        assert!(Interval::new(2.0, 1.0).is_err());
        assert!(Interval::new(f64::NAN, 1.0).is_err());
        let a = Interval::new(-1.0, 2.0).unwrap();
        assert_eq!(a.scale(-2.0), Interval::new(-4.0, 2.0).unwrap());
        assert_eq!(a.div_positive(&Interval::new(1.0, 2.0).unwrap()), Some(Interval::new(-1.0, 2.0).unwrap()));
        assert_eq!(a.div_positive(&Interval::new(0.0, 2.0).unwrap()), None);
        assert_eq!(a.hull(&Interval::point(5.0)), Interval::new(-1.0, 5.0).unwrap());
        assert!(a.intersect(&Interval::point(7.0)).is_none());
    }

    #[test]
    fn subdivision_covers_the_box() {
        let b = InputBox::new(&[(0.0, 1.0), (10.0, 13.0)]).unwrap();
        let parts: Vec<_> = b.subdivide(3).collect();
        assert_eq!(parts.len(), 9);
        assert!(parts.iter().all(|p| p.is_subset_of(&b)));
        let area: f64 = parts.iter().map(|p| p.dims[0].width() * p.dims[1].width()).sum();
        assert!((area - 3.0).abs() < 1e-12);
    }

    #[test]
    fn automaton_structure() {
        let mut rng = rng::stream(1, Stage::FisData, 0);
        let m = random_model(&mut rng, 8, 3);
        let h = fis_to_hybrid(&m);
        assert_eq!(h.modes.len(), 8);
        assert_eq!(h.variables.len(), 3);
        assert_eq!(h.transitions.len(), 7);
        for t in &h.transitions {
            assert_eq!(t.guard, Guard::Always);
            assert!(t.instantaneous);
        }
        assert_eq!(h.guard_from(0), Some(Guard::Always));
        assert_eq!(h.guard_from(7), None);
    }

    #[test]
    fn automaton_reproduces_fis_eval_exactly() {
        let mut rng = rng::stream(2, Stage::FisData, 0);
        let m = random_model(&mut rng, 8, 3);
        let h = fis_to_hybrid(&m);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let run = h.execute(&x).unwrap();
            assert_eq!(run.output, fis_eval(&m, &x).unwrap());
            assert_eq!(run.path, (0..8).collect::<Vec<_>>());
        }
        assert!(h.execute(&[0.0]).is_err());
    }

    #[test]
    fn point_box_is_tight() {
        let mut rng = rng::stream(3, Stage::FisData, 0);
        let m = random_model(&mut rng, 4, 3);
        let x = [0.3, -0.2, 0.9];
        let e = enclose_output(&m, &InputBox::point(&x), 1).unwrap();
        assert!(e.contains(fis_eval(&m, &x).unwrap()));
        assert!(e.width() <= 1e-9);
        assert!(e.certified);
    }

    #[test]
    fn sampled_outputs_stay_inside_and_bounds_nest() {
        let mut rng = rng::stream(4, Stage::FisData, 0);
        for _ in 0..5 {
            let m = random_model(&mut rng, 8, 3);
            let big = random_box(&mut rng, 3);
            let e8 = enclose_output(&m, &big, 8).unwrap();
            let e4 = enclose_output(&m, &big, 4).unwrap();
            let e16 = enclose_output(&m, &big, 16).unwrap();
            assert!(e16.width() <= e8.width() && e8.width() <= e4.width());
            let (blo, bhi) = m.consequent_range();
            assert!(e8.u_lo >= blo - 1e-12 && e8.u_hi <= bhi + 1e-12);
            for _ in 0..10_000 {
                let x: Vec<f64> = big.dims.iter().map(|d| d.lo + rng.gen::<f64>() * d.width()).collect();
                assert!(e8.contains(fis_eval(&m, &x).unwrap()));
            }
            // A sub-box encloses within the parent's enclosure at the same resolution.
            let inner = InputBox {
                dims: big.dims.iter().map(|d| Interval::new(d.lo, d.mid()).unwrap()).collect(),
            };
            assert!(enclose_output(&m, &inner, 4).unwrap().interval().is_subset_of(&enclose_output(&m, &big, 8).unwrap().interval()));
        }
    }

    #[test]
    fn enclosure_input_errors() {
        let mut rng = rng::stream(5, Stage::FisData, 0);
        let m = random_model(&mut rng, 2, 3);
        assert!(enclose_output(&m, &InputBox::new(&[(0.0, 1.0)]).unwrap(), 4).is_err());
        assert!(enclose_output(&m, &InputBox::point(&[0.0; 3]), 0).is_err());
        assert!(InputBox::new(&[(0.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn report_json_keys() {
        let mut rng = rng::stream(6, Stage::FisData, 0);
        let m = random_model(&mut rng, 2, 1);
        let b = InputBox::new(&[(0.0, 1.0)]).unwrap();
        let r = EnclosureReport::new(&b, &enclose_output(&m, &b, 2).unwrap());
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(keys, vec!["box", "subdivisions", "u_hi", "u_lo"]);
    }
}
