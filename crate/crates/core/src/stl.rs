//! Temporal-logic safety monitors and glycemic metrics over traces.
//!
//! The safe range is closed: samples equal to `lo` or `hi` are in range.

use serde::{Deserialize, Serialize};

use crate::clbf::SafeSet;
use crate::error::{Error, Result};
use crate::sim::Trace;

pub const HYPO_THRESHOLD: f64 = 70.0;
pub const HYPER_THRESHOLD: f64 = 180.0;
/// Minimum duration of a below-range run counted as a hypoglycemic event.
pub const HYPO_EVENT_MIN: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StlMode {
    /// In range from some time onward.
    Eventual,
    /// In range at every sample.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlSpec {
    pub lo: f64,
    pub hi: f64,
    pub mode: StlMode,
}

impl Default for StlSpec {
    fn default() -> Self {
        Self {
            lo: HYPO_THRESHOLD,
            hi: HYPER_THRESHOLD,
            mode: StlMode::Eventual,
        }
    }
}

impl StlSpec {
    pub fn new(lo: f64, hi: f64, mode: StlMode) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::domain(format!("safe range requires lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, mode })
    }

    /// Signed distance to the range boundary, positive inside.
    pub fn margin(&self, g: f64) -> f64 {
        (g - self.lo).min(self.hi - g)
    }

    pub fn in_range(&self, g: f64) -> bool {
        self.lo <= g && g <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorResult {
    pub satisfied: bool,
    /// Minutes from the trace start after which every sample is in range.
    pub tau_min: Option<f64>,
    pub robustness: f64,
}

/// Boolean monitor for the eventual (or always) shape of `spec`.
pub fn monitor_eventual_safety(trace: &Trace, spec: &StlSpec) -> MonitorResult {
    let g: Vec<f64> = trace.glucose().collect();
    // First index of the in-range suffix.
    let start = g.iter().rposition(|&v| !spec.in_range(v)).map_or(0, |i| i + 1);
    let tau_index = match spec.mode {
        StlMode::Eventual => (start < g.len()).then_some(start),
        StlMode::Always => (start == 0).then_some(0),
    };
    MonitorResult {
        satisfied: tau_index.is_some(),
        tau_min: tau_index.map(|k| trace.time(k)),
        robustness: robustness(trace, spec),
    }
}

/// Quantitative semantics: the worst margin (always) or the best suffix worst margin (eventual).
pub fn robustness(trace: &Trace, spec: &StlSpec) -> f64 {
    let margins: Vec<f64> = trace.glucose().map(|g| spec.margin(g)).collect();
    match spec.mode {
        StlMode::Always => margins.iter().copied().fold(f64::INFINITY, f64::min),
        StlMode::Eventual => {
            let mut best = f64::NEG_INFINITY;
            let mut suffix_min = f64::INFINITY;
            for &m in margins.iter().rev() {
                suffix_min = suffix_min.min(m);
                best = best.max(suffix_min);
            }
            best
        }
    }
}

/// Fraction of trajectories whose every sample lies in `set` (glucose,
/// insulin action and plasma insulin checked against the box).
pub fn empirical_fi(trajectories: &[Trace], set: &SafeSet) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::domain("no trajectories"));
    }
    let mut inside = 0usize;
    for (i, tr) in trajectories.iter().enumerate() {
        let first = tr.samples()[0].state.to_array();
        if !set.contains(&first) {
            return Err(Error::domain(format!("trajectory {i} starts outside the safe set")));
        }
        if tr.samples().iter().all(|s| set.contains(&s.state.to_array())) {
            inside += 1;
        }
    }
    Ok(inside as f64 / trajectories.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GlycemicMetrics {
    pub pct_below_70: f64,
    pub pct_in_range: f64,
    pub pct_above_180: f64,
    pub hypo_events: usize,
}

pub fn glycemic_metrics(trace: &Trace) -> GlycemicMetrics {
    let n = trace.len() as f64;
    let (mut below, mut above) = (0usize, 0usize);
    let mut events = 0;
    let mut run = 0usize;
    let min_run = (HYPO_EVENT_MIN / trace.dt()).ceil().max(1.0) as usize;
    for g in trace.glucose() {
        if g < HYPO_THRESHOLD {
            below += 1;
            run += 1;
            if run == min_run {
                events += 1;
            }
        } else {
            run = 0;
            if g > HYPER_THRESHOLD {
                above += 1;
            }
        }
    }
    let pct_below_70 = 100.0 * below as f64 / n;
    let pct_above_180 = 100.0 * above as f64 / n;
    GlycemicMetrics {
        pct_below_70,
        pct_in_range: 100.0 - pct_below_70 - pct_above_180,
        pct_above_180,
        hypo_events: events,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(g: &[f64]) -> Trace {
        Trace::from_glucose(5.0, g).unwrap()
    }

    #[test]
    fn constant_in_range() {
        let t = tr(&[120.0; 10]);
        let r = monitor_eventual_safety(&t, &StlSpec::default());
        assert!(r.satisfied);
        assert_eq!(r.tau_min, Some(0.0));
        assert_eq!(robustness(&t, &StlSpec::default()), 50.0);
        let m = glycemic_metrics(&t);
        assert_eq!((m.pct_below_70, m.pct_in_range, m.pct_above_180, m.hypo_events), (0.0, 100.0, 0.0, 0));
    }

    #[test]
    fn constant_low_fails() {
        let r = monitor_eventual_safety(&tr(&[60.0; 10]), &StlSpec::default());
        assert!(!r.satisfied);
        assert_eq!(r.tau_min, None);
        assert!(r.robustness < 0.0);
    }

    #[test]
    fn tau_is_first_in_range_suffix() {
        let r = monitor_eventual_safety(&tr(&[200.0, 190.0, 181.0, 150.0, 120.0]), &StlSpec::default());
        assert_eq!(r.tau_min, Some(15.0));
    }

    #[test]
    fn boundary_touch_has_zero_robustness() {
        let spec = StlSpec::new(70.0, 180.0, StlMode::Always).unwrap();
        let t = tr(&[120.0, 70.0, 120.0]);
        assert_eq!(robustness(&t, &spec), 0.0);
        assert!(monitor_eventual_safety(&t, &spec).satisfied);
    }

    #[test]
    fn rejects_inverted_range() {
        assert!(StlSpec::new(180.0, 70.0, StlMode::Eventual).is_err());
    }
    #[test]
    fn empirical_fi_fractions() {
        let set = SafeSet::new(vec![70.0, -1.0, 0.0], vec![400.0, 1.0, 100.0], vec![120.0, 0.0, 10.0]).unwrap();
        let good = tr(&[120.0, 130.0, 125.0]);
        let bad = tr(&[120.0, 60.0, 125.0]);
        assert_eq!(empirical_fi(&[good.clone(), good.clone()], &set).unwrap(), 1.0);
        assert_eq!(empirical_fi(&[bad.clone(), bad.clone()], &set).unwrap(), 0.0);
        assert_eq!(empirical_fi(&[good, bad], &set).unwrap(), 0.5);
        assert!(empirical_fi(&[tr(&[50.0, 120.0])], &set).is_err());
        assert!(empirical_fi(&[], &set).is_err());
    }

    #[test]
    fn two_dips_count_as_two_events() {
        // 5-min samples: 12 in range, 4 below (20 min), 12 in range (1 h), 4 below, 8 above.
        let mut g = vec![120.0; 12];
        g.extend([65.0; 4]);
        g.extend([120.0; 12]);
        g.extend([60.0; 4]);
        g.extend([200.0; 8]);
        let m = glycemic_metrics(&tr(&g));
        assert_eq!(m.hypo_events, 2);
        assert_eq!(m.pct_below_70, 100.0 * 8.0 / 40.0);
        assert_eq!(m.pct_above_180, 100.0 * 8.0 / 40.0);
        assert_eq!(m.pct_in_range, 100.0 * 24.0 / 40.0);
    }

    #[test]
    fn short_dip_is_not_an_event() {
        let m = glycemic_metrics(&tr(&[120.0, 65.0, 65.0, 120.0]));
        assert_eq!(m.hypo_events, 0);
        assert_eq!(m.pct_below_70, 50.0);
    }

    #[test]
    fn robustness_sign_agrees_with_monitor() {
        use rand::Rng;
        let mut rng = crate::rng::stream(0, crate::rng::Stage::MonteCarlo, 0);
        for mode in [StlMode::Eventual, StlMode::Always] {
            let spec = StlSpec::new(70.0, 180.0, mode).unwrap();
            for _ in 0..1000 {
                let n = rng.gen_range(1..40);
                let g: Vec<f64> = (0..n).map(|_| rng.gen_range(40.0..250.0)).collect();
                let t = tr(&g);
                let r = monitor_eventual_safety(&t, &spec);
                if r.robustness > 0.0 {
                    assert!(r.satisfied);
                }
                if r.robustness < 0.0 {
                    assert!(!r.satisfied);
                }
                let m = glycemic_metrics(&t);
                assert!((m.pct_below_70 + m.pct_in_range + m.pct_above_180 - 100.0).abs() <= 1e-9);
            }
        }
    }
}
