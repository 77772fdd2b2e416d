//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! run with `--nocapture` to see them.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hilhip_core::clbf::{certify_nominal, train_clbf, Certificate, CertificateBundle, ClbfConfig, SafeSet, ScalarPlant};
use hilhip_core::controllers::TherapySettings;
use hilhip_core::fis::{anfis_train, fis_eval, mse, premise_gradient, ActionRecord, AnfisConfig, FisModel, FuzzyRule, SigmoidMf};
use hilhip_core::harness::{
    compare_controllers, run_scenario_with, synthesize_neural_controller, wizard_training_data, ControllerKind, EventSource,
    HumanBehavior, ScenarioAssets, ScenarioConfig,
};
use hilhip_core::mc::{doa, hit_probabilities, hit_probabilities_monte_carlo, DoaConfig, MarkovChain};
use hilhip_core::nn::Mlp;
use hilhip_core::plant::{rk4, BmmParams};
use hilhip_core::reach::{enclose_output, Enclosure, InputBox};
use hilhip_core::sim::Schedule;
use hilhip_core::stl::empirical_fi;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, started: Instant, out: &Outcome) {
    println!(
        "criterion {id} [{}] {name}: {} ({:.1}s)",
        if out.pass { "PASS" } else { "FAIL" },
        out.detail,
        started.elapsed().as_secs_f64()
    );
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// The simulated person of the Monte Carlo study: a carb ratio that is too
/// aggressive and noisy dose estimates, so hypoglycemia actually occurs.
fn study_therapy() -> TherapySettings {
    TherapySettings {
        carb_ratio: 7.0,
        ..TherapySettings::default()
    }
}

fn study_human() -> HumanBehavior {
    HumanBehavior {
        bolus_error_sd: 0.3,
        ..HumanBehavior::default()
    }
}

struct Pipeline {
    params: BmmParams<f64>,
    assets: ScenarioAssets,
    cert: Certificate,
}

fn pipeline() -> Pipeline {
    let therapy = study_therapy();
    let data = wizard_training_data(1000, &therapy, 7);
    let fis = anfis_train(
        &data,
        &AnfisConfig {
            rules_per_dim: 3,
            epochs: 300,
            lr: 0.2,
            ..AnfisConfig::default()
        },
    )
    .unwrap();
    let bx = InputBox::new(&[(70.0, 300.0), (0.0, 5.0), (0.0, 110.0)]).unwrap();
    let enc = enclose_output(&fis.model, &bx, 8).unwrap();
    let params = BmmParams::default();
    let mut assets = ScenarioAssets {
        meals: None,
        fis: Some(fis.model),
        certificate: None,
    };
    let demo = ScenarioConfig {
        duration_days: 10.0,
        seed: 1000,
        therapy,
        human: study_human(),
        ..ScenarioConfig::default()
    };
    let cert = synthesize_neural_controller(&params, &demo, &BmmParams::virtual_cohort(), &assets, &ClbfConfig::bmm(&params, enc)).unwrap();
    assets.certificate = Some(CertificateBundle::from_certificate(&cert));
    Pipeline { params, assets, cert }
}

fn criterion_runaway(p: &Pipeline) -> Outcome {
    let actions = Schedule::default().meal(30.0, 100.0).bolus(30.0, 2.0).bolus(150.0, (300.0 - 120.0) / 20.0).actions;
    let run = |c| {
        let cfg = ScenarioConfig {
            controller: c,
            events: EventSource::Schedule { actions: actions.clone() },
            duration_days: 1.0,
            ..ScenarioConfig::default()
        };
        run_scenario_with(&cfg, &p.params, &p.assets).unwrap().trace.min_glucose()
    };
    let nominal = run(ControllerKind::Mpc);
    let neural = run(ControllerKind::Neural);
    Outcome {
        pass: nominal < 70.0 && neural >= 70.0,
        detail: format!("min glucose: nominal {nominal:.1}, neural {neural:.1} mg/dL"),
    }
}

fn criterion_monte_carlo(p: &Pipeline) -> Outcome {
    let base = ScenarioConfig {
        duration_days: 30.0,
        therapy: study_therapy(),
        human: study_human(),
        ..ScenarioConfig::default()
    };
    let kinds = [ControllerKind::Pid, ControllerKind::Mpc, ControllerKind::Neural];
    let report = compare_controllers(&base, &BmmParams::virtual_cohort(), &kinds, 1, &p.assets, 0).unwrap();
    let get = |k| report.aggregate(k).unwrap();
    let (pid, mpc, nn) = (get(ControllerKind::Pid), get(ControllerKind::Mpc), get(ControllerKind::Neural));
    let below_ok = nn.pct_below_70.mean < mpc.pct_below_70.mean && nn.pct_below_70.mean < pid.pct_below_70.mean;
    let tir_ok = nn.pct_in_range.mean >= mpc.pct_in_range.mean - 2.0 && nn.pct_in_range.mean >= pid.pct_in_range.mean - 2.0;
    Outcome {
        pass: below_ok && tir_ok && report.shared_events,
        detail: format!(
            "%<70 nn {:.3} mpc {:.3} pid {:.3}; TIR nn {:.2} mpc {:.2} pid {:.2}",
            nn.pct_below_70.mean,
            mpc.pct_below_70.mean,
            pid.pct_below_70.mean,
            nn.pct_in_range.mean,
            mpc.pct_in_range.mean,
            pid.pct_in_range.mean
        ),
    }
}

fn criterion_band(p: &Pipeline) -> Outcome {
    let traces: Vec<_> = (0..9)
        .map(|k| {
            let cfg = ScenarioConfig {
                controller: ControllerKind::Neural,
                events: EventSource::None,
                initial_glucose: Some(110.0 + 30.0 * k as f64 / 8.0),
                duration_days: 1.0,
                ..ScenarioConfig::default()
            };
            run_scenario_with(&cfg, &p.params, &p.assets).unwrap().trace
        })
        .collect();
    let fi = empirical_fi(&traces, &SafeSet::bmm_default(&p.params)).unwrap();
    let lo = traces.iter().map(|t| t.min_glucose()).fold(f64::INFINITY, f64::min);
    let hi = traces.iter().map(|t| t.max_glucose()).fold(f64::NEG_INFINITY, f64::max);
    Outcome {
        pass: fi == 1.0,
        detail: format!("fraction in C {fi:.3}, glucose range [{lo:.1}, {hi:.1}]"),
    }
}

fn random_chain(rng: &mut ChaCha8Rng) -> MarkovChain {
    let n = 5;
    let matrix = (0..n)
        .map(|i| {
            if i > 0 && rng.gen_bool(0.3) {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                return r;
            }
            let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.35) { 0.0 } else { rng.gen::<f64>() }).collect();
            let s: f64 = raw.iter().sum();
            if s == 0.0 {
                let mut r = vec![0.0; n];
                r[(i + 1) % n] = 1.0;
                return r;
            }
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    MarkovChain::new((0..n).map(|i| format!("s{i}")).collect(), matrix).unwrap()
}

fn criterion_doa() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = vec!["s0".to_string()];
    let mut worst = 0.0f64;
    let mut monotone = true;
    for case in 0..20 {
        let mc = random_chain(&mut rng);
        let exact = hit_probabilities(&mc, &init).unwrap();
        let est = hit_probabilities_monte_carlo(&mc, &init, 100_000, 200, case).unwrap();
        for (a, b) in exact.per_state.iter().zip(&est.per_state) {
            worst = worst.max((a - b).abs());
        }
        let ps = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0];
        let sets: Vec<_> = ps.iter().map(|&p| doa(&mc, &DoaConfig::new(p, init.clone())).unwrap().doa_set).collect();
        monotone &= sets.windows(2).all(|w| w[1].iter().all(|s| w[0].contains(s)));
    }
    // Hit probability of exactly 0.95 sits on the threshold.
    let edge = MarkovChain::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![vec![0.0, 0.95, 0.05], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
    )
    .unwrap();
    let at = |p: f64| doa(&edge, &DoaConfig::new(p, vec!["a".into()])).unwrap();
    let boundary = at(0.95).contains("b") && !at(0.95).contains("c") && !at(0.95 + 1e-9).contains("b") && at(0.95 - 1e-9).contains("b");
    Outcome {
        pass: worst <= 0.02 && monotone && boundary,
        detail: format!("max |exact - MC| {worst:.4}, anti-monotone {monotone}, boundary exact {boundary}"),
    }
}

fn random_fis(rng: &mut ChaCha8Rng) -> (FisModel<f64>, InputBox<f64>) {
    let rules = rng.gen_range(1..=8);
    let model = FisModel::new(
        3,
        (0..rules)
            .map(|_| FuzzyRule {
                premise: (0..3)
                    .map(|_| {
                        let a = rng.gen_range(0.2..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        SigmoidMf::new(a, rng.gen_range(-2.0..2.0))
                    })
                    .collect(),
                consequent: rng.gen_range(-5.0..15.0),
            })
            .collect(),
    )
    .unwrap();
    let bounds: Vec<(f64, f64)> = (0..3)
        .map(|_| {
            let lo = rng.gen_range(-3.0..2.0);
            (lo, lo + rng.gen_range(0.1..3.0))
        })
        .collect();
    (model, InputBox::new(&bounds).unwrap())
}

fn criterion_enclosure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut escapes = 0usize;
    let mut monotone = true;
    for _ in 0..50 {
        let (model, bx) = random_fis(&mut rng);
        let e8: Enclosure<f64> = enclose_output(&model, &bx, 8).unwrap();
        let e16 = enclose_output(&model, &bx, 16).unwrap();
        monotone &= e16.width() <= e8.width();
        for _ in 0..10_000 {
            let x: Vec<f64> = bx.dims.iter().map(|d| rng.gen_range(d.lo..=d.hi)).collect();
            let y = fis_eval(&model, &x).unwrap();
            if !e8.contains(y) || !e16.contains(y) {
                escapes += 1;
            }
        }
    }
    Outcome {
        pass: escapes == 0 && monotone,
        detail: format!("escapes {escapes}, width(16) <= width(8) on all {monotone}"),
    }
}

fn criterion_numerics() -> Outcome {
    // x' = -x, x(0) = 1 on [0, 2].
    let err = |dt: f64| {
        let mut x = [1.0];
        let n = (2.0 / dt).round() as usize;
        for _ in 0..n {
            x = rk4(x, dt, |s| [-s[0]]).unwrap();
        }
        (x[0] - (-2.0f64).exp()).abs()
    };
    let ratio = err(0.1) / err(0.05);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_mlp = 0.0f64;
    let h = 1e-6;
    for _ in 0..100 {
        let net = Mlp::<f64>::random(&[3, 8, 8, 1], &mut rng).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (gp, gx) = net.grad(&x, 0).unwrap();
        let k = rng.gen_range(0..net.params().len());
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fd = (plus.eval(&x).unwrap()[0] - minus.eval(&x).unwrap()[0]) / (2.0 * h);
        worst_mlp = worst_mlp.max(rel_err(gp[k], fd));
        let j = rng.gen_range(0..3);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[j] += h;
        xm[j] -= h;
        let fdx = (net.eval(&xp).unwrap()[0] - net.eval(&xm).unwrap()[0]) / (2.0 * h);
        worst_mlp = worst_mlp.max(rel_err(gx[j], fdx));
    }

    let mut worst_fis = 0.0f64;
    for _ in 0..100 {
        let (model, bx) = random_fis(&mut rng);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| bx.dims.iter().map(|d| rng.gen_range(d.lo..=d.hi)).collect()).collect();
        let ys: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..10.0)).collect();
        let g = premise_gradient(&model, &xs, &ys);
        let i = rng.gen_range(0..model.rules.len());
        let j = rng.gen_range(0..3);
        let shift = |da: f64, dc: f64| {
            let mut m = model.clone();
            m.rules[i].premise[j].a += da;
            m.rules[i].premise[j].c += dc;
            mse(&m, &xs, &ys)
        };
        let fa = (shift(h, 0.0) - shift(-h, 0.0)) / (2.0 * h);
        let fc = (shift(0.0, h) - shift(0.0, -h)) / (2.0 * h);
        worst_fis = worst_fis.max(rel_err(g[i][j].0, fa)).max(rel_err(g[i][j].1, fc));
    }
    Outcome {
        pass: (8.0..=32.0).contains(&ratio) && worst_mlp < 1e-4 && worst_fis < 1e-4,
        detail: format!("RK4 ratio {ratio:.2}, MLP grad rel err {worst_mlp:.2e}, ANFIS premise rel err {worst_fis:.2e}"),
    }
}

fn criterion_anfis() -> Outcome {
    // Self-recovery: targets from a known 8-rule model over the wizard input ranges.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth = FisModel::new(
        3,
        (0..8)
            .map(|r| FuzzyRule {
                premise: vec![
                    SigmoidMf::new(if r & 1 == 0 { -0.03 } else { 0.03 }, 180.0),
                    SigmoidMf::new(if r & 2 == 0 { -1.5 } else { 1.5 }, 2.5),
                    SigmoidMf::new(if r & 4 == 0 { -0.08 } else { 0.08 }, 50.0),
                ],
                consequent: r as f64 * 1.5,
            })
            .collect(),
    )
    .unwrap();
    let data: Vec<ActionRecord> = (0..1000)
        .map(|_| {
            let f = [rng.gen_range(70.0..300.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..100.0)];
            ActionRecord {
                features: f,
                event: None,
                bolus: fis_eval(&truth, &f).unwrap(),
            }
        })
        .collect();
    let own = anfis_train(
        &data,
        &AnfisConfig {
            lr: 1.0,
            ..AnfisConfig::default()
        },
    )
    .unwrap();

    let wizard = anfis_train(
        &wizard_training_data(1000, &TherapySettings::default(), 7),
        &AnfisConfig {
            rules_per_dim: 3,
            epochs: 300,
            lr: 0.2,
            ..AnfisConfig::default()
        },
    )
    .unwrap();
    Outcome {
        pass: own.test_rmse <= 1e-2 && wizard.test_rmse <= 0.25,
        detail: format!("self-generated test RMSE {:.4}, wizard test RMSE {:.3} U", own.test_rmse, wizard.test_rmse),
    }
}

fn criterion_certificate(p: &Pipeline) -> Outcome {
    let toy_cfg = ClbfConfig {
        u_ex: Enclosure {
            u_lo: -0.1,
            u_hi: 0.1,
            subdivisions: 1,
            certified: true,
        },
        hidden: vec![32, 32],
        train_samples: 2000,
        validation_per_dim: 1001,
        epochs: 200,
        batch_size: 64,
        learning_rate: 1e-2,
        final_lr_fraction: 0.01,
        goal_weight: 300.0,
        ..ClbfConfig::default()
    };
    let toy_set = SafeSet::new(vec![-1.0], vec![1.0], vec![0.0]).unwrap();
    let stable = ScalarPlant::new(-1.0, 1.0);
    // High-gain nominal: it must overpower the ±0.1 disturbance close to the goal.
    let toy = train_clbf(&stable, &|x: &[f64]| -20.0 * x[0], &toy_set, &toy_cfg).unwrap();
    let unstable = ScalarPlant::new(1.0, 0.0);
    let bad = train_clbf(&unstable, &|_| 0.0, &toy_set, &toy_cfg).unwrap();

    let self_check = |cert: &Certificate, plant: &dyn hilhip_core::clbf::AffinePlant| {
        let model = cert.model.clone();
        let pi = move |x: &[f64]| model.pi(x);
        certify_nominal(
            &cert.model,
            &pi,
            &cert.validation_points(),
            &cert.config.u_ex_interval(),
            plant,
            cert.config.lambda,
            cert.config.violation_threshold,
        )
        .violation_rate
    };
    let toy_same = self_check(&toy, &stable) == toy.violation_rate;
    let bmm_plant = hilhip_core::clbf::BmmPlant::new(p.params);
    let bmm_same = self_check(&p.cert, &bmm_plant) == p.cert.violation_rate;
    let v0 = toy.model.v(&[0.0]);
    Outcome {
        pass: toy.exists && v0 <= 1e-3 && !bad.exists && toy_same && bmm_same,
        detail: format!(
            "toy exists {} V(0) {:.2e}; uncontrollable exists {}; self-certification identical toy {} BMM {} (BMM violation {:.4}, exists {})",
            toy.exists, v0, bad.exists, toy_same, bmm_same, p.cert.violation_rate, p.cert.exists
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut all = true;
    let mut run = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut out = f();
        if let Some(l) = limit {
            if t.elapsed() > l {
                out.pass = false;
                out.detail += &format!("; exceeded {:.0}s budget", l.as_secs_f64());
            }
        }
        report(id, name, t, &out);
        all &= out.pass;
    };

    let t = Instant::now();
    let p = pipeline();
    let synthesis = t.elapsed();
    println!(
        "synthesis: certificate exists {}, violation {:.4}, positivity {:.4} ({:.1}s)",
        p.cert.exists,
        p.cert.violation_rate,
        p.cert.positivity_rate,
        synthesis.as_secs_f64()
    );

    // Offline synthesis counts against the Monte Carlo budget; the runaway
    // budget covers the two closed-loop runs.
    run(1, "interaction runaway", Some(Duration::from_secs(30)), &mut || criterion_runaway(&p));
    let mc_budget = Duration::from_secs(600).saturating_sub(synthesis);
    run(2, "Monte Carlo direction", Some(mc_budget), &mut || criterion_monte_carlo(&p));
    run(3, "forward-invariance band", None, &mut || criterion_band(&p));
    run(4, "DoA correctness", None, &mut criterion_doa);
    run(5, "enclosure soundness", None, &mut criterion_enclosure);
    run(6, "numerical hygiene", None, &mut criterion_numerics);
    run(7, "ANFIS recovery", None, &mut criterion_anfis);
    run(8, "certificate properties", None, &mut || criterion_certificate(&p));
    assert!(all, "at least one acceptance criterion failed");
}
