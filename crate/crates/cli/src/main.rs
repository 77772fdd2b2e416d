//! `hilhip`: command-line front end for the safety pipeline. Each subcommand
//! reads and writes flat JSON/CSV files so stages can be scripted one by one.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use hilhip_core::clbf::{BmmPlant, CertificateBundle, ClbfConfig};
use hilhip_core::controllers::{mpc_step, MpcConfig, TherapySettings};
use hilhip_core::fis::{anfis_train, read_action_csv, AnfisConfig, FisModel};
use hilhip_core::harness::{
    compare_controllers, emit_report, load_event_log, run_scenario, synthesize_neural_controller, wizard_training_data,
    ControllerKind, MealModel, Report, ScenarioAssets, ScenarioConfig,
};
use hilhip_core::mc::{cluster_names, doa, learn_mc_with_states, DoaConfig, DoaSolver, MarkovChain};
use hilhip_core::plant::{BmmParams, PlantState};
use hilhip_core::reach::{enclose_output, Enclosure, EnclosureReport, InputBox};
use hilhip_core::sim::Trace;

#[derive(Parser)]
#[command(name = "hilhip", version, about = "Safety toolkit for human-in-the-loop insulin delivery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster logged meals by size and learn the meal Markov chain.
    LearnMc(LearnMcArgs),
    /// Domain of attraction of a chain for a safety tuning probability.
    Doa(DoaArgs),
    /// Fit the human-action FIS with ANFIS.
    TrainFis(TrainFisArgs),
    /// Interval enclosure of the FIS output over an input box.
    Reach(ReachArgs),
    /// Train the control-barrier certificate and the neural controller.
    TrainClbf(TrainClbfArgs),
    /// Check a nominal controller against a trained certificate.
    Certify(CertifyArgs),
    /// Run one closed-loop scenario.
    Simulate(SimulateArgs),
    /// Compare controllers on shared scenario streams and write a report.
    Compare(CompareArgs),
    /// Re-emit report files (CSV, SVG) from a saved report JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct LearnMcArgs {
    /// Event log CSV `t_min,event_type,value`.
    #[arg(long)]
    log: PathBuf,
    /// Number of meal-size clusters.
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    /// Output chain JSON `{states, matrix}`.
    #[arg(long)]
    out: PathBuf,
    /// Also write a meal model (chain plus cluster centers) for simulation.
    #[arg(long)]
    meal_model: Option<PathBuf>,
}

#[derive(Args)]
struct DoaArgs {
    #[arg(long)]
    chain: PathBuf,
    /// Safety tuning probability in [0, 1].
    #[arg(long)]
    p: f64,
    /// Initial-set labels, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    initial: Vec<String>,
    /// Estimate hit probabilities by simulation with this many walks.
    #[arg(long)]
    monte_carlo: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    max_iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFisArgs {
    /// Training CSV `mean_cgm,iob,carbs,event,bolus`.
    #[arg(long, conflicts_with = "wizard")]
    data: Option<PathBuf>,
    /// Generate this many bolus-wizard records instead of reading data.
    #[arg(long)]
    wizard: Option<usize>,
    /// Therapy settings JSON for the wizard data.
    #[arg(long)]
    therapy: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    rules_per_dim: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReachArgs {
    #[arg(long)]
    fis: PathBuf,
    /// Input box as `lo:hi` per dimension, comma separated.
    #[arg(long, default_value = "70:300,0:5,0:110")]
    r#box: String,
    #[arg(long, default_value_t = 8)]
    subdivisions: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainClbfArgs {
    /// Enclosure report JSON of the human's insulin input (U per bolus).
    #[arg(long)]
    enclosure: PathBuf,
    /// Virtual-patient JSON; default parameters when absent.
    #[arg(long)]
    patient: Option<PathBuf>,
    /// Training configuration JSON; derived from the patient when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario JSON used to record nominal-controller demonstrations.
    #[arg(long)]
    demo: Option<PathBuf>,
    /// FIS model driving the simulated human during demonstrations.
    #[arg(long)]
    fis: Option<PathBuf>,
    #[arg(long)]
    meal_model: Option<PathBuf>,
    /// Output certificate bundle JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NominalKind {
    /// State-feedback MPC without meal knowledge.
    Mpc,
    /// Constant basal infusion.
    Basal,
    /// Always the upper control bound.
    Max,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    certificate: PathBuf,
    #[arg(long)]
    patient: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "mpc")]
    nominal: NominalKind,
    /// Write the bundle back with the nominal check recorded.
    #[arg(long)]
    update: bool,
}

#[derive(Args)]
struct AssetArgs {
    #[arg(long)]
    fis: Option<PathBuf>,
    #[arg(long)]
    meal_model: Option<PathBuf>,
    #[arg(long)]
    certificate: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario's controller.
    #[arg(long)]
    controller: Option<String>,
    #[command(flatten)]
    assets: AssetArgs,
    /// Trace CSV output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Metrics JSON output; printed to stdout when absent.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "pid,mpc,neural")]
    controllers: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Virtual-patient files; the built-in five-subject cohort when absent.
    #[arg(long = "patient")]
    patients: Vec<PathBuf>,
    #[command(flatten)]
    assets: AssetArgs,
    /// Number of glucose traces to plot.
    #[arg(long, default_value_t = 3)]
    keep_traces: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by `compare`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    certificate: Option<PathBuf>,
    /// Traces to plot as `label=path.csv`.
    #[arg(long = "trace")]
    traces: Vec<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| hilhip_core::Error::from(e).into())
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn patient(path: Option<&Path>) -> Result<BmmParams<f64>> {
    Ok(match path {
        Some(p) => BmmParams::load(p)?,
        None => BmmParams::default(),
    })
}

fn parse_box(spec: &str) -> Result<InputBox<f64>> {
    let mut bounds = Vec::new();
    for part in spec.split(',') {
        let (lo, hi) = part.split_once(':').with_context(|| format!("box dimension `{part}` is not `lo:hi`"))?;
        let lo: f64 = lo.trim().parse().map_err(|_| hilhip_core::Error::Config(format!("bad bound `{lo}`")))?;
        let hi: f64 = hi.trim().parse().map_err(|_| hilhip_core::Error::Config(format!("bad bound `{hi}`")))?;
        bounds.push((lo, hi));
    }
    Ok(InputBox::new(&bounds)?)
}

fn load_assets(a: &AssetArgs) -> Result<ScenarioAssets> {
    let meals = a.meal_model.as_deref().map(read_json::<MealModel>).transpose()?;
    let fis = a.fis.as_deref().map(FisModel::<f64>::load).transpose()?;
    let certificate = a.certificate.as_deref().map(CertificateBundle::load).transpose()?;
    Ok(ScenarioAssets { meals, fis, certificate })
}

fn learn_mc_cmd(a: LearnMcArgs) -> Result<()> {
    let log = load_event_log(&a.log, None)?;
    let (events, centers) = log.meal_sequence(a.clusters)?;
    let chain = learn_mc_with_states(&events, cluster_names(a.clusters))?;
    log::info!("learned a {}-state chain from {} meals", chain.len(), events.len());
    write_json(&chain, Some(&a.out))?;
    if let Some(path) = &a.meal_model {
        let model = MealModel {
            chain,
            centers,
            ..MealModel::default()
        };
        model.validate()?;
        write_json(&model, Some(path))?;
    }
    Ok(())
}

fn doa_cmd(a: DoaArgs) -> Result<()> {
    let chain: MarkovChain = read_json(&a.chain)?;
    chain.validate()?;
    let config = DoaConfig {
        p: a.p,
        initial_set: a.initial,
        max_iterations: a.max_iterations,
        solver: match a.monte_carlo {
            Some(trajectories) => DoaSolver::MonteCarlo { trajectories, seed: a.seed },
            None => DoaSolver::LinearSolve,
        },
    };
    write_json(&doa(&chain, &config)?, a.out.as_deref())
}

fn train_fis_cmd(a: TrainFisArgs) -> Result<()> {
    let records = match (&a.data, a.wizard) {
        (Some(path), _) => read_action_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?,
        (None, Some(n)) => {
            let therapy: TherapySettings = a.therapy.as_deref().map(read_json).transpose()?.unwrap_or_default();
            therapy.validate()?;
            wizard_training_data(n, &therapy, a.seed)
        }
        (None, None) => bail!(hilhip_core::Error::Config("give --data or --wizard".into())),
    };
    let config = AnfisConfig {
        rules_per_dim: a.rules_per_dim,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..AnfisConfig::default()
    };
    let outcome = anfis_train(&records, &config)?;
    eprintln!("train RMSE {:.4} U, test RMSE {:.4} U", outcome.train_rmse, outcome.test_rmse);
    outcome.model.save(&a.out)?;
    Ok(())
}

fn reach_cmd(a: ReachArgs) -> Result<()> {
    let model = FisModel::<f64>::load(&a.fis)?;
    let bx = parse_box(&a.r#box)?;
    let enclosure = enclose_output(&model, &bx, a.subdivisions)?;
    if !enclosure.certified {
        log::warn!("some sub-boxes fell back to the consequent hull");
    }
    write_json(&EnclosureReport::new(&bx, &enclosure), a.out.as_deref())
}

fn train_clbf_cmd(a: TrainClbfArgs) -> Result<()> {
    let params = patient(a.patient.as_deref())?;
    let report: EnclosureReport = read_json(&a.enclosure)?;
    let enclosure = Enclosure {
        u_lo: report.u_lo,
        u_hi: report.u_hi,
        subdivisions: report.subdivisions,
        certified: true,
    };
    let config = match &a.config {
        Some(p) => read_json(p)?,
        None => ClbfConfig::bmm(&params, enclosure),
    };
    let demo: ScenarioConfig = match &a.demo {
        Some(p) => read_json(p)?,
        None => ScenarioConfig {
            duration_days: 10.0,
            seed: 1000,
            ..ScenarioConfig::default()
        },
    };
    let assets = ScenarioAssets {
        meals: a.meal_model.as_deref().map(read_json).transpose()?,
        fis: a.fis.as_deref().map(FisModel::<f64>::load).transpose()?,
        certificate: None,
    };
    let cert = synthesize_neural_controller(&params, &demo, &BmmParams::virtual_cohort(), &assets, &config)?;
    eprintln!(
        "certificate exists {}, violation rate {:.4}, positivity {:.4}, nominal certified {:?}",
        cert.exists, cert.violation_rate, cert.positivity_rate, cert.nominal_certified
    );
    CertificateBundle::from_certificate(&cert).save(&a.out)?;
    Ok(())
}

fn certify_cmd(a: CertifyArgs) -> Result<()> {
    let params = patient(a.patient.as_deref())?;
    let mut cert = CertificateBundle::load(&a.certificate)?.into_certificate()?;
    let plant = BmmPlant::new(params);
    let mpc = MpcConfig::for_params(&params);
    let basal = params.basal_rate();
    let max = cert.model.bounds.1;
    let nominal = |x: &[f64]| match a.nominal {
        NominalKind::Mpc => mpc_step(&mpc, &params, &PlantState::new(x[0], x[1], x[2]), &[]).rate,
        NominalKind::Basal => basal,
        NominalKind::Max => max,
    };
    let check = cert.check_nominal(&plant, &nominal);
    write_json(&check, None)?;
    if a.update {
        CertificateBundle::from_certificate(&cert).save(&a.certificate)?;
    }
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let mut config: ScenarioConfig = read_json(&a.config)?;
    if let Some(c) = &a.controller {
        config.controller = c.parse()?;
    }
    let assets = load_assets(&a.assets)?;
    let outcome = run_scenario(&config, &assets)?;
    if let Some(path) = &a.trace {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        outcome.trace.write_csv(f)?;
    }
    write_json(&outcome.metrics, a.metrics.as_deref())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let config: ScenarioConfig = read_json(&a.config)?;
    let kinds = a.controllers.iter().map(|c| c.parse::<ControllerKind>()).collect::<hilhip_core::Result<Vec<_>>>()?;
    let patients = if a.patients.is_empty() {
        BmmParams::virtual_cohort()
    } else {
        a.patients.iter().map(BmmParams::load).collect::<hilhip_core::Result<Vec<_>>>()?
    };
    let assets = load_assets(&a.assets)?;
    let report = compare_controllers(&config, &patients, &kinds, a.seeds, &assets, a.keep_traces)?;
    for agg in &report.aggregates {
        eprintln!(
            "{:>6}: %<70 {:.3} ± {:.3}, TIR {:.2} ± {:.2}, %>180 {:.2} ± {:.2}",
            agg.controller.name(),
            agg.pct_below_70.mean,
            agg.pct_below_70.sd,
            agg.pct_in_range.mean,
            agg.pct_in_range.sd,
            agg.pct_above_180.mean,
            agg.pct_above_180.sd
        );
    }
    for p in emit_report(&report, &a.out_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut report: Report = read_json(&a.report)?;
    report.bundle = a.certificate.as_deref().map(CertificateBundle::load).transpose()?;
    for spec in &a.traces {
        let (label, path) = spec.split_once('=').with_context(|| format!("trace `{spec}` is not `label=path`"))?;
        let f = File::open(path).with_context(|| format!("opening {path}"))?;
        report.traces.push((label.to_string(), Trace::read_csv(f)?));
    }
    for p in emit_report(&report, &a.out_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::LearnMc(a) => learn_mc_cmd(a),
        Command::Doa(a) => doa_cmd(a),
        Command::TrainFis(a) => train_fis_cmd(a),
        Command::Reach(a) => reach_cmd(a),
        Command::TrainClbf(a) => train_clbf_cmd(a),
        Command::Certify(a) => certify_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

/// 2 for invalid input, 3 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hilhip_core::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
