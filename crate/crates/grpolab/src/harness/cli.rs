//! Command-line interface.
//!
//! Subcommands:
//!
//! - `run` — one training session: sample groups, apply inner AdamW steps,
//!   emit `training.json`, `training.csv`, `groups.txt`, the effective
//!   config, and policy/moment checkpoints;
//! - `verify <target>` — the verification experiments (`prop1`..`prop4`,
//!   `gradient-oracle`, `mu1`, or `all`), one JSON report each;
//! - `zoo list` — the ten registered algorithm rows;
//! - `report <dir>` — summarize a directory of report files.
//!
//! Exit codes: 0 on success, 1 when an experiment check fails or a run
//! aborts, 2 on usage or configuration errors. The default output directory
//! is `$GRPOLAB_OUT`, falling back to `./reports`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::lab::{
    self, gradient_oracle_experiment, loss_proxy_experiment, mu1_inertness_experiment,
    overshoot_experiment, prefix_bias_experiment, scaling_invariance_experiment,
    ExperimentReport, LabError, OvershootSettings, ScalingSettings, TrainingSettings,
};
use crate::zoo::{describe, ALGORITHM_NAMES};

use super::config::{ConfigError, RunConfig};
use super::{write_atomic, write_json_atomic, write_moments, write_report};

#[derive(Parser, Debug)]
#[command(
    name = "grpolab",
    version,
    about = "Group-based policy-optimization dynamics laboratory",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a training session and write its reports
    Run(RunArgs),
    /// Run verification experiments and write one report per experiment
    Verify(VerifyArgs),
    /// Inspect the algorithm registry
    Zoo {
        #[command(subcommand)]
        command: ZooCommand,
    },
    /// Summarize the report files in a directory
    Report { dir: PathBuf },
}

#[derive(Subcommand, Debug)]
enum ZooCommand {
    /// Print every registered algorithm with its weights, ratio, and regularizer
    List,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<String>,
    /// Output directory (overrides config and $GRPOLAB_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Inner steps μ per sampled group
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// prop1 | prop2 | prop3 | prop4 | gradient-oracle | mu1 | all
    target: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides config and $GRPOLAB_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the overshoot β1 grid with a single value
    #[arg(long)]
    beta1: Option<f64>,
    /// Override the overshoot β2 grid with a single value
    #[arg(long)]
    beta2: Option<f64>,
    /// Override the overshoot T grid with a single value
    #[arg(long = "T")]
    t: Option<u64>,
    #[arg(long)]
    k_max: Option<u64>,
    /// Reward scaling factors for prop2, comma separated
    #[arg(long, value_delimiter = ',')]
    phi: Option<Vec<f64>>,
    /// Instance count for the gradient-oracle and prefix sweeps
    #[arg(long)]
    instances: Option<usize>,
}

/// Entry point behind `main`; takes argv including the program name and
/// returns the process exit code.
pub fn cli_main(args: &[String]) -> i32 {
    let _ = env_logger::Builder::from_default_env()
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run(args) => run_command(args),
        Command::Verify(args) => verify_command(args),
        Command::Zoo {
            command: ZooCommand::List,
        } => zoo_list_command(),
        Command::Report { dir } => report_command(&dir),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_outdir(flag: &Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.clone()
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os("GRPOLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

fn run_command(args: RunArgs) -> i32 {
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(algorithm) = &args.algorithm {
        config.algorithm = algorithm.clone();
    }
    if let Some(outer) = args.outer_iters {
        config.experiments.outer_iters = outer;
    }
    if let Some(inner) = args.inner_steps {
        config.objective.inner_steps = inner;
    }
    if let Some(beta) = args.beta {
        config.objective.beta = Some(beta);
    }
    if let Some(lr) = args.lr {
        config.optimizer.lr = lr;
    }
    if let Err(e) = config.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    let outdir = resolve_outdir(&args.out, &config);
    match execute_run(&config, &outdir) {
        Ok(()) => {
            println!("run complete; reports in {}", outdir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(serde::Serialize)]
struct TrainingSummary<'a> {
    algorithm: &'a str,
    seed: u64,
    config_fingerprint: String,
    outer_iterations: usize,
    inner_steps_per_iteration: usize,
    total_inner_steps: usize,
    final_param_count: usize,
    outer: Vec<OuterSummary>,
}

#[derive(serde::Serialize)]
struct OuterSummary {
    iter: usize,
    skipped_degenerate: bool,
    reward_mean: f64,
    reward_std: f64,
    steps: Vec<StepSummary>,
}

#[derive(serde::Serialize)]
struct StepSummary {
    step: usize,
    objective: f64,
    advantage_term: f64,
    regularizer_term: f64,
    clip_fraction: f64,
    mean_ratio: f64,
    m_norm: f64,
    v_norm: f64,
    delta_theta_norm: f64,
}

fn execute_run(config: &RunConfig, outdir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(outdir)?;
    let algo = config.build_algo_config()?;
    let hyper = config.build_hyper();
    let mut policy = config.build_policy()?;
    let settings = TrainingSettings {
        prompt: config.prompt_seq(),
        group_size: config.group.size,
        outer_iters: config.experiments.outer_iters,
        inner_steps: config.objective.inner_steps,
        seed: config.seed,
    };
    let trajectory = lab::run_training(&mut policy, &algo, &config.reward, &hyper, &settings)?;

    write_atomic(
        &outdir.join("effective-config.toml"),
        config.to_toml_string()?.as_bytes(),
    )?;
    let mut csv = Vec::new();
    lab::write_training_csv(&trajectory, &mut csv)?;
    write_atomic(&outdir.join("training.csv"), &csv)?;
    let mut groups = Vec::new();
    for outer in &trajectory.outer {
        outer.group.write_records(&mut groups)?;
    }
    write_atomic(&outdir.join("groups.txt"), &groups)?;
    let mut ckpt = Vec::new();
    trajectory.final_policy.write_checkpoint(&mut ckpt)?;
    write_atomic(&outdir.join("policy.ckpt"), &ckpt)?;
    let mut moments = Vec::new();
    write_moments(
        &mut moments,
        &trajectory.layout,
        &trajectory.optimizer_state,
        trajectory.final_policy.vocab_size(),
    )?;
    write_atomic(&outdir.join("moments.ckpt"), &moments)?;

    let summary = TrainingSummary {
        algorithm: &config.algorithm,
        seed: config.seed,
        config_fingerprint: config.fingerprint(),
        outer_iterations: settings.outer_iters,
        inner_steps_per_iteration: settings.inner_steps,
        total_inner_steps: trajectory.theta_steps.len().saturating_sub(1),
        final_param_count: trajectory.final_policy.param_count(),
        outer: trajectory
            .outer
            .iter()
            .map(|o| OuterSummary {
                iter: o.iter,
                skipped_degenerate: o.skipped_degenerate,
                reward_mean: o.reward_mean,
                reward_std: o.reward_std,
                steps: o
                    .inner
                    .iter()
                    .map(|s| StepSummary {
                        step: s.step,
                        objective: s.objective,
                        advantage_term: s.advantage_term,
                        regularizer_term: s.regularizer_term,
                        clip_fraction: s.clip_fraction,
                        mean_ratio: s.mean_ratio,
                        m_norm: s.m_norm,
                        v_norm: s.v_norm,
                        delta_theta_norm: s.delta_theta_norm,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json_atomic(&outdir.join("training.json"), &summary)?;
    Ok(())
}

const VERIFY_TARGETS: [&str; 6] = [
    "prop1",
    "prop2",
    "prop3",
    "prop4",
    "gradient-oracle",
    "mu1",
];

fn verify_command(args: VerifyArgs) -> i32 {
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(phi) = &args.phi {
        config.experiments.phi = phi.clone();
    }
    if let Some(t) = args.t {
        config.experiments.overshoot_t = vec![t];
    }
    if let Some(k) = args.k_max {
        config.experiments.overshoot_k_max = k;
    }
    if let Some(n) = args.instances {
        config.experiments.gradcheck_instances = n;
        config.experiments.prefix_instances = n;
    }
    if let Err(e) = config.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    let targets: Vec<&str> = if args.target == "all" {
        VERIFY_TARGETS.to_vec()
    } else if VERIFY_TARGETS.contains(&args.target.as_str()) {
        vec![args.target.as_str()]
    } else {
        eprintln!(
            "error: unknown verify target `{}`; valid targets: {}, all",
            args.target,
            VERIFY_TARGETS.join(", ")
        );
        return 2;
    };
    let outdir = resolve_outdir(&args.out, &config);
    if let Err(e) = std::fs::create_dir_all(&outdir) {
        eprintln!("error: cannot create {}: {e}", outdir.display());
        return 1;
    }
    let mut all_pass = true;
    for target in targets {
        let started = Instant::now();
        let report = match run_verify_target(target, &config, &args) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {target}: {e}");
                return 1;
            }
        };
        let duration = started.elapsed().as_millis();
        print_report(&report);
        all_pass &= report.passed();
        if let Err(e) = write_report(&outdir, &report, duration) {
            eprintln!("error: cannot write report for {target}: {e}");
            return 1;
        }
    }
    if all_pass {
        0
    } else {
        1
    }
}

fn run_verify_target(
    target: &str,
    config: &RunConfig,
    args: &VerifyArgs,
) -> Result<ExperimentReport, LabError> {
    match target {
        "prop1" => prefix_bias_experiment(config.experiments.prefix_instances, config.seed),
        "prop2" => scaling_invariance_experiment(&ScalingSettings {
            phis: config.experiments.phi.clone(),
            steps: config.experiments.scaling_steps,
            lr: config.optimizer.lr,
            seed: config.seed.wrapping_add(2024),
        }),
        "prop3" => {
            let defaults = OvershootSettings::default();
            let beta_pairs = if args.beta1.is_some() || args.beta2.is_some() {
                vec![(
                    args.beta1.unwrap_or(config.optimizer.beta1),
                    args.beta2.unwrap_or(config.optimizer.beta2),
                )]
            } else {
                defaults.beta_pairs
            };
            overshoot_experiment(&OvershootSettings {
                beta_pairs,
                t_grid: config.experiments.overshoot_t.clone(),
                k_max: config.experiments.overshoot_k_max,
                seed: config.seed,
            })
        }
        "prop4" => loss_proxy_experiment(config.seed),
        "gradient-oracle" => {
            gradient_oracle_experiment(config.experiments.gradcheck_instances, config.seed)
        }
        "mu1" => mu1_inertness_experiment(config.seed),
        other => Err(LabError::Construction(format!(
            "unknown experiment `{other}`"
        ))),
    }
}

fn print_report(report: &ExperimentReport) {
    println!(
        "== {} (seed {}, config {})",
        report.name, report.seed, report.config_fingerprint
    );
    for c in &report.checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!(
            "  [{status}] {}: measured={:.12e} predicted={:.12e} tol={:.1e}",
            c.name, c.measured, c.predicted, c.tolerance
        );
    }
    for o in &report.observations {
        println!("  (obs) {} = {:.12e}", o.name, o.value);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{}: {verdict} ({} checks)",
        report.name.to_uppercase(),
        report.checks.len()
    );
}

/// The registry rows as strings: name, weights, ratio transform, regularizer.
pub fn zoo_listing() -> Vec<[String; 4]> {
    ALGORITHM_NAMES
        .iter()
        .map(|name| describe(name).expect("registered algorithm"))
        .collect()
}

fn zoo_list_command() -> i32 {
    let rows = zoo_listing();
    let widths: Vec<usize> = (0..4)
        .map(|col| rows.iter().map(|r| r[col].chars().count()).max().unwrap_or(0))
        .collect();
    let header = ["algorithm", "weights", "ratio", "regularizer"];
    let pad = |s: &str, w: usize| {
        let mut out = s.to_string();
        while out.chars().count() < w {
            out.push(' ');
        }
        out
    };
    println!(
        "{}  {}  {}  {}",
        pad(header[0], widths[0].max(header[0].len())),
        pad(header[1], widths[1].max(header[1].len())),
        pad(header[2], widths[2].max(header[2].len())),
        pad(header[3], widths[3].max(header[3].len()))
    );
    for row in &rows {
        println!(
            "{}  {}  {}  {}",
            pad(&row[0], widths[0].max(header[0].len())),
            pad(&row[1], widths[1].max(header[1].len())),
            pad(&row[2], widths[2].max(header[2].len())),
            pad(&row[3], widths[3].max(header[3].len()))
        );
    }
    0
}

fn report_command(dir: &Path) -> i32 {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", dir.display());
            return 2;
        }
    };
    let mut rows = Vec::new();
    for entry in entries.filter_map(|e| e.ok()) {
        let name = entry.file_name().to_string_lossy().to_string();
        if !name.ends_with(".json") || name.ends_with(".meta.json") {
            continue;
        }
        let bytes = match std::fs::read(entry.path()) {
            Ok(b) => b,
            Err(_) => continue,
        };
        if let Ok(report) = serde_json::from_slice::<ExperimentReport>(&bytes) {
            rows.push(report);
        }
    }
    if rows.is_empty() {
        eprintln!("error: no report files in {}", dir.display());
        return 2;
    }
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let mut all_pass = true;
    println!("{:<22} {:>7} {:>7}  verdict", "experiment", "checks", "failed");
    for r in &rows {
        let failed = r.checks.iter().filter(|c| !c.pass).count();
        all_pass &= r.passed();
        println!(
            "{:<22} {:>7} {:>7}  {}",
            r.name,
            r.checks.len(),
            failed,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if all_pass {
        0
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<String> {
        std::iter::once("grpolab")
            .chain(parts.iter().copied())
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(cli_main(&argv(&[])), 2);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(cli_main(&argv(&["frobnicate"])), 2);
    }

    #[test]
    fn unknown_verify_target_is_a_usage_error() {
        assert_eq!(cli_main(&argv(&["verify", "prop9"])), 2);
    }

    #[test]
    fn zoo_listing_has_ten_rows() {
        let rows = zoo_listing();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().any(|r| r[0] == "grpo-r1"));
        assert!(rows.iter().any(|r| r[0] == "gcpo"));
        assert_eq!(cli_main(&argv(&["zoo", "list"])), 0);
    }

    #[test]
    fn run_writes_the_report_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = cli_main(&argv(&[
            "run",
            "--algorithm",
            "dr-grpo",
            "--seed",
            "5",
            "--outer-iters",
            "2",
            "--inner-steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        for file in [
            "effective-config.toml",
            "training.csv",
            "training.json",
            "groups.txt",
            "policy.ckpt",
            "moments.ckpt",
        ] {
            assert!(out.join(file).exists(), "{file} missing");
        }
    }

    #[test]
    fn verify_mu1_exits_zero_and_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = cli_main(&argv(&[
            "verify",
            "mu1",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        assert!(out.join("mu1-inertness.json").exists());
        assert!(out.join("mu1-inertness.meta.json").exists());
    }

    #[test]
    fn bad_config_file_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "algorithm = \"grpo-r1\"\n[objective]\neps_low = 1.5\n").unwrap();
        let code = cli_main(&argv(&["run", "--config", path.to_str().unwrap()]));
        assert_eq!(code, 2);
    }
}
