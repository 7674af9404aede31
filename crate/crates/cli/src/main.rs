//! Command-line interface for the JSQ Halfin-Whitt numerical laboratory.
//!
//! Every subcommand builds the requested objects, writes CSV reports with a
//! header row into the output directory, and records a run manifest listing
//! each output file with an FNV-1a content hash. Identical configuration
//! and seed yield byte-identical outputs.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{fnv1a, FileConfig};
use jsq_lab::coupling::{
    cycle_phase_estimates, default_coupling_grid, estimate_coupling_time, marginal_law_check,
};
use jsq_lab::diffusion::{rate_conservation_check, simulate_reflected, C2Fn, DiffusionConfig};
use jsq_lab::exact::{solve_poisson, stationary_distribution, stein_factor_report};
use jsq_lab::fluid::{
    drift_sample_states, lyapunov_drift_check, transport_identity_residual, LyapunovFn,
};
use jsq_lab::grid::verify_membership;
use jsq_lab::ruin::{absorbing_oracle, ct_duration_mgf, duration_pgf, ruin_probability, RuinSpec};
use jsq_lab::stein::{
    convergence_rate_experiment, region_b_probes, EpsilonEvaluator, RateBudget, RegionB,
};
use jsq_lab::{Instance, ModelParams, TestFunction};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "jsq-lab",
    about = "Numerical laboratory for the join-the-shortest-queue system in heavy traffic",
    version
)]
struct Cli {
    /// Optional key = value configuration file supplying defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV reports and the run manifest.
    /// Defaults to $JSQ_LAB_OUT or ./jsq-lab-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Number of servers.
    #[arg(long)]
    n: Option<u32>,
    /// Buffer length per server.
    #[arg(long)]
    b: Option<u32>,
    /// Slack parameter.
    #[arg(long)]
    beta: Option<f64>,
}

impl ModelArgs {
    fn resolve(&self, cfg: &FileConfig) -> Result<ModelParams, String> {
        let n = resolve(self.n, cfg, "model.n")?.ok_or("missing --n")?;
        let b = resolve(self.b, cfg, "model.b")?.unwrap_or(1);
        let beta = resolve(self.beta, cfg, "model.beta")?.unwrap_or(1.0);
        ModelParams::new(n, b, beta).map_err(|e| e.to_string())
    }
}

fn resolve<T: std::str::FromStr + Copy>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    cfg.get_parsed::<T>(key)
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stationary distribution of the chain.
    Solve {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Poisson-equation solution for one observable.
    Poisson {
        #[command(flatten)]
        model: ModelArgs,
        /// Observable name (x1, x2, x1_plus_x2, abs_total_minus_beta,
        /// one_minus_exp, saturating_product).
        #[arg(long, default_value = "x1_plus_x2")]
        h: String,
    },
    /// Finite-difference table of the Poisson solution with envelopes.
    Factors {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "x1_plus_x2")]
        h: String,
    },
    /// Coupling-time statistics over an initial grid.
    Couple {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also compare the coupled second marginal against the exact
        /// transient law at this time.
        #[arg(long)]
        marginal_t: Option<f64>,
    },
    /// Cycle-phase probabilities and hitting-time estimates.
    Cycles {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the cycle geometry constant.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Gambler's-ruin closed forms with the absorbing-chain oracle.
    Ruin {
        /// Up-step probability.
        #[arg(long)]
        p: f64,
        /// Down-step probability (must agree with 1 - p).
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        z: u64,
        #[arg(long)]
        a: u64,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        /// Evaluate the duration generating function here.
        #[arg(long)]
        s: Option<f64>,
    },
    /// Reflected-diffusion moments and rate-conservation checks.
    Diffuse {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        burn_in: Option<f64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dump the first N steps of one path.
        #[arg(long)]
        dump: Option<usize>,
    },
    /// Interpolation property suite.
    SplineCheck,
    /// Error-term statistics over quasi-random points of the comparison
    /// region.
    Epsilon {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "x1_plus_x2")]
        h: String,
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Convergence-rate experiment over a ladder of system sizes.
    Rate {
        /// Comma-separated ladder, e.g. 25,100,400.
        #[arg(long, value_delimiter = ',')]
        n: Vec<u32>,
        #[arg(long)]
        b: Option<u32>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Lyapunov drift verification.
    Lyapunov {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        samples: Option<usize>,
    },
}

struct Reporter {
    out_dir: PathBuf,
    manifest: Vec<(String, u64, usize)>,
    summary: Vec<String>,
}

impl Reporter {
    fn new(out_dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Reporter {
            out_dir: out_dir.to_path_buf(),
            manifest: Vec::new(),
            summary: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> std::io::Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, content)?;
        self.manifest
            .push((name.to_string(), fnv1a(content.as_bytes()), content.len()));
        Ok(())
    }

    fn note(&mut self, line: String) {
        println!("{line}");
        self.summary.push(line);
    }

    fn finish(&mut self, command: &str) -> std::io::Result<()> {
        let mut manifest = String::new();
        manifest.push_str(&format!("command={command}\n"));
        manifest.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
        for line in &self.summary {
            manifest.push_str(&format!("note={line}\n"));
        }
        for (name, hash, bytes) in &self.manifest {
            manifest.push_str(&format!("file={name} fnv1a={hash:016x} bytes={bytes}\n"));
        }
        std::fs::write(self.out_dir.join("manifest.txt"), manifest)
    }
}

fn parse_h(name: &str, beta: f64) -> Result<TestFunction, String> {
    TestFunction::family(beta)
        .into_iter()
        .find(|h| h.name() == name)
        .ok_or_else(|| format!("unknown observable {name:?}"))
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            FileConfig::parse(&text).map_err(|e| e.to_string())?
        }
        None => FileConfig::default(),
    };
    let out_dir = cli
        .out
        .or_else(|| std::env::var_os("JSQ_LAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("jsq-lab-out"));
    let mut rep = Reporter::new(&out_dir).map_err(|e| e.to_string())?;
    let label = format!("{:?}", cli.command);
    match cli.command {
        Command::Solve { model } => {
            let params = model.resolve(&cfg)?;
            let inst = Instance::build(params).map_err(|e| e.to_string())?;
            let pi = stationary_distribution(&inst).map_err(|e| e.to_string())?;
            let mut csv = String::new();
            for i in 1..=params.dim() {
                csv.push_str(&format!("q{i},"));
            }
            csv.push_str("pi\n");
            for (i, q) in inst.space.states().iter().enumerate() {
                for v in &q.0 {
                    csv.push_str(&format!("{v},"));
                }
                csv.push_str(&format!("{:e}\n", pi.values[i]));
            }
            rep.write("stationary.csv", &csv)
                .map_err(|e| e.to_string())?;
            let sum_x: f64 = inst
                .space
                .states()
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let x = inst.space.scaled(i);
                    pi.values[i] * x.0.iter().sum::<f64>()
                })
                .sum();
            rep.note(format!(
                "states={} sum_pi_x={:.8} residual_target=1e-12",
                inst.space.len(),
                sum_x
            ));
        }
        Command::Poisson { model, h } => {
            let params = model.resolve(&cfg)?;
            let h = parse_h(&h, params.beta)?;
            let inst = Instance::build(params).map_err(|e| e.to_string())?;
            let pi = stationary_distribution(&inst).map_err(|e| e.to_string())?;
            let sol = solve_poisson(&inst, h, &pi).map_err(|e| e.to_string())?;
            let mut csv = String::new();
            for i in 1..=params.dim() {
                csv.push_str(&format!("q{i},"));
            }
            csv.push_str("h,f\n");
            for (i, q) in inst.space.states().iter().enumerate() {
                for v in &q.0 {
                    csv.push_str(&format!("{v},"));
                }
                csv.push_str(&format!("{:e},{:e}\n", sol.h.values[i], sol.f.values[i]));
            }
            rep.write("poisson.csv", &csv).map_err(|e| e.to_string())?;
            rep.note(format!(
                "h={} expected_h={:.10} residual={:.3e}",
                h.name(),
                sol.expected_h,
                sol.residual
            ));
        }
        Command::Factors { model, h } => {
            let params = model.resolve(&cfg)?;
            let h = parse_h(&h, params.beta)?;
            let inst = Instance::build(params).map_err(|e| e.to_string())?;
            let pi = stationary_distribution(&inst).map_err(|e| e.to_string())?;
            let membership = verify_membership(&params, &inst.space, h);
            let sol = solve_poisson(&inst, h, &pi).map_err(|e| e.to_string())?;
            let report = stein_factor_report(&inst, &sol.f);
            rep.write("factors.csv", &report.to_csv(params.dim()))
                .map_err(|e| e.to_string())?;
            rep.note(format!(
                "h={} class_ok={} max_norm_diff={:.4}",
                h.name(),
                membership.holds,
                membership.max_normalized_difference
            ));
            for (label, value) in &report.max_normalized {
                rep.note(format!("max_normalized[{label}]={value:.6}"));
            }
        }
        Command::Couple {
            model,
            reps,
            seed,
            marginal_t,
        } => {
            let params = model.resolve(&cfg)?;
            let reps = resolve(reps, &cfg, "couple.reps")?.unwrap_or(2000);
            let seed = resolve(seed, &cfg, "seed")?.unwrap_or(1);
            let grid = default_coupling_grid(&params);
            let stats =
                estimate_coupling_time(&params, &grid, reps, seed).map_err(|e| e.to_string())?;
            rep.write("coupling.csv", &stats.to_csv(&params))
                .map_err(|e| e.to_string())?;
            rep.note(format!(
                "cells={} reps={} max_envelope_ratio={:.4}",
                stats.cells.len(),
                reps,
                stats.max_envelope_ratio
            ));
            if let Some(t) = marginal_t {
                let inst = Instance::build(params).map_err(|e| e.to_string())?;
                let q0 = inst.space.state(inst.space.empty_index()).clone();
                let check =
                    marginal_law_check(&inst, &q0, 1, t, TestFunction::SumFirstTwo, reps, seed)
                        .map_err(|e| e.to_string())?;
                rep.note(format!("marginal_t={t} max_gap_se={:.3}", check.max_gap_se));
            }
        }
        Command::Cycles {
            model,
            reps,
            seed,
            gamma,
        } => {
            let params = model.resolve(&cfg)?;
            let reps = resolve(reps, &cfg, "cycles.reps")?.unwrap_or(1000);
            let seed = resolve(seed, &cfg, "seed")?.unwrap_or(1);
            let report =
                cycle_phase_estimates(&params, reps, seed, gamma).map_err(|e| e.to_string())?;
            let mut csv = String::from("quantity,value,se,extra\n");
            match &report.rebuild_probability {
                Some((stat, bound)) => {
                    csv.push_str(&format!(
                        "rebuild_probability,{:e},{:e},bound={:e}\n",
                        stat.mean, stat.se, bound
                    ));
                }
                None => csv.push_str("rebuild_probability,,,not_applicable\n"),
            }
            for (q, t) in &report.cycle_start_times {
                csv.push_str(&format!("cycle_start_from_{q},{:e},{:e},\n", t.mean, t.se));
            }
            match &report.coupling_before_full {
                Some(p) => {
                    csv.push_str(&format!("coupling_before_full,{:e},{:e},\n", p.mean, p.se))
                }
                None => csv.push_str("coupling_before_full,,,not_applicable\n"),
            }
            rep.write("cycles.csv", &csv).map_err(|e| e.to_string())?;
            rep.note(format!(
                "theta1={} theta2={} gamma={:.3}",
                report.geometry.theta1, report.geometry.theta2, report.geometry.gamma
            ));
        }
        Command::Ruin {
            p,
            q,
            z,
            a,
            rate,
            s,
        } => {
            if let Some(qv) = q {
                if (p + qv - 1.0).abs() > 1e-12 {
                    return Err(format!("p + q must equal 1, got {p} + {qv}"));
                }
            }
            let spec = RuinSpec::new(p, z, a, rate).map_err(|e| e.to_string())?;
            let ruin = ruin_probability(&spec);
            let mgf = ct_duration_mgf(&spec).map_err(|e| e.to_string())?;
            let oracle = absorbing_oracle(&spec, s).map_err(|e| e.to_string())?;
            let mut csv = String::from("quantity,closed_form,oracle\n");
            csv.push_str(&format!(
                "ruin_probability,{:e},{:e}\n",
                ruin, oracle.ruin_probability
            ));
            csv.push_str(&format!(
                "expected_duration,,{:e}\n",
                oracle.expected_duration
            ));
            csv.push_str(&format!("ct_duration_mgf,{mgf:e},\n"));
            if let Some(s) = s {
                let pgf = duration_pgf(&spec, s).map_err(|e| e.to_string())?;
                csv.push_str(&format!(
                    "duration_pgf_at_{s},{:e},{:e}\n",
                    pgf,
                    oracle.pgf.unwrap()
                ));
            }
            rep.write("ruin.csv", &csv).map_err(|e| e.to_string())?;
            rep.note(format!("ruin_probability={ruin:.10}"));
        }
        Command::Diffuse {
            beta,
            dt,
            horizon,
            burn_in,
            reps,
            seed,
            dump,
        } => {
            let beta = resolve(beta, &cfg, "diffuse.beta")?.unwrap_or(1.0);
            let mut dcfg = DiffusionConfig::new(beta);
            if let Some(v) = resolve(dt, &cfg, "diffuse.dt")? {
                dcfg.dt = v;
            }
            if let Some(v) = resolve(horizon, &cfg, "diffuse.horizon")? {
                dcfg.horizon = v;
            }
            if let Some(v) = resolve(burn_in, &cfg, "diffuse.burn_in")? {
                dcfg.burn_in = v;
            }
            dcfg.seed = resolve(seed, &cfg, "seed")?.unwrap_or(0);
            let reps = resolve(reps, &cfg, "diffuse.reps")?.unwrap_or(4);
            dcfg.validate().map_err(|e| e.to_string())?;
            let mut csv = String::from("replication,mean_y1,mean_y2,u_total,time\n");
            for r in 0..reps as u64 {
                let acc = simulate_reflected(&dcfg, r).map_err(|e| e.to_string())?;
                csv.push_str(&format!(
                    "{r},{:e},{:e},{:e},{:e}\n",
                    acc.mean_y1(),
                    acc.mean_y2(),
                    acc.u_total,
                    acc.time
                ));
            }
            rep.write("diffusion.csv", &csv)
                .map_err(|e| e.to_string())?;
            struct Y1;
            impl C2Fn for Y1 {
                fn value(&self, y1: f64, _: f64) -> f64 {
                    y1
                }
                fn d1(&self, _: f64, _: f64) -> f64 {
                    1.0
                }
                fn d2(&self, _: f64, _: f64) -> f64 {
                    0.0
                }
                fn d11(&self, _: f64, _: f64) -> f64 {
                    0.0
                }
            }
            let rc = rate_conservation_check(&Y1, &dcfg, reps).map_err(|e| e.to_string())?;
            rep.note(format!(
                "rate_conservation_y1 gap={:.4e} gap_se_units={:.2}",
                rc.gap.mean, rc.gap_in_se
            ));
            if let Some(steps) = dump {
                let path_dump =
                    jsq_lab::diffusion::dump_path(&dcfg, 0, steps).map_err(|e| e.to_string())?;
                rep.write("path_dump.csv", &path_dump)
                    .map_err(|e| e.to_string())?;
            }
        }
        Command::SplineCheck => {
            let mut csv = String::from("property,status,detail\n");
            let mut all_ok = true;
            {
                let mut check = |name: &str, ok: bool, detail: String| {
                    csv.push_str(&format!(
                        "{name},{},{detail}\n",
                        if ok { "pass" } else { "FAIL" }
                    ));
                    all_ok &= ok;
                };
                let mut worst_sum = 0.0f64;
                for i in 0..1000 {
                    let t = i as f64 / 1000.0;
                    let w = jsq_lab::spline::weights(t).unwrap();
                    worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
                }
                check(
                    "weights_sum_to_one",
                    worst_sum <= 1e-12,
                    format!("max|sum-1|={worst_sum:.2e}"),
                );
                let w0 = jsq_lab::spline::weights(0.0).unwrap();
                check(
                    "collocation_at_node",
                    w0 == [1.0, 0.0, 0.0, 0.0, 0.0],
                    format!("weights(0)={w0:?}"),
                );
                let d0 = jsq_lab::spline::weight_derivs(0.0, 1).unwrap();
                let expected = [-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0, 0.0];
                let dev = d0
                    .iter()
                    .zip(expected.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                check(
                    "node_derivative_stencil",
                    dev <= 1e-12,
                    format!("max_dev={dev:.2e}"),
                );
            }
            rep.write("spline_check.csv", &csv)
                .map_err(|e| e.to_string())?;
            rep.note(format!("all_ok={all_ok}"));
            if !all_ok {
                rep.finish(&label).map_err(|e| e.to_string())?;
                return Err("spline property suite failed".into());
            }
        }
        Command::Epsilon { model, h, probes } => {
            let params = model.resolve(&cfg)?;
            let h = parse_h(&h, params.beta)?;
            let probes = resolve(probes, &cfg, "epsilon.probes")?.unwrap_or(1000);
            let inst = Instance::build(params).map_err(|e| e.to_string())?;
            let pi = stationary_distribution(&inst).map_err(|e| e.to_string())?;
            let sol = solve_poisson(&inst, h, &pi).map_err(|e| e.to_string())?;
            let eval = EpsilonEvaluator::new(&inst, &sol.f, h, &pi).map_err(|e| e.to_string())?;
            let region = RegionB::new(&params).map_err(|e| e.to_string())?;
            let points = region_b_probes(&region, probes);
            let mut csv = String::from("x1,x2,e1,e3,envelope,ratio\n");
            let mut worst: f64 = 0.0;
            for x in &points {
                let eps = eval.epsilon_terms(x).map_err(|e| e.to_string())?;
                let envelope = eval.e1_envelope(x);
                let ratio = if envelope > 0.0 {
                    eps.e1.abs() / envelope
                } else {
                    0.0
                };
                worst = worst.max(ratio);
                csv.push_str(&format!(
                    "{:e},{:e},{:e},{:e},{:e},{:e}\n",
                    x[0], x[1], eps.e1, eps.e3, envelope, ratio
                ));
            }
            rep.write("epsilon.csv", &csv).map_err(|e| e.to_string())?;
            rep.note(format!(
                "probes={} fitted_envelope_constant={:.4}",
                points.len(),
                worst
            ));
        }
        Command::Rate {
            n,
            b,
            beta,
            reps,
            horizon,
            seed,
        } => {
            if n.is_empty() {
                return Err("--n requires at least one system size".into());
            }
            if n.len() < 3 {
                rep.note("warning: fewer than 3 ladder points, slope fit degenerate".into());
            }
            let b = resolve(b, &cfg, "model.b")?.unwrap_or(1);
            let beta = resolve(beta, &cfg, "model.beta")?.unwrap_or(1.0);
            let mut budget = RateBudget::default();
            if let Some(v) = resolve(reps, &cfg, "rate.reps")? {
                budget.replications = v;
            }
            if let Some(v) = resolve(horizon, &cfg, "rate.horizon")? {
                budget.horizon = v;
            }
            budget.seed = resolve(seed, &cfg, "seed")?.unwrap_or(budget.seed);
            let family = TestFunction::family(beta);
            let fit = convergence_rate_experiment(&n, b, beta, &family, &budget)
                .map_err(|e| e.to_string())?;
            rep.write("rate.csv", &fit.to_csv(b, beta))
                .map_err(|e| e.to_string())?;
            rep.write("rate_plot.csv", &fit.plot_data())
                .map_err(|e| e.to_string())?;
            for (name, slope) in &fit.per_h_slopes {
                rep.note(format!("slope[{name}]={slope:.4}"));
            }
            if let Some(pooled) = fit.pooled_slope {
                rep.note(format!("pooled_slope={pooled:.4}"));
            }
            if !fit.all_se_ok {
                rep.note("warning: some cells have standard error above gap/3".into());
            }
        }
        Command::Lyapunov { model, samples } => {
            let params = model.resolve(&cfg)?;
            let samples = resolve(samples, &cfg, "lyapunov.samples")?.unwrap_or(24);
            let states = drift_sample_states(&params, samples);
            let report = lyapunov_drift_check(&params, &states).map_err(|e| e.to_string())?;
            rep.write("lyapunov.csv", &report.to_csv(params.dim()))
                .map_err(|e| e.to_string())?;
            rep.note(format!(
                "eligible={} excluded={} all_within_cushion={}",
                report.rows.len(),
                report.excluded,
                report.all_within_cushion
            ));
            let lyap = LyapunovFn::new(&params);
            let resid = transport_identity_residual(&lyap, 1.0, lyap.kappa2 + 1.0)
                .map_err(|e| e.to_string())?;
            rep.note(format!("transport_identity_residual={resid:.3e}"));
            if !report.all_within_cushion {
                rep.finish(&label).map_err(|e| e.to_string())?;
                return Err("drift bound violated beyond the cushion".into());
            }
        }
    }
    rep.finish(&label).map_err(|e| e.to_string())?;
    Ok(())
}
