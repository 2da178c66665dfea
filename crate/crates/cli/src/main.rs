use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kinlayer::collision::{k_theta_bound_table, CollisionOperator, GradConstants, ReducedOperator};
use kinlayer::field::Field;
use kinlayer::grids::VelocityGrid;
use kinlayer::io::csv_table;
use kinlayer::kinetic_weight::*;
use kinlayer::lab::Lab;
use kinlayer::spectral::{build_admissibility, compute_psi, solve_eigenpair, weighted_sup, ReducedBasis};
use kinlayer::suite::{bundle_of, run_verification_suite, NormReport, SuiteOptions, REPORT_SCHEMA};
use kinlayer::transport::{residual_check, solve_nonlinear, tune_boundary};
use kinlayer::LabConfig;
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "kinlayer", version, about = "Discrete-velocity boundary-layer laboratory")]
struct Cli {
    /// Flat `key = value` configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed of the sampled checks.
    #[arg(long, global = true, default_value_t = 20231017)]
    seed: u64,
    /// Worker threads (0 lets rayon decide).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble the collision operator and write the kernel-bound table.
    Assemble,
    /// Solve the slow eigenproblem for one or more drifts.
    Eigen {
        /// Comma-separated drifts; defaults to `phys.u`.
        #[arg(long, value_delimiter = ',')]
        u: Vec<f64>,
    },
    /// Solve the linear penalized problem with boundary data `εe^{−|ξ|²}`.
    SolveLinear,
    /// Solve the nonlinear problem and write the solution bundle.
    Solve {
        /// Keep `f_b = εe^{−|ξ|²}` instead of tuning it to admissibility.
        #[arg(long)]
        no_tune: bool,
    },
    /// Sample one lemma and write its verdict table.
    Verify {
        /// Lemma to sample.
        #[arg(long, value_enum)]
        lemma: Lemma,
        /// Number of samples.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Compute every regularity norm and write the tables.
    Norms,
    /// Run the verification suite; exits nonzero if a hard check fails.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum Lemma {
    Velocity,
    Nln,
    Chi,
    AlphaInt,
    KernelBound,
}

fn load_config(path: Option<&Path>) -> Result<LabConfig> {
    Ok(match path {
        Some(p) => LabConfig::from_file(p).with_context(|| format!("loading {}", p.display()))?,
        None => LabConfig::default(),
    })
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(out: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    write(out, name, &serde_json::to_string_pretty(value)?)
}

fn verdict_csv(rows: impl IntoIterator<Item = (usize, f64, f64, f64)>) -> String {
    csv_table(
        &["sample", "lhs", "rhs", "margin"],
        rows.into_iter().map(|(k, l, r, m)| vec![k as f64, l, r, m]),
    )
}

fn grid_of(cfg: &LabConfig) -> Result<VelocityGrid<f64>> {
    Ok(VelocityGrid::new(cfg.vel_radius, cfg.vel_n, cfg.vel_scheme, cfg.u)?)
}

fn assemble(cfg: &LabConfig, out: &Path) -> Result<()> {
    let grid = grid_of(cfg)?;
    let c = GradConstants::from_mode(cfg.kernel_constants);
    let full = CollisionOperator::assemble(&grid, c);
    let red = ReducedOperator::assemble(&grid, c, true);
    let table = k_theta_bound_table(&grid, &c, cfg.theta);
    let sup = table.iter().map(|r| r.value).fold(0.0f64, f64::max);
    write(
        out,
        "kernel_bound.csv",
        &csv_table(&["node", "speed", "value"], table.iter().map(|r| vec![r.node as f64, r.speed, r.value])),
    )?;
    let summary = json!({
        "operator_hash": cfg.operator_hash(),
        "nodes": grid.len(),
        "reduced": red.len(),
        "nu0": red.nu0,
        "ker_residuals": full.ker_residuals(&grid)?,
        "kernel_bound_sup": sup,
    });
    write_json(out, "operator.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn eigen(cfg: &LabConfig, out: &Path, us: &[f64]) -> Result<()> {
    let grid = grid_of(cfg)?;
    let op = ReducedOperator::assemble(&grid, GradConstants::from_mode(cfg.kernel_constants), true);
    let basis = ReducedBasis::new(&op);
    let opts = Lab::eigen_options(cfg);
    let (alpha, beta) = Lab::penalty_coefficients(cfg);
    let us = if us.is_empty() { vec![cfg.u] } else { us.to_vec() };
    let mut lines = String::new();
    for &u in &us {
        let mut sol = solve_eigenpair(&op, &basis, u, &opts)?;
        let psi = compute_psi(&op, &basis, &mut sol, cfg.eigen_delta_u, &opts)?;
        let adm = build_admissibility(&op, &basis, &sol, alpha, beta, cfg.gamma)?;
        let record = json!({
            "u": u,
            "tau": sol.tau,
            "w_phi": weighted_sup(&op, &sol.phi, cfg.theta),
            "w_psi": sol.psi.as_ref().map(|p| weighted_sup(&op, p, cfg.theta)),
            "normalization_residual": sol.normalization_residual,
            "eigen_residual": sol.eigen_residual,
            "gap": sol.gap,
            "psi": psi,
            "matrix": adm.matrix,
            "eigenvalues": adm.eigenvalues,
            "eigenvalue_margin": adm.distinctness_margin,
            "selected": adm.selected,
        });
        let line = serde_json::to_string(&record)?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    write(out, "eigen.jsonl", &lines)
}

fn solve_linear(cfg: &LabConfig, out: &Path) -> Result<()> {
    let lab = Lab::build(cfg)?;
    let sys = lab.system()?;
    let f_b = lab.family().boundary([0.0, 0.0]);
    let g = sys.solve_linear(&Field::zeros(sys.x.len(), lab.op.len()), &f_b)?;
    let h = vec![0.0; sys.x.len()];
    bundle_of(&lab, &sys, &g, &h, &[]).write(out)?;
    let (r1, r2) = lab.adm.residual(g.row(0));
    let summary = json!({
        "config_hash": cfg.hash(),
        "weighted_sup_g": g.rows().map(|r| weighted_sup(&lab.op, r, cfg.theta)).fold(0.0f64, f64::max),
        "admissibility": [r1, r2],
    });
    write_json(out, "solution.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn solve(cfg: &LabConfig, out: &Path, no_tune: bool) -> Result<()> {
    let lab = Lab::build(cfg)?;
    let gam = lab.gamma()?;
    let sys = lab.system()?;
    let family = lab.family();
    let (sol, coeffs, tuning) = if no_tune {
        let sol = solve_nonlinear(&sys, &gam, &family.boundary([0.0, 0.0]), lab.picard(), None)?;
        (sol, [0.0, 0.0], Vec::new())
    } else {
        let t = tune_boundary(&sys, &gam, &lab.adm, &family, cfg.tune_tol, cfg.tune_max_iter, lab.picard())?;
        (t.solution, t.coeffs, t.residual_history)
    };
    bundle_of(&lab, &sys, &sol.g, &sol.h, &sol.history).write(out)?;
    let res = residual_check(&sys, &lab.op, &gam, &sol.g, &sol.h)?;
    let (r1, r2) = lab.adm.residual(sol.g.row(0));
    let summary = json!({
        "config_hash": cfg.hash(),
        "tuned": !no_tune,
        "coeffs": coeffs,
        "tuning_history": tuning,
        "picard_iterations": sol.iterations,
        "weighted_sup_g": sol.g.rows().map(|r| weighted_sup(&lab.op, r, cfg.theta)).fold(0.0f64, f64::max),
        "sup_h": sol.h.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        "admissibility": [r1, r2],
        "residual_penalized": res.max_penalized,
        "residual_original": res.max_original,
    });
    write_json(out, "solution.json", &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn verify(cfg: &LabConfig, out: &Path, lemma: Lemma, samples: usize, seed: u64) -> Result<bool> {
    let summary = match lemma {
        Lemma::Velocity => {
            let grid = grid_of(cfg)?;
            let op = ReducedOperator::assemble(&grid, GradConstants::from_mode(cfg.kernel_constants), true);
            let spec = WeightSpec::new(op.nu0, cfg.u)?;
            let v = verify_velocity_lemma(&spec, samples, seed, 1e-12);
            write(out, "verify_velocity.csv", &verdict_csv(v.rows.iter().map(|r| (r.sample, r.lhs, r.rhs, r.margin))))?;
            json!({"lemma": "velocity", "samples": v.samples, "violations": v.violations, "worst_margin": v.worst_margin, "passed": v.passed()})
        }
        Lemma::Nln => {
            let grid = grid_of(cfg)?;
            let op = ReducedOperator::assemble(&grid, GradConstants::from_mode(cfg.kernel_constants), true);
            let spec = WeightSpec::new(op.nu0, cfg.u)?;
            let q = NlnQuadrature::new(&grid, cfg.nln_c, cfg.theta);
            let t = cfg.duhamel_t.unwrap_or(40.0 / op.nu0);
            let mut families = Vec::new();
            for (k, variant) in [NlnVariant::Singular, NlnVariant::Inner, NlnVariant::Two].into_iter().enumerate() {
                for (l, regime) in [NlnRegime::Long, NlnRegime::Short].into_iter().enumerate() {
                    let s = nln_samples(cfg.u, t, regime, samples, seed.wrapping_add((2 * k + l) as u64));
                    let fit = fit_nln(&q, &spec, variant, regime, &s, 1e-8)?;
                    let name = format!("verify_nln_{variant:?}_{regime:?}.csv").to_lowercase();
                    let rows = fit.values.iter().enumerate().map(|(i, v)| {
                        let rhs = fit.constant * v.normalizer;
                        (i, v.value, rhs, rhs - v.value)
                    });
                    write(out, &name, &verdict_csv(rows))?;
                    families.push(json!({"variant": variant, "regime": regime, "samples": fit.samples, "constant": fit.constant}));
                }
            }
            let passed = families.iter().all(|f| f["constant"].as_f64().is_some_and(f64::is_finite));
            json!({"lemma": "nln", "families": families, "passed": passed})
        }
        Lemma::Chi => {
            let n = samples.max(2);
            let rows: Vec<_> = (0..n)
                .map(|k| {
                    let s = 8.0 * k as f64 / (n - 1) as f64;
                    let lhs = s * chi_prime(s) - 4.0 * chi_unchecked(s);
                    (k, lhs, 0.0, -lhs)
                })
                .collect();
            write(out, "verify_chi.csv", &verdict_csv(rows))?;
            let a = audit_chi(n, 8.0);
            let passed = a.chi_quarter == 0.25 && a.chi_five == 1.0 && a.max_s_chi_prime_minus_4chi <= 0.0 && a.max_chi_prime <= 1.0;
            json!({"lemma": "chi", "audit": a, "passed": passed})
        }
        Lemma::AlphaInt => {
            let ps = [1.0, 1.5, 1.9];
            let mut rows = Vec::new();
            for k in 0..samples.max(1) {
                let p = ps[k % ps.len()];
                let delta = 10f64.powf(-1.0 - (k / ps.len()) as f64);
                if delta < 1e-12 {
                    break;
                }
                let limit = alpha_integrability(p, 0.0, 1e-12)?;
                let partial = alpha_integrability(p, delta, 1e-10)?;
                rows.push((k, partial, limit, limit - partial));
            }
            write(out, "verify_alpha_int.csv", &verdict_csv(rows.iter().copied()))?;
            let exact = 2.0 * (1.0 + 2f64.sqrt()).ln();
            let p1 = alpha_integrability(1.0, 0.0, 1e-12)?;
            let passed = (p1 - exact).abs() < 1e-4 && rows.iter().all(|r| r.3 >= -1e-8);
            json!({"lemma": "alpha-int", "p1": p1, "exact_p1": exact, "rows": rows.len(), "passed": passed})
        }
        Lemma::KernelBound => {
            let grid = grid_of(cfg)?;
            let table = k_theta_bound_table(&grid, &GradConstants::from_mode(cfg.kernel_constants), cfg.theta);
            let sup = table.iter().map(|r| r.value).fold(0.0f64, f64::max);
            write(out, "verify_kernel_bound.csv", &verdict_csv(table.iter().map(|r| (r.node, r.value, sup, sup - r.value))))?;
            json!({"lemma": "kernel-bound", "nodes": table.len(), "sup": sup, "passed": sup.is_finite()})
        }
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(summary["passed"].as_bool().unwrap_or(false))
}

fn write_tables(report: &NormReport, out: &Path) -> Result<()> {
    if let Some(c1) = &report.c1_profile {
        write(
            out,
            "c1_profile.csv",
            &csv_table(&["x", "weighted_c1"], c1.x.iter().zip(&c1.profile).map(|(x, p)| vec![*x, *p])),
        )?;
    }
    if let Some(reg) = &report.regularity {
        write(out, "w1p.csv", &csv_table(&["p", "value"], reg.w1p.iter().map(|r| vec![r.p, r.value])))?;
        write(
            out,
            "h1loc.csv",
            &csv_table(&["delta", "value", "reference"], reg.h1loc.iter().map(|r| vec![r.delta, r.value, r.reference])),
        )?;
        let g = &reg.grazing;
        write(
            out,
            "grazing.csv",
            &csv_table(
                &["s", "boundary", "interior"],
                (0..g.s.len()).map(|k| vec![g.s[k], g.boundary[k], g.interior[k]]),
            ),
        )?;
    }
    write(
        out,
        "checks.csv",
        &csv_table(
            &["index", "passed", "value", "limit"],
            report
                .checks
                .iter()
                .enumerate()
                .map(|(k, c)| vec![k as f64, f64::from(u8::from(c.passed)), c.value, c.limit]),
        ),
    )
}

fn run(cli: Cli) -> Result<bool> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "config.cfg", &cfg.canonical())?;
    match cli.command {
        Command::Assemble => assemble(&cfg, out).map(|_| true),
        Command::Eigen { u } => eigen(&cfg, out, &u).map(|_| true),
        Command::SolveLinear => solve_linear(&cfg, out).map(|_| true),
        Command::Solve { no_tune } => solve(&cfg, out, no_tune).map(|_| true),
        Command::Verify { lemma, samples } => verify(&cfg, out, lemma, samples, cli.seed),
        Command::Norms | Command::Report => {
            let norms = matches!(cli.command, Command::Norms);
            let opts = SuiteOptions {
                seed: cli.seed,
                ..SuiteOptions::default()
            };
            let run = run_verification_suite(&cfg, &opts)?;
            if run.report.schema != REPORT_SCHEMA {
                bail!("unexpected report schema {}", run.report.schema);
            }
            write(out, "report.json", &run.report.to_json()?)?;
            if norms {
                write_tables(&run.report, out)?;
            }
            for c in run.report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAILED {}: {}", c.name, c.detail);
            }
            Ok(norms || run.report.passed())
        }
    }
}

fn main() {
    match run(Cli::parse()) {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}
