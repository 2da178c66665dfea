//! Acceptance gate: every criterion prints one PASS/FAIL line and the
//! process exits nonzero if any fails.

use kinlayer::collision::{grad_kernel, k_theta_bound_table, CollisionOperator, GradConstants, ReducedOperator};
use kinlayer::grids::{VelocityGrid, VelocityScheme};
use kinlayer::kinetic_weight::*;
use kinlayer::lab::Lab;
use kinlayer::spectral::{build_basis, solve_eigenpair, weighted_sup};
use kinlayer::suite::{run_verification_suite, NormReport, SuiteOptions};
use kinlayer::transport::{residual_check, solve_nonlinear};
use kinlayer::{LabConfig, LabError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

type Outcome = Result<(bool, String)>;

fn drift(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn grid(radius: f64, n: usize) -> Result<VelocityGrid<f64>> {
    VelocityGrid::new(radius, n, VelocityScheme::Uniform, 0.02)
}

fn hydrodynamic_basis() -> Outcome {
    let (_, rep) = build_basis(&grid(6.0, 16)?, 1.0, 1.0)?;
    let expected = (5.0f64 / 3.0).sqrt();
    let flux_plus = rep.flux[0];
    let ok = (flux_plus - expected).abs() < 1e-2 && rep.orthonormality_error < 1e-3 && rep.flux[1].abs() < 1e-3;
    Ok((
        ok,
        format!(
            "<ξ₁X₊²> = {flux_plus:.9} (target {expected:.9}), orthonormality {:.2e}, <ξ₁X₀²> = {:.2e}",
            rep.orthonormality_error, rep.flux[1]
        ),
    ))
}

fn collision_kernel() -> Outcome {
    let c = GradConstants::physical();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut asym = 0usize;
    for _ in 0..10_000 {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-6.0..6.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(-6.0..6.0));
        if grad_kernel(&a, &b, &c)? != grad_kernel(&b, &a, &c)? {
            asym += 1;
        }
    }
    let coarse_grid = grid(5.0, 8)?;
    let fine_grid = grid(6.0, 12)?;
    let coarse = CollisionOperator::assemble(&coarse_grid, c).ker_residuals(&coarse_grid)?;
    let fine = CollisionOperator::assemble(&fine_grid, c).ker_residuals(&fine_grid)?;
    let decreasing = coarse.iter().zip(&fine).all(|(a, b)| b < a);
    let sup = |n: usize| -> Result<f64> {
        let g = grid(6.0, n)?;
        Ok(k_theta_bound_table(&g, &c, 0.1).iter().map(|r| r.value).fold(0.0, f64::max))
    };
    let (s12, s16) = (sup(12)?, sup(16)?);
    let ok = asym == 0 && decreasing && drift(s12, s16) <= 0.2;
    Ok((
        ok,
        format!(
            "asymmetric pairs {asym}/10000, ker residual max {:.3} -> {:.3}, sup(1+|ξ|)∫k_θ {s12:.3} -> {s16:.3}",
            coarse.iter().fold(0.0f64, |m, v| m.max(*v)),
            fine.iter().fold(0.0f64, |m, v| m.max(*v))
        ),
    ))
}

fn velocity_lemma() -> Outcome {
    let g = grid(6.0, 8)?;
    let op = ReducedOperator::assemble(&g, GradConstants::physical(), true);
    let spec = WeightSpec::new(op.nu0, 0.02)?;
    let v = verify_velocity_lemma(&spec, 10_000, 1, 1e-12);
    Ok((
        v.samples == 10_000 && v.violations == 0,
        format!("{} samples, {} violations, worst margin {:.3e}", v.samples, v.violations, v.worst_margin),
    ))
}

fn cut_off() -> Outcome {
    let a = audit_chi(1_000_001, 8.0);
    let ok = chi(0.25f64)? == 0.25 && chi(5.0f64)? == 1.0 && a.max_s_chi_prime_minus_4chi <= 0.0 && a.max_chi_prime <= 1.0;
    Ok((
        ok,
        format!(
            "χ(0.25) = {}, χ(5) = {}, max sχ′−4χ = {:.3e}, max χ′ = {}",
            a.chi_quarter, a.chi_five, a.max_s_chi_prime_minus_4chi, a.max_chi_prime
        ),
    ))
}

fn nln_constants() -> Outcome {
    let theta = 0.1;
    let families = [
        (NlnVariant::Singular, NlnRegime::Long),
        (NlnVariant::Singular, NlnRegime::Short),
        (NlnVariant::Inner, NlnRegime::Long),
        (NlnVariant::Inner, NlnRegime::Short),
        (NlnVariant::Two, NlnRegime::Long),
        (NlnVariant::Two, NlnRegime::Short),
    ];
    let fit = |n: usize| -> Result<Vec<f64>> {
        let g = grid(6.0, n)?;
        let op = ReducedOperator::assemble(&g, GradConstants::physical(), true);
        let spec = WeightSpec::new(op.nu0, 0.02)?;
        let q = NlnQuadrature::new(&g, 1.0 / 16.0, theta);
        let t = 40.0 / op.nu0;
        families
            .iter()
            .enumerate()
            .map(|(k, &(variant, regime))| {
                let s = nln_samples(0.02, t, regime, 200, 11 + k as u64);
                Ok(fit_nln(&q, &spec, variant, regime, &s, 1e-8)?.constant)
            })
            .collect()
    };
    let (c8, c16) = (fit(8)?, fit(16)?);
    let worst = c8.iter().zip(&c16).map(|(a, b)| drift(*a, *b)).fold(0.0f64, f64::max);
    let bounded = c8.iter().chain(&c16).all(|c| c.is_finite() && *c > 0.0);
    Ok((
        bounded && worst <= 0.3,
        format!("6 families × 200 samples, constants at N=16 {c16:.3?}, worst drift N 8->16 {:.1}%", 100.0 * worst),
    ))
}

fn eigenpair() -> Outcome {
    let mut w = Vec::new();
    let mut ratios = Vec::new();
    let mut norm = 0.0f64;
    for n in [8usize, 16] {
        let cfg = LabConfig {
            vel_n: n,
            ..LabConfig::default()
        };
        let lab = Lab::build(&cfg)?;
        let psi = lab.eigen.psi.as_ref().expect("ψ is computed by Lab::build");
        w.push((weighted_sup(&lab.op, &lab.eigen.phi, cfg.theta), weighted_sup(&lab.op, psi, cfg.theta)));
        norm = norm.max(lab.eigen.normalization_residual);
        if n == 16 {
            let opts = Lab::eigen_options(&cfg);
            for u in [0.01, 0.02, 0.04] {
                let e = solve_eigenpair(&lab.op, &lab.basis, u, &opts)?;
                norm = norm.max(e.normalization_residual);
                ratios.push(e.tau.abs() / u);
            }
        }
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0f64, f64::max);
    let spread = (hi - lo) / hi;
    let (rp, rq) = (w[1].0 / w[0].0, w[1].1 / w[0].1);
    let in_band = |r: f64| (0.5..=2.0).contains(&r);
    Ok((
        spread < 0.25 && norm < 1e-10 && in_band(rp) && in_band(rq),
        format!(
            "|τ|/u {ratios:.4?} (spread {:.2}%), normalization {norm:.1e}, ‖wφ‖ ratio {rp:.3}, ‖wψ‖ ratio {rq:.3}",
            100.0 * spread
        ),
    ))
}

fn small_amplitude() -> Outcome {
    let base = LabConfig {
        vel_n: 10,
        ..LabConfig::default()
    };
    let mut consts = Vec::new();
    let mut iterations = Vec::new();
    for eps in [base.eps, base.eps / 2.0] {
        let cfg = LabConfig { eps, ..base.clone() };
        let lab = Lab::build(&cfg)?;
        let sol = solve_nonlinear(&lab.system()?, &lab.gamma()?, &lab.family().boundary([0.0, 0.0]), lab.picard(), None)?;
        let wg = sol.g.rows().map(|r| weighted_sup(&lab.op, r, cfg.theta)).fold(0.0f64, f64::max);
        let h = sol.h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        consts.push((wg + h) / eps);
        iterations.push(sol.iterations);
    }
    let lab = Lab::build(&base)?;
    let gam = lab.gamma()?;
    let fb = lab.family().boundary([0.0, 0.0]);
    let mut residuals = Vec::new();
    for step in [4usize, 2, 1] {
        let mut x: Vec<f64> = lab.space.nodes.iter().step_by(step).copied().collect();
        if x.last() != lab.space.nodes.last() {
            x.push(*lab.space.nodes.last().expect("nonempty grid"));
        }
        let sys = lab.system_on(x)?;
        let sol = solve_nonlinear(&sys, &gam, &fb, lab.picard(), None)?;
        residuals.push(residual_check(&sys, &lab.op, &gam, &sol.g, &sol.h)?.max_penalized);
    }
    let decreasing = residuals.windows(2).all(|w| w[1] < w[0]);
    Ok((
        drift(consts[0], consts[1]) <= 0.2 && decreasing,
        format!(
            "Picard iterations {iterations:?}, (‖wg‖+‖h‖)/ε = {:.4} vs {:.4}, residual under space refinement {}",
            consts[0],
            consts[1],
            sci(&residuals)
        ),
    ))
}

fn tuning(r: &NormReport) -> Outcome {
    let s = r.solution.as_ref().ok_or_else(|| LabError::Diagnostic("no tuned solution".into()))?;
    let adm = s.tuning_history.last().copied().unwrap_or(f64::NAN);
    let tol = LabConfig::default().tol_lin;
    let worst = s.penalty_moments.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok((
        adm < 1e-8 && worst < 10.0 * tol,
        format!("admissibility residual {adm:.2e}, penalty moments at 0, L/2, L {}", sci(&s.penalty_moments)),
    ))
}

fn decay(r: &NormReport, gamma0: f64) -> Outcome {
    let fit = r.decay_f.as_ref().ok_or_else(|| LabError::Diagnostic("no decay fit".into()))?;
    Ok((
        fit.slope <= -gamma0,
        format!("slope {:.4} over [{}, {}] on {} points (bound -{gamma0})", fit.slope, fit.lo, fit.hi, fit.points),
    ))
}

fn regularity(r10: &NormReport, r12: &NormReport, coarse: &NormReport) -> Outcome {
    let missing = || LabError::Diagnostic("probe diagnostics missing".into());
    let (a, b, c) = (
        r10.regularity.as_ref().ok_or_else(missing)?,
        r12.regularity.as_ref().ok_or_else(missing)?,
        coarse.regularity.as_ref().ok_or_else(missing)?,
    );
    let c1_drift = drift(a.c1_probe_sup, b.c1_probe_sup);
    let c1_ok = a.c1_probe_sup.is_finite() && c1_drift <= 0.2;
    let exps = [a.grazing.boundary_fit.exponent, b.grazing.boundary_fit.exponent];
    let graze_ok = exps.iter().all(|e| (e + 1.0).abs() <= 0.2);
    let worst = |other: &kinlayer::suite::RegularitySummary| {
        a.w1p.iter().zip(&other.w1p).map(|(p, q)| drift(p.value, q.value)).fold(0.0f64, f64::max)
    };
    let (space_drift, velocity_drift) = (worst(c), worst(b));
    let w_ok = space_drift <= 0.15 && velocity_drift <= 0.3;
    let h_ok = a.h1_growth_mismatch < 0.1 && b.h1_growth_mismatch < 0.1;
    let unweighted = [
        r10.derivative.as_ref().map_or(f64::NAN, |d| d.near_grazing_sup),
        r12.derivative.as_ref().map_or(f64::NAN, |d| d.near_grazing_sup),
    ];
    Ok((
        c1_ok && graze_ok && w_ok && h_ok && unweighted[1] > unweighted[0],
        format!(
            "weighted-C¹ sup {:.3e} -> {:.3e} ({:.1}%), grazing exponent {exps:.3?}, W^(1,p) worst drift {:.1}% (space) / {:.1}% (velocity), \
             H¹_loc growth mismatch {:.1}% / {:.1}%, unweighted near-grazing sup {}",
            a.c1_probe_sup,
            b.c1_probe_sup,
            100.0 * c1_drift,
            100.0 * space_drift,
            100.0 * velocity_drift,
            100.0 * a.h1_growth_mismatch,
            100.0 * b.h1_growth_mismatch,
            sci(&unweighted)
        ),
    ))
}

fn integrability() -> Outcome {
    let v = alpha_integrability(1.0, 0.0, 1e-12)?;
    let exact = 2.0 * (1.0 + 2f64.sqrt()).ln();
    Ok(((v - exact).abs() < 1e-4, format!("{v:.12} vs 2ln(1+√2) = {exact:.12}")))
}

fn report(name: &str, t: Instant, out: Outcome, failures: &mut usize) {
    let (ok, detail) = match out {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    if !ok {
        *failures += 1;
    }
    println!(
        "{} {name}: {detail} [{:.1}s]",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
}

fn main() {
    let mut failures = 0;
    let t = Instant::now();
    report("1 hydrodynamic basis", t, hydrodynamic_basis(), &mut failures);
    let t = Instant::now();
    report("2 collision kernel", t, collision_kernel(), &mut failures);
    let t = Instant::now();
    report("3 velocity lemma", t, velocity_lemma(), &mut failures);
    let t = Instant::now();
    report("4 cut-off", t, cut_off(), &mut failures);
    let t = Instant::now();
    report("5 singular-integral constants", t, nln_constants(), &mut failures);
    let t = Instant::now();
    report("6 slow eigenpair", t, eigenpair(), &mut failures);
    let t = Instant::now();
    report("7 small-amplitude solve", t, small_amplitude(), &mut failures);

    let t = Instant::now();
    let opts = SuiteOptions::default();
    let suite = |n: usize, space: Option<(usize, f64, f64)>| {
        let mut cfg = LabConfig {
            vel_n: n,
            ..LabConfig::default()
        };
        if let Some((cells, min_cell, grade)) = space {
            cfg.space_n = cells;
            cfg.space_min_cell = min_cell;
            cfg.space_grade = grade;
        }
        run_verification_suite(&cfg, &opts).map(|r| r.report)
    };
    let r10 = suite(10, None);
    let gamma0 = LabConfig::default().gamma0();
    match &r10 {
        Ok(r) => {
            report("8 boundary tuning", t, tuning(r), &mut failures);
            let t = Instant::now();
            report("9 decay", t, decay(r, gamma0), &mut failures);
        }
        Err(e) => {
            for name in ["8 boundary tuning", "9 decay"] {
                report(name, t, Err(LabError::Diagnostic(e.to_string())), &mut failures);
            }
        }
    }
    let t = Instant::now();
    let r12 = suite(12, None);
    let coarse = suite(10, Some((200, 2e-4, 1.15 * 1.15)));
    let reg = match (&r10, &r12, &coarse) {
        (Ok(a), Ok(b), Ok(c)) => regularity(a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => Err(LabError::Diagnostic(e.to_string())),
    };
    report("10 regularity", t, reg, &mut failures);
    let t = Instant::now();
    report("11 integrability", t, integrability(), &mut failures);

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
