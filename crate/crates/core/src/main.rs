//! Experiment orchestrator: builds grids, systems, operators, and coronas
//! from a flat config file and runs the measurement harnesses, writing
//! deterministic JSON reports plus CSV tables per subcommand.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};

use czkit::accretive::{self, AccretiveSystem};
use czkit::bilinear;
use czkit::config::ExperimentConfig;
use czkit::corona::{self, CoronaData};
use czkit::czop::{self, DiscretizedOperator, Kernel};
use czkit::dyfun;
use czkit::grid::{estimate_pi_bad, DyadicGrid, GridParams};
use czkit::report::{write_timing, ExperimentReport};
use czkit::stats;
use czkit::twisted::{self, SignPattern};
use czkit::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "czkit", about = "Dyadic harmonic-analysis experiment toolkit")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides env SEED and the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trial-count override.
    #[arg(long)]
    trials: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Badness-probability sweep over the separation parameter.
    PiBad,
    /// Bad-projection energy harness against the badness estimator.
    Projection,
    /// Corona construction with all structural checks.
    Corona,
    /// Transform and perturbation harnesses.
    Transforms,
    /// Kernel validation and operator constants.
    Operator,
    /// Full bilinear-form decomposition.
    Decompose,
    /// Everything above, merged into one report.
    All,
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            if !report.ok() {
                eprintln!("invariant failures:");
                for f in &report.invariant_failures {
                    eprintln!("  - {f}");
                }
                std::process::exit(1);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn run(cli: &Cli) -> Result<ExperimentReport> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    // Seed precedence: flag > env SEED > config > default.
    let seed_val = cli
        .seed
        .or_else(|| std::env::var("SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(cfg.seed);
    cfg.seed = seed_val;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let say = |msg: &str| {
        if !cli.quiet {
            println!("{msg}");
        }
    };

    let mut timings: Vec<(String, f64)> = Vec::new();
    let timed = |name: &str,
                     timings: &mut Vec<(String, f64)>,
                     f: &mut dyn FnMut() -> Result<ExperimentReport>|
     -> Result<ExperimentReport> {
        let t0 = Instant::now();
        let rep = f()?;
        timings.push((name.to_string(), t0.elapsed().as_secs_f64()));
        rep.save_json(&cfg.out_dir.join(format!("{name}.json")))?;
        Ok(rep)
    };

    let report = match cli.command {
        Command::PiBad => {
            say("running badness-probability sweep");
            timed("pi_bad", &mut timings, &mut || cmd_pi_bad(&cfg))?
        }
        Command::Projection => {
            say("running bad-projection harness");
            timed("projection", &mut timings, &mut || cmd_projection(&cfg))?
        }
        Command::Corona => {
            say("building coronas with structural checks");
            timed("corona", &mut timings, &mut || cmd_corona(&cfg))?
        }
        Command::Transforms => {
            say("running transform and perturbation harnesses");
            timed("transforms", &mut timings, &mut || cmd_transforms(&cfg))?
        }
        Command::Operator => {
            say("validating kernel and operator constants");
            timed("operator", &mut timings, &mut || cmd_operator(&cfg))?
        }
        Command::Decompose => {
            say("running full bilinear decomposition");
            timed("decompose", &mut timings, &mut || cmd_decompose(&cfg))?
        }
        Command::All => {
            let mut total =
                ExperimentReport::new(serde_json::to_value(&cfg)?, cfg.seed);
            say("running badness-probability sweep");
            total.absorb("pi_bad", timed("pi_bad", &mut timings, &mut || cmd_pi_bad(&cfg))?);
            say("running bad-projection harness");
            total.absorb(
                "projection",
                timed("projection", &mut timings, &mut || cmd_projection(&cfg))?,
            );
            say("validating kernel and operator constants");
            total.absorb(
                "operator",
                timed("operator", &mut timings, &mut || cmd_operator(&cfg))?,
            );
            say("building coronas with structural checks");
            total.absorb("corona", timed("corona", &mut timings, &mut || cmd_corona(&cfg))?);
            say("running transform and perturbation harnesses");
            total.absorb(
                "transforms",
                timed("transforms", &mut timings, &mut || cmd_transforms(&cfg))?,
            );
            say("running full bilinear decomposition");
            total.absorb(
                "decompose",
                timed("decompose", &mut timings, &mut || cmd_decompose(&cfg))?,
            );
            total.save_json(&cfg.out_dir.join("report.json"))?;
            total
        }
    };
    write_timing(&cfg.out_dir.join("timing.json"), &timings)?;
    say(&format!(
        "done: {} scalars, {} invariant failures",
        report.scalars.len(),
        report.invariant_failures.len()
    ));
    Ok(report)
}

fn kernel_for(cfg: &ExperimentConfig) -> Kernel {
    match cfg.kernel.as_str() {
        "zero" => czop::zero_kernel(cfg.n),
        "bump" => czop::bump_kernel(cfg.n),
        _ => czop::hilbert_kernel(1.0),
    }
}

fn system_for(
    cfg: &ExperimentConfig,
    grid: &DyadicGrid,
    p: f64,
    side: u64,
) -> Result<AccretiveSystem> {
    match cfg.system.as_str() {
        "trivial" => AccretiveSystem::trivial(grid, p),
        _ => AccretiveSystem::oscillatory(
            grid,
            p,
            cfg.system_a,
            cfg.system_amplitude,
            None,
            seed::derive(cfg.seed, &[seed::tag::SYSTEM_CUBE, side]),
        ),
    }
}

struct Setup {
    op: DiscretizedOperator,
    cor1: CoronaData,
    cor2: CoronaData,
}

fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let gp = cfg.grid_params()?;
    let g1 = DyadicGrid::new_random(gp, 1, seed::derive(cfg.seed, &[seed::tag::GRID, 1]));
    let g2 = DyadicGrid::new_random(gp, 2, seed::derive(cfg.seed, &[seed::tag::GRID, 2]));
    let op = DiscretizedOperator::from_kernel(&kernel_for(cfg), cfg.l)?;
    let tb = if cfg.tb_proxy > 0.0 {
        cfg.tb_proxy
    } else {
        czop::estimate_opnorm(&op, cfg.seed).max(1e-12)
    };
    let params = cfg.corona_params(tb)?;
    let sys1 = Arc::new(system_for(cfg, &g1, cfg.p1, 1)?);
    let sys2 = Arc::new(system_for(cfg, &g2, cfg.p2, 2)?);
    let domain = czkit::grid::TickBox {
        lo: vec![0; cfg.n as usize],
        hi: vec![gp.domain_ticks(); cfg.n as usize],
    };
    let (f1_tilde, f2_tilde) = czop::witness_pair(&op, &domain)?;
    let cor1 = corona::build_corona(sys1, &g2, &op, &f1_tilde, &params, 1)?;
    let cor2 = corona::build_corona(sys2, &g1, &op.transpose(), &f2_tilde, &params, 2)?;
    Ok(Setup { op, cor1, cor2 })
}

fn cmd_pi_bad(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(serde_json::to_value(cfg)?, cfg.seed);
    let trials = cfg.trials.max(100);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = vec!["r,level,estimate,ci95".to_string()];
    for r in 3..=8u32 {
        let params =
            GridParams::new(cfg.n, cfg.l.max(cfg.top_level + r + 1), cfg.top_level, cfg.eta, r)?;
        let level = cfg.top_level + r;
        let est = estimate_pi_bad(
            level,
            &params,
            trials,
            seed::derive(cfg.seed, &[seed::tag::PI_BAD_TRIAL, r as u64]),
        )?;
        rows.push(format!("{r},{level},{:.6e},{:.6e}", est.estimate, est.ci95));
        rep.put(&format!("pi_bad_r{r}"), est.estimate, "estimate_pi_bad");
        if est.estimate > 0.0 {
            xs.push(r as f64);
            ys.push(est.estimate.log2());
        }
    }
    std::fs::write(cfg.out_dir.join("pi_bad.csv"), rows.join("\n") + "\n")?;
    rep.check("pi-bad sweep has enough nonzero points to fit", xs.len() >= 3);
    if xs.len() >= 3 {
        let fit = stats::ols_fit(&xs, &ys)?;
        rep.put("pi_bad_log2_slope", fit.slope, "ols_fit");
        rep.put("pi_bad_slope_ci_hi", fit.slope_ci95.1, "ols_fit");
        rep.check("badness probability decreases with separation", fit.slope < 0.0);
    }
    Ok(rep)
}

fn cmd_projection(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(serde_json::to_value(cfg)?, cfg.seed);
    let params = cfg.grid_params()?;
    let level = (cfg.top_level + cfg.r).min(cfg.l - 1);
    let trials = cfg.trials.max(100);
    let proj = dyfun::test_bad_projection_decay(2.0, level, &params, trials, cfg.seed)?;
    let pb = estimate_pi_bad(
        level,
        &params,
        (trials * 10).max(1000),
        seed::derive(cfg.seed, &[seed::tag::PI_BAD_TRIAL, 99]),
    )?;
    rep.put("projection_mean_ratio", proj.mean_ratio, "test_bad_projection_decay");
    rep.put("projection_ci95", proj.ci95, "test_bad_projection_decay");
    rep.put("pi_bad_estimate", pb.estimate, "estimate_pi_bad");
    rep.put("pi_bad_ci95", pb.ci95, "estimate_pi_bad");
    rep.check(
        "bad-projection energy ratio matches the badness estimator (95% CIs overlap)",
        stats::ci_overlap((proj.mean_ratio, proj.ci95), (pb.estimate, pb.ci95)),
    );
    Ok(rep)
}

fn cmd_operator(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(serde_json::to_value(cfg)?, cfg.seed);
    let k = kernel_for(cfg);
    let consts = czop::validate_kernel(&k, cfg.trials.max(500), cfg.seed);
    rep.put("kernel_c_size", consts.c_size, "validate_kernel");
    rep.put("kernel_c_smooth", consts.c_smooth, "validate_kernel");
    let op = DiscretizedOperator::from_kernel(&k, cfg.l)?;
    let tb = czop::estimate_opnorm(&op, cfg.seed);
    rep.put("tb_proxy_estimate", tb, "estimate_opnorm");
    let gp = cfg.grid_params()?;
    let g1 = DyadicGrid::new_random(gp, 1, seed::derive(cfg.seed, &[seed::tag::GRID, 1]));
    let sys1 = system_for(cfg, &g1, cfg.p1, 1)?;
    let t_loc = czop::testing_constant(&op, &sys1, cfg.p2 / (cfg.p2 - 1.0))?;
    rep.put("t_loc", t_loc, "testing_constant");
    rep.check(
        "operator constants are finite",
        consts.c_size.is_finite() && consts.c_smooth.is_finite() && tb.is_finite()
            && t_loc.is_finite(),
    );
    Ok(rep)
}

fn cmd_corona(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(serde_json::to_value(cfg)?, cfg.seed);
    let setup = build_setup(cfg)?;
    for (name, cor, op_j) in [
        ("side1", &setup.cor1, setup.op.clone()),
        ("side2", &setup.cor2, setup.op.transpose()),
    ] {
        let grid = cor.grid();
        let rr = corona::representation_check(cor)?;
        rep.put(&format!("{name}_representation_l2_rel"), rr.l2_rel_residual, "representation_check");
        rep.put(&format!("{name}_phi_norm_p"), rr.phi_norm_p, "representation_check");
        rep.put(&format!("{name}_phi_bound"), rr.phi_bound, "representation_check");
        rep.check(
            &format!("{name}: corona expansion reproduces the selected function"),
            rr.l2_rel_residual <= 1e-9,
        );
        let (zchecked, zworst) = corona::zero_difference_report(cor)?;
        rep.put(&format!("{name}_zero_diff_checked"), zchecked as f64, "zero_difference_report");
        rep.put(&format!("{name}_zero_diff_worst"), zworst, "zero_difference_report");
        rep.check(
            &format!("{name}: differences vanish on childless bad cubes"),
            zworst <= 1e-12,
        );
        let worst_sparse = corona::sparseness_ratios(&cor.tree, grid)
            .into_iter()
            .map(|(_, v)| v)
            .fold(0.0f64, f64::max);
        rep.put(&format!("{name}_sparseness_worst"), worst_sparse, "sparseness_ratios");
        rep.check(
            &format!("{name}: stopping children occupy at most tau of each block"),
            worst_sparse <= cor.params.tau + 1e-12,
        );
        let mut worst_resid = f64::INFINITY;
        for s in &cor.tree.cubes {
            let (meas, floor) = accretive::residual_lower_bound(&cor.sys, s)?;
            worst_resid = worst_resid.min(meas - floor);
        }
        rep.put(&format!("{name}_residual_margin"), worst_resid, "residual_lower_bound");
        rep.check(
            &format!("{name}: accretive residual sets keep their measure floor"),
            worst_resid >= -1e-12,
        );
        let pf = corona::perturbed_family_report(cor, &op_j)?;
        rep.put(&format!("{name}_beta_mean_error"), pf.worst_mean_error, "perturbed_family_report");
        rep.put(&format!("{name}_beta_min_average"), pf.min_average, "perturbed_family_report");
        rep.put(
            &format!("{name}_beta_maximal_energy_ratio"),
            pf.maximal_energy_ratio,
            "perturbed_family_report",
        );
        rep.put(
            &format!("{name}_beta_testing_energy_ratio"),
            pf.testing_energy_ratio,
            "perturbed_family_report",
        );
        rep.check(
            &format!("{name}: perturbed means stay at one on stopping cubes"),
            pf.worst_mean_error <= 1e-9,
        );
        rep.check(
            &format!("{name}: perturbed averages keep the quarter floor"),
            pf.min_average >= 0.25,
        );
        corona::save_corona(cor, &cfg.out_dir.join(format!("corona_{name}")))?;
    }
    Ok(rep)
}

fn cmd_transforms(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(serde_json::to_value(cfg)?, cfg.seed);
    let setup = build_setup(cfg)?;
    let cor = &setup.cor1;
    // Coarsest surviving stopping cube that is not swallowed by the excluded
    // union; contexts are anchored there.
    let grid1 = cor.grid();
    let mut candidates: Vec<_> = cor
        .tree
        .cubes
        .iter()
        .filter(|s| {
            cor.in_s(s) && !cor.types.b_union.iter().any(|r| grid1.contains_cube(r, s))
        })
        .cloned()
        .collect();
    candidates.sort_by_key(|c| c.level);
    let s0 = candidates
        .first()
        .cloned()
        .ok_or_else(|| Error::Precondition("no surviving stopping cube outside the excluded union".into()))?;
    let (ctx_b, ctx_beta) = twisted::context_from_corona(cor, &s0)?;
    let adm = ctx_b.check_admissible()?;
    rep.put("ctx_min_abs_average", adm.min_abs_average, "check_admissible");
    rep.put("ctx_max_energy_ratio", adm.max_energy_ratio, "check_admissible");
    rep.check("original family keeps the quarter average floor", adm.min_abs_average >= 0.25);
    let f = &cor.f;
    let patterns = cfg.trials.min(50).max(5) as usize;
    for q in [1.5, 2.0, 3.0] {
        let tr = twisted::universal_transform_test(&ctx_b, f, q, patterns, cfg.seed)?;
        rep.put(&format!("transform_half_ratio_q{q}"), tr.max_half_ratio, "universal_transform_test");
        rep.put(
            &format!("transform_increment_ratio_q{q}"),
            tr.max_increment_ratio,
            "universal_transform_test",
        );
        rep.put(
            &format!("transform_twisted_ratio_q{q}"),
            tr.max_twisted_ratio,
            "universal_transform_test",
        );
        rep.check(
            &format!("transform ratios finite at q={q}"),
            tr.max_half_ratio.is_finite() && tr.max_twisted_ratio.is_finite(),
        );
    }
    // Corona-level twisted transform on a Rademacher pattern.
    let interior: Vec<_> = cor.g_cubes.iter().filter(|c| c.level < cfg.l).cloned().collect();
    let mut rng = seed::stream(cfg.seed, &[seed::tag::SIGN_PATTERN, 7]);
    let pat = SignPattern::rademacher(&interior, &mut rng);
    let q0 = cor.grid().cubes_at_level(cfg.top_level)[0].clone();
    let tt = twisted::twisted_transform_test(cor, &q0, &pat, cfg.p1, true)?;
    let tt_b = twisted::twisted_transform_test(cor, &q0, &pat, cfg.p1, false)?;
    rep.put("twisted_transform_ratio", tt, "twisted_transform_test");
    rep.put("twisted_transform_ratio_original", tt_b, "twisted_transform_test");
    // Perturbation harness with the measured closeness.
    let p = ctx_b.p;
    let diff_p = ctx_b.b.sub(&ctx_beta.b)?.map(|v| v.abs().powf(p));
    let mut closeness = 0.0f64;
    let mut lam = 0.0f64;
    for qc in ctx_b.admissible_cubes() {
        closeness = closeness.max(diff_p.avg(cor.grid(), &qc)?.powf(1.0 / p));
        lam = lam.max(f.avg(cor.grid(), &qc)?.abs());
    }
    let upsilon = (closeness * 1.0001).max(1e-6);
    rep.put("measured_closeness", closeness, "perturbation_test");
    rep.check("perturbed family is closer than one eighth", upsilon < 0.125);
    if upsilon < 0.125 {
        let pr = twisted::perturbation_test(&ctx_b, &ctx_beta, f, upsilon, lam.max(1.0) * 1.0001)?;
        rep.put("perturbation_ratio_twisted", pr.ratio_twisted, "perturbation_test");
        rep.put("perturbation_ratio_half", pr.ratio_half, "perturbation_test");
        let (ctrl_checked, ctrl_margin) = twisted::control_report(&ctx_b, &ctx_beta, upsilon)?;
        rep.put("control_checks", ctrl_checked as f64, "control_report");
        rep.put("control_worst_margin", ctrl_margin, "control_report");
        rep.check("geometric ratio control holds", ctrl_margin <= 0.0);
    }
    // Stopping-generation mass decay.
    let gens = twisted::stopping_generation_measures(cor);
    for (k, m) in gens.iter().enumerate() {
        rep.put(&format!("generation_mass_{k}"), *m, "stopping_generation_measures");
    }
    Ok(rep)
}

fn cmd_decompose(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut rep = ExperimentReport::new(serde_json::to_value(cfg)?, cfg.seed);
    let setup = build_setup(cfg)?;
    let dec = bilinear::full_decomposition(&setup.cor1, &setup.cor2, &setup.op, cfg.seed)?;
    bilinear::write_csv(&dec, &cfg.out_dir.join("terms.csv"))?;
    rep.put("double_good_sum", dec.double_good_sum, "full_decomposition");
    rep.put("classified_total", dec.classified_total, "full_decomposition");
    rep.put("bookkeeping_residual", dec.bookkeeping_residual, "full_decomposition");
    rep.put("full_pairing", dec.full_pairing, "full_decomposition");
    rep.put("good_sum_error", dec.good_sum_error, "full_decomposition");
    rep.put("inside_total", dec.forward.inside.total, "inside_term");
    rep.put("inside_split_residual", dec.forward.inside.split_residual, "inside_term");
    rep.put("inside_max_eps_over_cap", dec.forward.inside.max_eps_over_cap, "inside_term");
    rep.put("nearby_total", dec.forward.nearby.total, "nearby_term");
    rep.put("nearby_max_ratio", dec.forward.nearby.max_ratio, "nearby_term");
    rep.put("far_total", dec.forward.far.total, "far_term");
    rep.put("far_max_pair_ratio", dec.forward.far.max_pair_ratio, "far_term");
    rep.put("diagonal_total", dec.forward.diagonal.total, "diagonal_term");
    rep.put(
        "diagonal_replacement_part",
        dec.forward.diagonal.replacement_part,
        "diagonal_term",
    );
    rep.check(
        "classified terms reproduce the double good-cube sum",
        dec.bookkeeping_residual <= 1e-9 * dec.double_good_sum.abs().max(1.0),
    );
    rep.check(
        "inside split is exact",
        dec.forward.inside.split_residual <= 1e-9 && dec.transposed.inside.split_residual <= 1e-9,
    );
    rep.check(
        "per-pair instruments stayed finite",
        dec.forward.nearby.max_ratio.is_finite() && dec.forward.far.max_pair_ratio.is_finite(),
    );
    let json = serde_json::to_string_pretty(&dec)?;
    std::fs::write(cfg.out_dir.join("decomposition.json"), json + "\n")?;
    Ok(rep)
}
