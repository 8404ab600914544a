//! Acceptance suite: thirteen pinned-tolerance checks covering the whole
//! pipeline, one pass/fail line each (visible with `--nocapture`; failures
//! always print). Tolerances are fixed here and are not tuned at runtime.

use std::collections::HashMap;
use std::sync::Arc;

use czkit::accretive::{self, AccretiveSystem};
use czkit::bilinear;
use czkit::corona::{self, CoronaData, CoronaParams};
use czkit::czop::{self, hilbert_kernel, DiscretizedOperator};
use czkit::dyfun::{self, DyadicFunction};
use czkit::grid::{self, Cube, DyadicGrid, GridParams, TickBox};
use czkit::twisted::{self, TwistedContext};
use czkit::{seed, stats};

const AMPLITUDE: f64 = 0.05;
const A_CONST: f64 = 2.0;

fn verdict(pass: bool, line: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {line}");
    assert!(pass, "{line}");
}

fn corona_params(n: u32, tb: f64) -> CoronaParams {
    CoronaParams::new(n, 2.0, 2.0, 0.25, 0.95, 1.5, 0.05, tb).unwrap()
}

struct Setup {
    op: DiscretizedOperator,
    cor1: CoronaData,
    cor2: CoronaData,
}

fn build_setup(l: u32, r: u32, master_seed: u64, trivial: bool) -> Setup {
    let gp = GridParams::new(1, l, 0, 1.0, r).unwrap();
    let g1 = DyadicGrid::new_random(gp, 1, seed::derive(master_seed, &[seed::tag::GRID, 1]));
    let g2 = DyadicGrid::new_random(gp, 2, seed::derive(master_seed, &[seed::tag::GRID, 2]));
    let op = DiscretizedOperator::from_kernel(&hilbert_kernel(1.0), l).unwrap();
    let tb = czop::estimate_opnorm(&op, master_seed).max(1e-12);
    let params = corona_params(1, tb);
    let mk = |grid: &DyadicGrid, side: u64| -> Arc<AccretiveSystem> {
        Arc::new(if trivial {
            AccretiveSystem::trivial(grid, 2.0).unwrap()
        } else {
            AccretiveSystem::oscillatory(
                grid,
                2.0,
                A_CONST,
                AMPLITUDE,
                None,
                seed::derive(master_seed, &[seed::tag::SYSTEM_CUBE, side]),
            )
            .unwrap()
        })
    };
    let domain = TickBox { lo: vec![0], hi: vec![gp.domain_ticks()] };
    let (f1, f2) = czop::witness_pair(&op, &domain).unwrap();
    let cor1 = corona::build_corona(mk(&g1, 1), &g2, &op, &f1, &params, 1).unwrap();
    let cor2 = corona::build_corona(mk(&g2, 2), &g1, &op.transpose(), &f2, &params, 2).unwrap();
    Setup { op, cor1, cor2 }
}

/// Coarsest stopping cube surviving truncation and outside the excluded
/// union; transform contexts are anchored there.
fn anchor_cube(cor: &CoronaData) -> Cube {
    let grid = cor.grid();
    let mut cands: Vec<Cube> = cor
        .tree
        .cubes
        .iter()
        .filter(|s| cor.in_s(s) && !cor.types.b_union.iter().any(|r| grid.contains_cube(r, s)))
        .cloned()
        .collect();
    cands.sort_by_key(|c| c.level);
    cands.into_iter().next().expect("surviving stopping cube")
}

// ---------------------------------------------------------------------------
// 1. Reconstruction identities.

#[test]
fn a01_reconstruction_identities() {
    let mut worst_classical = 0.0f64;
    let mut worst_corona = 0.0f64;
    for master_seed in 0..10u64 {
        let gp = GridParams::new(1, 8, 0, 1.0, 6).unwrap();
        let g1 = DyadicGrid::new_random(gp, 1, seed::derive(master_seed, &[seed::tag::GRID, 1]));
        let g2 = DyadicGrid::new_random(gp, 2, seed::derive(master_seed, &[seed::tag::GRID, 2]));
        // (a) classical reconstruction: top part + good and bad projections.
        let f = DyadicFunction::random_uniform(1, 8, master_seed, 77);
        let recon = dyfun::top_part(&f, &g1)
            .add(&dyfun::project_good(&f, &g1, &g2).unwrap())
            .unwrap()
            .add(&dyfun::project_bad(&f, &g1, &g2).unwrap())
            .unwrap();
        let rel = recon.sub(&f).unwrap().l2_norm_sq().sqrt() / f.l2_norm_sq().sqrt();
        worst_classical = worst_classical.max(rel);
        // (b) corona representation of the selected function, both systems.
        for trivial in [true, false] {
            let setup = build_setup(8, 6, master_seed, trivial);
            for cor in [&setup.cor1, &setup.cor2] {
                let rep = corona::representation_check(cor).unwrap();
                worst_corona = worst_corona.max(rep.l2_rel_residual);
            }
        }
    }
    verdict(
        worst_classical <= 1e-9 && worst_corona <= 1e-9,
        &format!(
            "01 reconstruction identities: classical rel-L2 {worst_classical:.2e}, \
             corona rel-L2 {worst_corona:.2e} (tol 1e-9, 10 seeds, both systems)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Goodness classification against an independent brute-force oracle.

/// Sup-norm distance from box Q to the boundary of box P, in half-ticks,
/// computed face by face (independent of the library's closed form).
fn oracle_dist_half_ticks(qb: &TickBox, pb: &TickBox) -> i64 {
    let n = qb.lo.len();
    let seg = |alo: i64, ahi: i64, blo: i64, bhi: i64| -> i64 {
        0.max(2 * (blo - ahi)).max(2 * (alo - bhi))
    };
    let mut best = i64::MAX;
    for axis in 0..n {
        for &face in &[pb.lo[axis], pb.hi[axis]] {
            // Distance to the face {y_axis = face, pb.lo <= y <= pb.hi}.
            let mut d = 0i64;
            for a in 0..n {
                let da = if a == axis {
                    0.max(2 * (face - qb.hi[a])).max(2 * (qb.lo[a] - face))
                } else {
                    seg(qb.lo[a], qb.hi[a], pb.lo[a], pb.hi[a])
                };
                d = d.max(da);
            }
            best = best.min(d);
        }
    }
    best
}

fn oracle_is_good(gq: &DyadicGrid, q: &Cube, other: &DyadicGrid) -> bool {
    let params = &gq.params;
    if q.level < params.top_level + params.r {
        return true;
    }
    let qb = gq.cube_box(q);
    for lp in params.top_level..=(q.level - params.r) {
        let thr = grid::badness_threshold_half_ticks(params, q.level, lp);
        let side = params.side_ticks(lp);
        let sh = other.shift_ticks(lp);
        // Generously over-enumerate lattice indices around the query cube.
        let pad = thr.ceil() as i64 + 4 * side;
        let lo: Vec<i64> =
            (0..params.n as usize).map(|a| (qb.lo[a] - pad - sh[a]).div_euclid(side) - 2).collect();
        let hi: Vec<i64> =
            (0..params.n as usize).map(|a| (qb.hi[a] + pad - sh[a]).div_euclid(side) + 2).collect();
        let mut idx = lo.clone();
        'level: loop {
            let p = Cube { grid_id: other.id, level: lp, idx: idx.clone() };
            let d = oracle_dist_half_ticks(&qb, &other.cube_box(&p));
            if (d as f64) <= thr {
                return false;
            }
            let mut a = 0;
            loop {
                idx[a] += 1;
                if idx[a] <= hi[a] {
                    break;
                }
                idx[a] = lo[a];
                a += 1;
                if a == params.n as usize {
                    break 'level;
                }
            }
        }
    }
    true
}

#[test]
fn a02_goodness_matches_brute_force() {
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for (n, l) in [(1u32, 12u32), (2, 6)] {
        for pair_seed in 0..5u64 {
            let params = GridParams::new(n, l, 0, 1.0, 3).unwrap();
            let g1 = DyadicGrid::new_random(params, 1, seed::derive(pair_seed, &[1]));
            let g2 = DyadicGrid::new_random(params, 2, seed::derive(pair_seed, &[2]));
            for q in g1.all_cubes() {
                let fast = grid::classify_goodness(&g1, &q, &g2).good;
                let slow = oracle_is_good(&g1, &q, &g2);
                checked += 1;
                if fast != slow {
                    mismatches += 1;
                }
            }
        }
    }
    verdict(
        mismatches == 0,
        &format!(
            "02 goodness vs brute-force oracle: {mismatches} mismatches over {checked} cubes \
             (n=1 L=12, n=2 L=6, 5 seed pairs)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Badness probability decay in the separation parameter.

#[test]
fn a03_badness_probability_decay() {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in 3..=8u32 {
        let params = GridParams::new(1, r + 2, 0, 1.0, r).unwrap();
        let est =
            grid::estimate_pi_bad(r, &params, 10_000, seed::derive(3, &[seed::tag::PI_BAD_TRIAL, r as u64]))
                .unwrap();
        if est.estimate > 0.0 {
            xs.push(r as f64);
            ys.push(est.estimate.log2());
        }
    }
    let fit = stats::ols_fit(&xs, &ys).unwrap();
    verdict(
        fit.slope_ci95.1 <= -0.125,
        &format!(
            "03 badness decay: slope {:.3}, 95% CI upper {:.3} (needs <= -0.125 = -eps/2, \
             r in 3..8, 1e4 trials)",
            fit.slope, fit.slope_ci95.1
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Bad-projection energy at q=2 equals the badness probability.

#[test]
fn a04_bad_projection_matches_pi_bad() {
    let params = GridParams::new(1, 8, 0, 1.0, 6).unwrap();
    let level = 6;
    let proj = dyfun::test_bad_projection_decay(2.0, level, &params, 2_000, 11).unwrap();
    let pb = grid::estimate_pi_bad(level, &params, 10_000, seed::derive(11, &[seed::tag::PI_BAD_TRIAL, 0]))
        .unwrap();
    let overlap = stats::ci_overlap((proj.mean_ratio, proj.ci95), (pb.estimate, pb.ci95));
    verdict(
        overlap,
        &format!(
            "04 bad-projection energy at q=2: ratio {:.4}+-{:.4} vs probability {:.4}+-{:.4} \
             (95% CIs must overlap)",
            proj.mean_ratio, proj.ci95, pb.estimate, pb.ci95
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Zero-difference property on childless bad cubes.

#[test]
fn a05_zero_difference_exhaustive() {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for master_seed in 0..10u64 {
        let setup = build_setup(8, 6, master_seed, false);
        for cor in [&setup.cor1, &setup.cor2] {
            let (c, w) = corona::zero_difference_report(cor).unwrap();
            checked += c;
            worst = worst.max(w);
        }
    }
    verdict(
        worst <= 1e-12,
        &format!(
            "05 zero differences on childless bad cubes: worst sup-norm {worst:.2e} over \
             {checked} cubes (tol 1e-12, 10 seeds, L=8)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Sparseness of stopping children and residual-set measure floor.

#[test]
fn a06_sparseness_and_residual_floor() {
    let mut worst_sparse = 0.0f64;
    let mut worst_margin = f64::INFINITY;
    let mut trees = 0usize;
    for l in [8u32, 10] {
        for master_seed in 0..3u64 {
            for trivial in [true, false] {
                let setup = build_setup(l, 6, master_seed, trivial);
                for cor in [&setup.cor1, &setup.cor2] {
                    trees += 1;
                    for (_, ratio) in corona::sparseness_ratios(&cor.tree, cor.grid()) {
                        worst_sparse = worst_sparse.max(ratio);
                    }
                    for s in &cor.tree.cubes {
                        let (meas, floor) = accretive::residual_lower_bound(&cor.sys, s).unwrap();
                        worst_margin = worst_margin.min(meas - floor);
                    }
                }
            }
        }
    }
    verdict(
        worst_sparse <= 0.95 + 1e-12 && worst_margin >= -1e-12,
        &format!(
            "06 sparseness/residual floor: worst child-mass ratio {worst_sparse:.4} \
             (cap 0.95), worst residual margin {worst_margin:.3e} (needs >= 0) over {trees} trees"
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Perturbed stopping data: exact floors plus stable measured constants.

#[test]
fn a07_perturbed_stopping_data() {
    let mut mean_err = 0.0f64;
    let mut min_avg = f64::INFINITY;
    let mut c3b = Vec::new();
    let mut c3c = Vec::new();
    for l in [7u32, 8, 9] {
        let setup = build_setup(l, 6, 5, false);
        for (cor, op_side) in [(&setup.cor1, setup.op.clone()), (&setup.cor2, setup.op.transpose())]
        {
            let rep = corona::perturbed_family_report(cor, &op_side).unwrap();
            mean_err = mean_err.max(rep.worst_mean_error);
            min_avg = min_avg.min(rep.min_average);
            c3b.push(rep.maximal_energy_ratio);
            c3c.push(rep.testing_energy_ratio);
        }
    }
    let stable = |v: &[f64]| -> (bool, f64) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let dev = v.iter().map(|c| (c / mean - 1.0).abs()).fold(0.0, f64::max);
        (v.iter().all(|c| c.is_finite()) && dev <= 0.30, dev)
    };
    let (ok_b, dev_b) = stable(&c3b);
    let (ok_c, dev_c) = stable(&c3c);
    verdict(
        mean_err <= 1e-12 && min_avg >= 0.25 && ok_b && ok_c,
        &format!(
            "07 perturbed stopping data: mean error {mean_err:.2e} (tol 1e-12), min average \
             {min_avg:.4} (floor 0.25), constant spreads {:.1}%/{:.1}% (cap 30%, L in 7..9)",
            dev_b * 100.0,
            dev_c * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Average smallness of the bad perturbation part decays in r.

#[test]
fn a08_perturbation_part_decay() {
    let l = 9u32;
    let op = DiscretizedOperator::from_kernel(&hilbert_kernel(1.0), l).unwrap();
    let tb = czop::estimate_opnorm(&op, 5).max(1e-12);
    let params = corona_params(1, tb);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in 3..=7u32 {
        let gp = GridParams::new(1, l, 0, 1.0, r).unwrap();
        let g1 = DyadicGrid::new_random(gp, 1, seed::derive(5, &[seed::tag::GRID, 1]));
        let sys =
            AccretiveSystem::oscillatory(&g1, 2.0, A_CONST, AMPLITUDE, None, 13).unwrap();
        let tree = corona::build_auxiliary_tree(&sys, &op, &params, 1).unwrap();
        for trial in 0..20u64 {
            let g2 = DyadicGrid::new_random(
                gp,
                2,
                seed::derive(5, &[seed::tag::GRID, 2, r as u64, trial]),
            );
            let goodness: HashMap<Cube, bool> = g1
                .all_cubes()
                .into_iter()
                .map(|q| {
                    let good = grid::classify_goodness(&g1, &q, &g2).good;
                    (q, good)
                })
                .collect();
            let mut acc = 0.0;
            let mut count = 0usize;
            for s in &tree.cubes {
                let (_, bt) = corona::perturb_b(&tree, &sys, &g2, s, Some(&goodness)).unwrap();
                acc += bt.l2_norm_sq() / corona::measure(&g1, s);
                count += 1;
            }
            xs.push(r as f64);
            ys.push((acc / count as f64).log2());
        }
    }
    // Fit over every grid resample; the per-sample scatter is the error
    // model for the slope confidence interval.
    let fit = stats::ols_fit(&xs, &ys).unwrap();
    verdict(
        fit.slope_ci95.1 < 0.0,
        &format!(
            "08 perturbation-part decay: normalized energy slope {:.3} in r, 95% CI upper \
             {:.3} (needs < 0, r in 3..7, 20 grid resamples per point)",
            fit.slope, fit.slope_ci95.1
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Transform-constant stability across resolutions.

#[test]
fn a09_transform_constant_stability() {
    // A fixed continuum profile discretized at each resolution: the test
    // ratios must converge rather than grow with the number of scales.
    let b_profile = |x: f64| 1.0 + 0.05 * if (8.0 * x).fract() < 0.5 { 1.0 } else { -1.0 };
    let f_profile = |x: f64| (std::f64::consts::TAU * x).sin()
        + 0.3 * if (16.0 * x).fract() < 0.5 { 1.0 } else { -1.0 };
    let mut worst_rel = 0.0f64;
    let mut ratios: HashMap<String, Vec<f64>> = HashMap::new();
    for l in [6u32, 8, 10] {
        let gp = GridParams::new(1, l, 0, 1.0, 5).unwrap();
        let g = DyadicGrid::zero_shift(gp, 1);
        let s0 = g.cubes_at_level(0)[0].clone();
        let h = 2f64.powi(-(l as i32));
        let b = Arc::new(DyadicFunction::from_fn(1, l, |c| b_profile((c[0] as f64 + 0.5) * h)));
        let f = DyadicFunction::from_fn(1, l, |c| f_profile((c[0] as f64 + 0.5) * h));
        let ctx = TwistedContext::new(
            g.clone(),
            s0,
            b,
            Vec::new(),
            HashMap::new(),
            2.0,
            0.25,
            A_CONST,
        )
        .unwrap();
        for q in [1.5f64, 2.0, 3.0] {
            let tr = twisted::universal_transform_test(&ctx, &f, q, 50, 5).unwrap();
            ratios.entry(format!("half q={q}")).or_default().push(tr.max_half_ratio);
            ratios.entry(format!("twisted q={q}")).or_default().push(tr.max_twisted_ratio);
        }
    }
    for v in ratios.values() {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(0.0f64, f64::max);
        worst_rel = worst_rel.max((hi - lo) / lo);
    }
    verdict(
        worst_rel <= 0.25,
        &format!(
            "09 transform-constant stability: worst spread {:.1}% across L in {{6,8,10}} \
             (cap 25%, q in {{1.5,2,3}}, 50 sign patterns)",
            worst_rel * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Perturbation response is linear in the closeness parameter.

#[test]
fn a10_perturbation_linearity() {
    let l = 8u32;
    let gp = GridParams::new(1, l, 0, 1.0, 4).unwrap();
    let g = DyadicGrid::zero_shift(gp, 1);
    let s0 = g.cubes_at_level(0)[0].clone();
    let b = Arc::new(DyadicFunction::constant(1, l, 1.0));
    // Fixed unit-amplitude direction of the perturbation.
    let dir = DyadicFunction::random_uniform(1, l, 99, 3).map(|v| if v >= 0.5 { 1.0 } else { -1.0 });
    let f = DyadicFunction::random_uniform(1, l, 99, 4);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &ups in &[0.005f64, 0.01, 0.02] {
        let beta = Arc::new(b.add(&dir.scale(ups)).unwrap());
        let ctx_b = TwistedContext::new(
            g.clone(),
            s0.clone(),
            b.clone(),
            Vec::new(),
            HashMap::new(),
            2.0,
            0.25,
            A_CONST,
        )
        .unwrap();
        let ctx_beta = TwistedContext::new(
            g.clone(),
            s0.clone(),
            beta,
            Vec::new(),
            HashMap::new(),
            2.0,
            0.25,
            A_CONST,
        )
        .unwrap();
        let rep = twisted::perturbation_test(&ctx_b, &ctx_beta, &f, ups * 1.0001, 1.0).unwrap();
        xs.push(ups.ln());
        ys.push(rep.lhs_twisted.ln());
    }
    let fit = stats::ols_fit(&xs, &ys).unwrap();
    verdict(
        (fit.slope - 1.0).abs() <= 0.2,
        &format!(
            "10 perturbation linearity: log-log slope {:.3} over a factor-4 closeness sweep \
             (needs 1.0 +- 0.2)",
            fit.slope
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Bookkeeping identity of the pair decomposition.

#[test]
fn a11_bookkeeping_identity() {
    let mut worst_rel = 0.0f64;
    let mut runs = 0usize;
    for master_seed in [1u64, 2, 3] {
        for trivial in [true, false] {
            let setup = build_setup(8, 6, master_seed, trivial);
            let dec =
                bilinear::full_decomposition(&setup.cor1, &setup.cor2, &setup.op, master_seed)
                    .unwrap();
            let denom = dec.double_good_sum.abs().max(f64::EPSILON);
            worst_rel = worst_rel.max(dec.bookkeeping_residual / denom);
            runs += 1;
        }
    }
    verdict(
        worst_rel <= 1e-9,
        &format!(
            "11 bookkeeping identity: worst relative residual {worst_rel:.2e} over {runs} runs \
             (tol 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 12. Geometric decay of the per-scale instruments.

#[test]
fn a12_geometric_decay_instruments() {
    // eta' = (1-eps)*eta = 0.75; factor-2 slack admits fitted rates down to
    // half of it.
    let needed = -0.75 / 2.0;
    let seeds: Vec<u64> = (0..8).collect();
    let mut nearby: HashMap<u32, f64> = HashMap::new();
    let mut inside_stop: HashMap<u32, f64> = HashMap::new();
    let mut inside_err: HashMap<u32, f64> = HashMap::new();
    let mut far: HashMap<u32, f64> = HashMap::new();
    for &l in &[8u32, 9] {
        for &master_seed in &seeds {
            let setup = build_setup(l, 6, master_seed, false);
            let dec =
                bilinear::full_decomposition(&setup.cor1, &setup.cor2, &setup.op, master_seed)
                    .unwrap();
            for half in [&dec.forward, &dec.transposed] {
                for (s, block, _para, stop, _inst) in &half.inside.per_s {
                    *inside_stop.entry(*s).or_default() += stop.abs();
                    *inside_err.entry(*s).or_default() += (block - stop).abs();
                }
                for (s, v, _run) in &half.nearby.per_s {
                    *nearby.entry(*s).or_default() += v;
                }
                for (s, _t, v, _b, _r) in &half.far.table {
                    *far.entry(*s).or_default() += v.abs();
                }
            }
        }
    }
    let fit_slope = |m: &HashMap<u32, f64>| -> Option<f64> {
        let mut pts: Vec<(f64, f64)> =
            m.iter().filter(|(_, v)| **v > 0.0).map(|(s, v)| (*s as f64, v.log2())).collect();
        if pts.len() < 2 {
            return None;
        }
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        Some(stats::ols_fit(&xs, &ys).unwrap().slope)
    };
    let sn = fit_slope(&nearby);
    let ss = fit_slope(&inside_stop);
    let se = fit_slope(&inside_err);
    let sf = fit_slope(&far);
    let ok = [sn, ss, se, sf].iter().all(|s| s.map_or(false, |v| v <= needed));
    verdict(
        ok,
        &format!(
            "12 geometric decay instruments: fitted per-scale slopes nearby {sn:?}, \
             inside-stop {ss:?}, inside-error {se:?}, far {sf:?} (each needs <= {needed}, \
             seed-summed, L=8..9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 13. End-to-end captured-mass trend in the separation parameter.

#[test]
fn a13_good_sum_error_trend() {
    // Witness pair with an O(1) pairing: a coarse mean-zero square wave
    // against the bounded sign profile of its image under the operator.
    // Both stay bounded, so neither corona collapses into its excluded
    // union, and the pairing error is carried by the excluded mass, which
    // shrinks once the separation parameter is large enough for goodness
    // to be non-degenerate at depth.
    let l = 9u32;
    let h = 2f64.powi(-(l as i32));
    let op = DiscretizedOperator::from_kernel(&hilbert_kernel(1.0), l).unwrap();
    let w1 = DyadicFunction::from_fn(1, l, |c| {
        if (4.0 * (c[0] as f64 + 0.5) * h).fract() < 0.5 { 1.0 } else { -1.0 }
    });
    let tw1 = op.apply(&w1).unwrap();
    let mean = tw1.values().iter().sum::<f64>() * h;
    let w2 = tw1.map(move |v| if v - mean >= 0.0 { 1.0 } else { -1.0 });
    let seeds: Vec<u64> = (0..10).collect();
    let mut means = Vec::new();
    for &r in &[6u32, 7, 8] {
        let mut acc = 0.0;
        for &master_seed in &seeds {
            let gp = GridParams::new(1, l, 0, 1.0, r).unwrap();
            let g1 =
                DyadicGrid::new_random(gp, 1, seed::derive(master_seed, &[seed::tag::GRID, 1]));
            let g2 =
                DyadicGrid::new_random(gp, 2, seed::derive(master_seed, &[seed::tag::GRID, 2]));
            let tb = czop::estimate_opnorm(&op, master_seed).max(1e-12);
            let params = corona_params(1, tb);
            let mk = |grid: &DyadicGrid, side: u64| {
                Arc::new(
                    AccretiveSystem::oscillatory(
                        grid,
                        2.0,
                        A_CONST,
                        AMPLITUDE,
                        None,
                        seed::derive(master_seed, &[seed::tag::SYSTEM_CUBE, side]),
                    )
                    .unwrap(),
                )
            };
            let cor1 = corona::build_corona(mk(&g1, 1), &g2, &op, &w1, &params, 1).unwrap();
            let cor2 =
                corona::build_corona(mk(&g2, 2), &g1, &op.transpose(), &w2, &params, 2).unwrap();
            let dec = bilinear::full_decomposition(&cor1, &cor2, &op, master_seed).unwrap();
            acc += dec.good_sum_error;
        }
        means.push(acc / seeds.len() as f64);
    }
    let non_increasing = means.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    verdict(
        non_increasing,
        &format!(
            "13 end-to-end trend: seed-averaged pairing error {:?} non-increasing over \
             r in {{6,7,8}} (10 seeds, L=9, square-wave / operator-sign witnesses)",
            means
        ),
    );
}
