//! Twisted and half-twisted martingale differences over an admissible
//! collection (a base function with accretive averages plus disjoint
//! terminal cubes carrying their own functions), the Box majorant, and the
//! three inequality harnesses: universal transforms, twisted transforms,
//! and the perturbation inequality.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corona::{self, CoronaData};
use crate::dyfun::DyadicFunction;
use crate::error::{Error, Result};
use crate::grid::{Cube, DyadicGrid};
use crate::seed;

/// An admissible collection on a root cube: a function b whose averages
/// stay accretive outside a family of disjoint terminal cubes, each of
/// which carries its own replacement function.
pub struct TwistedContext {
    pub grid: DyadicGrid,
    pub s0: Cube,
    pub b: Arc<DyadicFunction>,
    pub terminals: Vec<Cube>,
    pub terminal_fns: HashMap<Cube, Arc<DyadicFunction>>,
    /// Integrability exponent of the collection.
    pub p: f64,
    /// Accretivity slack: energy caps scale with 1/sigma.
    pub sigma: f64,
    /// Size constant of the collection.
    pub b_const: f64,
    terminal_set: HashSet<Cube>,
}

/// Outcome of the accretivity audit of a context.
#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    pub cubes_checked: usize,
    /// min over eligible cubes of |avg of b| (floor: 1/4).
    pub min_abs_average: f64,
    /// max over eligible cubes of <|b|^p>_Q / (B^p / sigma).
    pub max_energy_ratio: f64,
    /// |<b>_{S0} - 1|.
    pub root_mean_error: f64,
    /// ||b 1_{S0}||_p / (B |S0|^{1/p}).
    pub root_norm_ratio: f64,
    /// True when all four quantities respect their stated caps.
    pub satisfied: bool,
}

impl TwistedContext {
    pub fn new(
        grid: DyadicGrid,
        s0: Cube,
        b: Arc<DyadicFunction>,
        terminals: Vec<Cube>,
        terminal_fns: HashMap<Cube, Arc<DyadicFunction>>,
        p: f64,
        sigma: f64,
        b_const: f64,
    ) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) || !(sigma > 0.0) || !(b_const > 0.0) {
            return Err(Error::Config(format!(
                "context constants out of range: p={p}, sigma={sigma}, B={b_const}"
            )));
        }
        for t in &terminals {
            if t == &s0 || !grid.contains_cube(&s0, t) {
                return Err(Error::Precondition(format!(
                    "terminal {t} is not strictly inside the root {s0}"
                )));
            }
            if !terminal_fns.contains_key(t) {
                return Err(Error::Precondition(format!("terminal {t} has no function")));
            }
        }
        for (i, a) in terminals.iter().enumerate() {
            for c in terminals.iter().skip(i + 1) {
                if grid.contains_cube(a, c) || grid.contains_cube(c, a) {
                    return Err(Error::Precondition(format!(
                        "terminals {a} and {c} are not disjoint"
                    )));
                }
            }
        }
        let terminal_set = terminals.iter().cloned().collect();
        Ok(TwistedContext { grid, s0, b, terminals, terminal_fns, p, sigma, b_const, terminal_set })
    }

    pub fn is_terminal(&self, q: &Cube) -> bool {
        self.terminal_set.contains(q)
    }

    /// All subcubes of the root not strictly inside a terminal, in
    /// breadth-first order (terminals included as leaves).
    pub fn admissible_cubes(&self) -> Vec<Cube> {
        let mut out = Vec::new();
        let mut stack = vec![self.s0.clone()];
        while let Some(q) = stack.pop() {
            let leaf = self.is_terminal(&q) || q.level >= self.grid.params.l;
            out.push(q.clone());
            if !leaf {
                stack.extend(self.grid.children_in_domain(&q));
            }
        }
        out
    }

    /// Interior cubes: admissible, not terminal, and coarser than the
    /// finest level — the cubes carrying martingale differences.
    pub fn interior_cubes(&self) -> Vec<Cube> {
        self.admissible_cubes()
            .into_iter()
            .filter(|q| !self.is_terminal(q) && q.level < self.grid.params.l)
            .collect()
    }

    fn ratio(&self, f: &DyadicFunction, q: &Cube) -> Result<f64> {
        let af = f.avg(&self.grid, q)?;
        let ab = self.b.avg(&self.grid, q)?;
        if ab.abs() < 1e-12 {
            return Err(Error::VanishingDenominator(q.to_string()));
        }
        Ok(af / ab)
    }

    /// Audits the accretivity and energy caps of the collection.
    pub fn check_admissible(&self) -> Result<AdmissibilityReport> {
        let grid = &self.grid;
        let root_measure = corona::measure(grid, &self.s0);
        if root_measure <= 0.0 {
            return Err(Error::DisjointCube(self.s0.to_string()));
        }
        let root_mean_error = (self.b.avg(grid, &self.s0)? - 1.0).abs();
        let abs_p = self.b.map(|v| v.abs().powf(self.p));
        let root_norm_ratio = (abs_p.integral(grid, &self.s0)).powf(1.0 / self.p)
            / (self.b_const * root_measure.powf(1.0 / self.p));
        let energy_cap = self.b_const.powf(self.p) / self.sigma;
        let mut min_abs_average = f64::INFINITY;
        let mut max_energy_ratio = 0.0f64;
        let mut cubes_checked = 0usize;
        for q in self.admissible_cubes() {
            min_abs_average = min_abs_average.min(self.b.avg(grid, &q)?.abs());
            max_energy_ratio = max_energy_ratio.max(abs_p.avg(grid, &q)? / energy_cap);
            cubes_checked += 1;
        }
        let satisfied = root_mean_error <= 1e-9
            && root_norm_ratio <= 1.0 + 1e-9
            && min_abs_average >= 0.25 - 1e-12
            && max_energy_ratio <= 1.0 + 1e-9;
        Ok(AdmissibilityReport {
            cubes_checked,
            min_abs_average,
            max_energy_ratio,
            root_mean_error,
            root_norm_ratio,
            satisfied,
        })
    }

    /// Ratio-increment difference at q: on each non-terminal child, the
    /// jump of the accretive ratio from q to the child.
    pub fn ratio_diff(&self, f: &DyadicFunction, q: &Cube) -> Result<DyadicFunction> {
        self.interior_guard(q)?;
        let grid = &self.grid;
        let gp = &grid.params;
        let r_q = self.ratio(f, q)?;
        let mut acc = vec![0.0; f.cells()];
        for child in grid.children_in_domain(q) {
            if self.is_terminal(&child) {
                continue;
            }
            let r_c = self.ratio(f, &child)?;
            let b = grid.cube_box(&child).clip_domain(gp.domain_ticks()).expect("child");
            f.for_each_cell(&b, |i| acc[i] += r_c - r_q);
        }
        DyadicFunction::new(gp.n, gp.l, acc)
    }

    /// Half-twisted difference at q: child ratios on the non-terminal
    /// children minus the q-level ratio on all of q.
    pub fn half_twisted_diff(&self, f: &DyadicFunction, q: &Cube) -> Result<DyadicFunction> {
        self.interior_guard(q)?;
        let grid = &self.grid;
        let gp = &grid.params;
        let r_q = self.ratio(f, q)?;
        let mut acc = vec![0.0; f.cells()];
        let qbox = grid.cube_box(q).clip_domain(gp.domain_ticks()).expect("cube");
        f.for_each_cell(&qbox, |i| acc[i] -= r_q);
        for child in grid.children_in_domain(q) {
            if self.is_terminal(&child) {
                continue;
            }
            let r_c = self.ratio(f, &child)?;
            let b = grid.cube_box(&child).clip_domain(gp.domain_ticks()).expect("child");
            f.for_each_cell(&b, |i| acc[i] += r_c);
        }
        DyadicFunction::new(gp.n, gp.l, acc)
    }

    /// Twisted difference at q: each child carries its assigned function
    /// (the terminal's own where applicable) scaled by its accretive
    /// ratio, minus the q-level ratio times b.
    pub fn twisted_diff(&self, f: &DyadicFunction, q: &Cube) -> Result<DyadicFunction> {
        self.interior_guard(q)?;
        let grid = &self.grid;
        let gp = &grid.params;
        let r_q = self.ratio(f, q)?;
        let mut acc = vec![0.0; f.cells()];
        for child in grid.children_in_domain(q) {
            let assigned: &DyadicFunction = if self.is_terminal(&child) {
                self.terminal_fns.get(&child).expect("terminal function")
            } else {
                &self.b
            };
            let af = f.avg(grid, &child)?;
            let ag = assigned.avg(grid, &child)?;
            if ag.abs() < 1e-12 {
                return Err(Error::VanishingDenominator(child.to_string()));
            }
            let r_c = af / ag;
            let bx = grid.cube_box(&child).clip_domain(gp.domain_ticks()).expect("child");
            f.for_each_cell(&bx, |i| {
                acc[i] += r_c * assigned.values()[i] - r_q * self.b.values()[i];
            });
        }
        DyadicFunction::new(gp.n, gp.l, acc)
    }

    fn interior_guard(&self, q: &Cube) -> Result<()> {
        if q.level >= self.grid.params.l {
            return Err(Error::Precondition(format!("{q} has no children to difference over")));
        }
        if self.is_terminal(q) {
            return Err(Error::Precondition(format!("{q} is terminal")));
        }
        Ok(())
    }

    /// Box majorant at q: |half-twisted difference| plus the indicator of
    /// q when one of its children is terminal.
    pub fn box_majorant(&self, f: &DyadicFunction, q: &Cube) -> Result<DyadicFunction> {
        let grid = &self.grid;
        let gp = &grid.params;
        let half = self.half_twisted_diff(f, q)?;
        let mut acc: Vec<f64> = half.values().iter().map(|v| v.abs()).collect();
        if grid.children_in_domain(q).iter().any(|c| self.is_terminal(c)) {
            let qbox = grid.cube_box(q).clip_domain(gp.domain_ticks()).expect("cube");
            half.for_each_cell(&qbox, |i| acc[i] += 1.0);
        }
        DyadicFunction::new(gp.n, gp.l, acc)
    }
}

/// Bounded coefficients attached to cubes; missing cubes count as zero.
#[derive(Debug, Clone)]
pub struct SignPattern {
    pub eps: HashMap<Cube, f64>,
}

impl SignPattern {
    pub fn get(&self, q: &Cube) -> f64 {
        self.eps.get(q).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (q, e) in &self.eps {
            if !(e.abs() <= 1.0) {
                return Err(Error::Validation(format!("coefficient {e} at {q} exceeds 1")));
            }
        }
        Ok(())
    }

    pub fn all_ones(cubes: &[Cube]) -> Self {
        SignPattern { eps: cubes.iter().map(|c| (c.clone(), 1.0)).collect() }
    }

    /// Deterministic +-1 pattern keyed by level and index parity.
    pub fn alternating(cubes: &[Cube]) -> Self {
        SignPattern {
            eps: cubes
                .iter()
                .map(|c| {
                    let parity =
                        (c.level as i64 + c.idx.iter().sum::<i64>()).rem_euclid(2);
                    (c.clone(), if parity == 0 { 1.0 } else { -1.0 })
                })
                .collect(),
        }
    }

    /// Independent uniform +-1 signs.
    pub fn rademacher(cubes: &[Cube], rng: &mut ChaCha8Rng) -> Self {
        SignPattern {
            eps: cubes
                .iter()
                .map(|c| (c.clone(), if rng.gen::<bool>() { 1.0 } else { -1.0 }))
                .collect(),
        }
    }
}

/// Enumerates the pattern sweep of a harness: all-ones, alternating, then
/// `trials` independent random sign patterns.
fn pattern_sweep(cubes: &[Cube], trials: usize, seed_val: u64) -> Vec<SignPattern> {
    let mut out = vec![SignPattern::all_ones(cubes), SignPattern::alternating(cubes)];
    let mut rng = seed::stream(seed_val, &[seed::tag::SIGN_PATTERN]);
    for _ in 0..trials {
        out.push(SignPattern::rademacher(cubes, &mut rng));
    }
    out
}

/// Worst-case norm ratios of the three transform variants over a pattern
/// sweep.
#[derive(Debug, Clone, Serialize)]
pub struct TransformReport {
    pub q: f64,
    pub patterns: usize,
    /// max over patterns of ||sum eps D~ f||_q / ||f 1_{S0}||_q.
    pub max_half_ratio: f64,
    /// Same with the ratio-increment differences.
    pub max_increment_ratio: f64,
    /// Same with the twisted differences (meaningful at q = p).
    pub max_twisted_ratio: f64,
}

/// Runs the transform harness on a context: for each sign pattern, forms
/// the three transformed sums over the interior cubes and records the
/// worst norm ratio against the root-restricted norm of f.
pub fn universal_transform_test(
    ctx: &TwistedContext,
    f: &DyadicFunction,
    q: f64,
    trials: usize,
    seed_val: u64,
) -> Result<TransformReport> {
    let grid = &ctx.grid;
    let gp = &grid.params;
    let interior = ctx.interior_cubes();
    // The differences live inside the root, so restrict f there too.
    let root_box = grid.cube_box(&ctx.s0).clip_domain(gp.domain_ticks()).expect("root");
    let mut rv = vec![0.0; f.cells()];
    f.for_each_cell(&root_box, |i| rv[i] = f.values()[i]);
    let denom = DyadicFunction::new(gp.n, gp.l, rv)?.lq_norm(q).max(1e-300);

    let halves: Vec<DyadicFunction> =
        interior.iter().map(|c| ctx.half_twisted_diff(f, c)).collect::<Result<_>>()?;
    let increments: Vec<DyadicFunction> =
        interior.iter().map(|c| ctx.ratio_diff(f, c)).collect::<Result<_>>()?;
    let twisteds: Vec<DyadicFunction> =
        interior.iter().map(|c| ctx.twisted_diff(f, c)).collect::<Result<_>>()?;

    let mut max_half = 0.0f64;
    let mut max_inc = 0.0f64;
    let mut max_tw = 0.0f64;
    let sweep = pattern_sweep(&interior, trials, seed_val);
    for pat in &sweep {
        pat.validate()?;
        let mut h = vec![0.0; f.cells()];
        let mut d = vec![0.0; f.cells()];
        let mut t = vec![0.0; f.cells()];
        for (c, (hf, (df, tf))) in
            interior.iter().zip(halves.iter().zip(increments.iter().zip(twisteds.iter())))
        {
            let e = pat.get(c);
            if e == 0.0 {
                continue;
            }
            for i in 0..h.len() {
                h[i] += e * hf.values()[i];
                d[i] += e * df.values()[i];
                t[i] += e * tf.values()[i];
            }
        }
        max_half = max_half.max(DyadicFunction::new(gp.n, gp.l, h)?.lq_norm(q) / denom);
        max_inc = max_inc.max(DyadicFunction::new(gp.n, gp.l, d)?.lq_norm(q) / denom);
        max_tw = max_tw.max(DyadicFunction::new(gp.n, gp.l, t)?.lq_norm(q) / denom);
    }
    Ok(TransformReport {
        q,
        patterns: sweep.len(),
        max_half_ratio: max_half,
        max_increment_ratio: max_inc,
        max_twisted_ratio: max_tw,
    })
}

/// Twisted-transform functional on a corona: the normalized norm of the
/// coefficient-weighted sum of twisted differences over the good cubes
/// inside q0. `perturbed` selects the perturbed accretive family.
pub fn twisted_transform_test(
    cor: &CoronaData,
    q0: &Cube,
    pattern: &SignPattern,
    p: f64,
    perturbed: bool,
) -> Result<f64> {
    pattern.validate()?;
    let grid = cor.grid();
    let gp = &grid.params;
    let mut acc = vec![0.0; cor.f.cells()];
    for c in &cor.g_cubes {
        if c.level >= gp.l || !grid.contains_cube(q0, c) {
            continue;
        }
        let e = pattern.get(c);
        if e != 0.0 {
            cor.accumulate_twisted_diff(&mut acc, &cor.f, c, e, perturbed)?;
        }
    }
    let m = corona::measure(grid, q0);
    if m <= 0.0 {
        return Err(Error::DisjointCube(q0.to_string()));
    }
    Ok(DyadicFunction::new(gp.n, gp.l, acc)?.lq_norm(p) / m.powf(1.0 / p))
}

/// Total truncated measure of each stopping generation (roots are
/// generation zero). Under the sparseness property the masses decay
/// geometrically.
pub fn stopping_generation_measures(cor: &CoronaData) -> Vec<f64> {
    let grid = cor.grid();
    let mut depth: HashMap<Cube, usize> = HashMap::new();
    let mut masses: Vec<f64> = Vec::new();
    for c in &cor.tree.cubes {
        let d = match cor.tree.parents.get(c) {
            Some(Some(p)) => depth.get(p).copied().unwrap_or(0) + 1,
            _ => 0,
        };
        depth.insert(c.clone(), d);
        if masses.len() <= d {
            masses.resize(d + 1, 0.0);
        }
        masses[d] += corona::measure(grid, c);
    }
    masses
}

/// Outcome of the perturbation harness.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    /// Square-function norm of the twisted-difference discrepancies.
    pub lhs_twisted: f64,
    /// Square-function norm of the half-twisted discrepancies.
    pub lhs_half: f64,
    /// upsilon (||f 1_{S0}||_p + lambda_cap |S0|^{1/p}).
    pub rhs: f64,
    pub ratio_twisted: f64,
    pub ratio_half: f64,
    /// Measured closeness: max over cubes of (<|b-beta|^p>_Q)^{1/p}.
    pub measured_closeness: f64,
}

/// Compares twisted (and half-twisted) differences taken with respect to
/// two nearby accretive families on the same geometry. Preconditions: the
/// two contexts share root and terminals, the families are upsilon-close
/// in normalized p-mean on every admissible cube and terminal, averages of
/// f are capped by lambda_cap, and upsilon < 1/8.
pub fn perturbation_test(
    ctx_b: &TwistedContext,
    ctx_beta: &TwistedContext,
    f: &DyadicFunction,
    upsilon: f64,
    lambda_cap: f64,
) -> Result<PerturbationReport> {
    if ctx_b.s0 != ctx_beta.s0 || ctx_b.terminals != ctx_beta.terminals {
        return Err(Error::Precondition(
            "perturbation test needs contexts sharing root and terminals".into(),
        ));
    }
    if !(upsilon < 0.125 && upsilon > 0.0) {
        return Err(Error::Precondition(format!("upsilon {upsilon} outside (0, 1/8)")));
    }
    let grid = &ctx_b.grid;
    let gp = &grid.params;
    let p = ctx_b.p;
    let diff_p = ctx_b.b.sub(&ctx_beta.b)?.map(|v| v.abs().powf(p));
    let mut measured = 0.0f64;
    let mut check = |g: &DyadicFunction, q: &Cube| -> Result<()> {
        let v = g.avg(grid, q)?.powf(1.0 / p);
        measured = measured.max(v);
        if v > upsilon * (1.0 + 1e-9) {
            return Err(Error::Precondition(format!(
                "closeness violated at {q}: measured {v} vs upsilon {upsilon}"
            )));
        }
        let af = f.avg(grid, q)?.abs();
        if af > lambda_cap * (1.0 + 1e-9) {
            return Err(Error::Precondition(format!(
                "average cap violated at {q}: {af} vs {lambda_cap}"
            )));
        }
        Ok(())
    };
    for q in ctx_b.admissible_cubes() {
        if ctx_b.is_terminal(&q) {
            let tb = ctx_b.terminal_fns.get(&q).expect("terminal fn");
            let tbeta = ctx_beta.terminal_fns.get(&q).expect("terminal fn");
            let td = tb.sub(tbeta)?.map(|v| v.abs().powf(p));
            check(&td, &q)?;
        } else {
            check(&diff_p, &q)?;
        }
    }

    let mut sq_twisted = vec![0.0f64; f.cells()];
    let mut sq_half = vec![0.0f64; f.cells()];
    for q in ctx_b.interior_cubes() {
        let dt = ctx_b.twisted_diff(f, &q)?.sub(&ctx_beta.twisted_diff(f, &q)?)?;
        let dh = ctx_b.half_twisted_diff(f, &q)?.sub(&ctx_beta.half_twisted_diff(f, &q)?)?;
        for i in 0..sq_twisted.len() {
            sq_twisted[i] += dt.values()[i] * dt.values()[i];
            sq_half[i] += dh.values()[i] * dh.values()[i];
        }
    }
    let lhs_twisted =
        DyadicFunction::new(gp.n, gp.l, sq_twisted.iter().map(|v| v.sqrt()).collect())?
            .lq_norm(p);
    let lhs_half = DyadicFunction::new(gp.n, gp.l, sq_half.iter().map(|v| v.sqrt()).collect())?
        .lq_norm(p);
    let root_box = grid.cube_box(&ctx_b.s0).clip_domain(gp.domain_ticks()).expect("root");
    let mut rv = vec![0.0; f.cells()];
    f.for_each_cell(&root_box, |i| rv[i] = f.values()[i]);
    let f_norm = DyadicFunction::new(gp.n, gp.l, rv)?.lq_norm(p);
    let m0 = corona::measure(grid, &ctx_b.s0);
    let rhs = upsilon * (f_norm + lambda_cap * m0.powf(1.0 / p));
    Ok(PerturbationReport {
        lhs_twisted,
        lhs_half,
        rhs,
        ratio_twisted: lhs_twisted / rhs.max(1e-300),
        ratio_half: lhs_half / rhs.max(1e-300),
        measured_closeness: measured,
    })
}

/// Audits the geometric-ratio control bounds that drive the perturbation
/// estimates: with r_k(Q) = (<b-beta>_Q / <beta>_Q)^k, each |r_k(Q)| stays
/// under 2(4 upsilon)^k and the child-parent increment of r_k is dominated
/// by the k=1 increment times k (8 upsilon)^{k-1}. Powers are checked up
/// to k = 20; the tail beyond that is absorbed into the tolerance.
pub fn control_report(
    ctx_b: &TwistedContext,
    ctx_beta: &TwistedContext,
    upsilon: f64,
) -> Result<(usize, f64)> {
    let grid = &ctx_b.grid;
    let diff = ctx_b.b.sub(&ctx_beta.b)?;
    let tail = 2.0 * (4.0 * upsilon).powi(21) / (1.0 - 4.0 * upsilon);
    let tol = tail + 1e-12;
    let r1 = |q: &Cube| -> Result<f64> {
        let num = diff.avg(grid, q)?;
        let den = ctx_beta.b.avg(grid, q)?;
        if den.abs() < 1e-12 {
            return Err(Error::VanishingDenominator(q.to_string()));
        }
        Ok(num / den)
    };
    let mut checked = 0usize;
    let mut worst_margin = f64::NEG_INFINITY;
    for q in ctx_b.interior_cubes() {
        let rq = r1(&q)?;
        for child in grid.children_in_domain(&q) {
            if ctx_b.is_terminal(&child) {
                continue;
            }
            let rc = r1(&child)?;
            let base_inc = (rc - rq).abs();
            for k in 1..=20u32 {
                let bound_abs = 2.0 * (4.0 * upsilon).powi(k as i32) + tol;
                let margin1 = rq.powi(k as i32).abs() - bound_abs;
                let margin2 = rc.powi(k as i32).abs() - bound_abs;
                let inc = (rc.powi(k as i32) - rq.powi(k as i32)).abs();
                let bound_inc =
                    base_inc * k as f64 * (8.0 * upsilon).powi(k as i32 - 1) + tol;
                let margin3 = inc - bound_inc;
                worst_margin = worst_margin.max(margin1).max(margin2).max(margin3);
                checked += 1;
                if margin1 > 0.0 || margin2 > 0.0 || margin3 > 0.0 {
                    return Err(Error::Validation(format!(
                        "ratio control fails at {q} child {child} power {k}"
                    )));
                }
            }
        }
    }
    Ok((checked, worst_margin))
}

/// Builds the paired admissible contexts (original and perturbed family)
/// rooted at a surviving stopping cube of a corona. Terminals are the
/// maximal cubes among the surviving stopping children of s0 and the
/// children of excluded cubes inside s0; those excluded-cube children keep
/// the original family in both contexts.
pub fn context_from_corona(
    cor: &CoronaData,
    s0: &Cube,
) -> Result<(TwistedContext, TwistedContext)> {
    let grid = cor.grid();
    if !cor.in_s(s0) {
        return Err(Error::Precondition(format!("{s0} does not survive truncation")));
    }
    if cor.types.b_union.iter().any(|r| grid.contains_cube(r, s0)) {
        return Err(Error::Precondition(format!("{s0} lies inside an excluded cube")));
    }
    let mut raw: Vec<Cube> = cor
        .tree
        .stopping_children(s0)
        .into_iter()
        .filter(|c| cor.in_s(c))
        .collect();
    for r in &cor.types.b_union {
        if r.level < grid.params.l && grid.contains_cube(s0, r) && r != s0 {
            raw.extend(grid.children_in_domain(r));
        }
    }
    let terminals = corona::maximal_cubes(grid, raw);
    let mut fns_b: HashMap<Cube, Arc<DyadicFunction>> = HashMap::new();
    let mut fns_beta: HashMap<Cube, Arc<DyadicFunction>> = HashMap::new();
    let surviving: HashSet<Cube> =
        cor.tree.cubes.iter().filter(|c| cor.in_s(c)).cloned().collect();
    for t in &terminals {
        let original = cor.sys.b(t)?;
        fns_b.insert(t.clone(), original.clone());
        if surviving.contains(t) {
            fns_beta.insert(t.clone(), cor.beta_of(t)?);
        } else {
            fns_beta.insert(t.clone(), original);
        }
    }
    let p = cor.params.p(cor.j);
    let sigma = cor.params.delta;
    let b_const = cor.sys.a_const;
    let ctx_b = TwistedContext::new(
        grid.clone(),
        s0.clone(),
        cor.b_of(s0)?,
        terminals.clone(),
        fns_b,
        p,
        sigma,
        b_const,
    )?;
    let ctx_beta = TwistedContext::new(
        grid.clone(),
        s0.clone(),
        cor.beta_of(s0)?,
        terminals,
        fns_beta,
        p,
        sigma,
        b_const,
    )?;
    Ok((ctx_b, ctx_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyfun;
    use crate::grid::GridParams;

    fn plain_context(l: u32) -> TwistedContext {
        let p = GridParams::new(1, l, 0, 1.0, 2).unwrap();
        let grid = DyadicGrid::zero_shift(p, 1);
        let s0 = grid.cubes_at_level(0)[0].clone();
        let b = Arc::new(DyadicFunction::constant(1, l, 1.0));
        TwistedContext::new(grid, s0, b, Vec::new(), HashMap::new(), 2.0, 0.25, 2.0).unwrap()
    }

    #[test]
    fn constant_family_collapses_to_classical_differences() {
        let ctx = plain_context(5);
        let f = DyadicFunction::random_uniform(1, 5, 42, 3);
        for q in ctx.interior_cubes() {
            let tw = ctx.twisted_diff(&f, &q).unwrap();
            let cl = dyfun::martingale_diff(&f, &ctx.grid, &q).unwrap();
            assert!(tw.sub(&cl).unwrap().linf_norm() <= 1e-12);
            let half = ctx.half_twisted_diff(&f, &q).unwrap();
            assert!(half.sub(&cl).unwrap().linf_norm() <= 1e-12);
        }
    }

    #[test]
    fn admissibility_of_constant_family() {
        let ctx = plain_context(5);
        let rep = ctx.check_admissible().unwrap();
        assert!(rep.satisfied, "{rep:?}");
        assert!((rep.min_abs_average - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_function_gives_zero_ratios() {
        let ctx = plain_context(5);
        let f = DyadicFunction::zero(1, 5);
        let rep = universal_transform_test(&ctx, &f, 2.0, 5, 9).unwrap();
        assert_eq!(rep.max_half_ratio, 0.0);
        assert_eq!(rep.max_increment_ratio, 0.0);
        assert_eq!(rep.max_twisted_ratio, 0.0);
    }

    #[test]
    fn parseval_bound_for_trivial_system_at_q2() {
        let ctx = plain_context(6);
        let f = DyadicFunction::random_uniform(1, 6, 7, 2);
        // With all-ones coefficients the transformed sum telescopes to
        // f minus its top average, so its L2 norm is at most ||f||_2.
        let interior = ctx.interior_cubes();
        let pat = SignPattern::all_ones(&interior);
        let mut acc = vec![0.0; f.cells()];
        for q in &interior {
            let d = ctx.twisted_diff(&f, q).unwrap();
            for i in 0..acc.len() {
                acc[i] += pat.get(q) * d.values()[i];
            }
        }
        let total = DyadicFunction::new(1, 6, acc).unwrap();
        assert!(total.l2_norm_sq().sqrt() <= f.l2_norm_sq().sqrt() + 1e-12);
    }

    #[test]
    fn terminal_children_use_their_own_function() {
        let l = 4;
        let p = GridParams::new(1, l, 0, 1.0, 2).unwrap();
        let grid = DyadicGrid::zero_shift(p, 1);
        let s0 = grid.cubes_at_level(0)[0].clone();
        let term = grid.children_in_domain(&s0)[0].clone();
        let b = Arc::new(DyadicFunction::constant(1, l, 1.0));
        let tf = Arc::new(DyadicFunction::constant(1, l, 2.0));
        let mut fns = HashMap::new();
        fns.insert(term.clone(), tf);
        let ctx = TwistedContext::new(
            grid.clone(),
            s0.clone(),
            b,
            vec![term.clone()],
            fns,
            2.0,
            0.25,
            2.0,
        )
        .unwrap();
        let f = DyadicFunction::constant(1, l, 1.0);
        let d = ctx.twisted_diff(&f, &s0).unwrap();
        // On the terminal child: (1/2)*2 - 1*1 = 0; elsewhere 1 - 1 = 0.
        assert!(d.linf_norm() <= 1e-12);
        // Interior cubes exclude the terminal and it cannot be differenced.
        assert!(ctx.twisted_diff(&f, &term).is_err());
        assert!(!ctx.interior_cubes().contains(&term));
    }

    #[test]
    fn perturbation_vanishes_when_families_agree() {
        let ctx = plain_context(5);
        let ctx2 = plain_context(5);
        let f = DyadicFunction::random_uniform(1, 5, 3, 1);
        let rep = perturbation_test(&ctx, &ctx2, &f, 0.1, 2.0).unwrap();
        assert_eq!(rep.lhs_twisted, 0.0);
        assert_eq!(rep.lhs_half, 0.0);
        assert!(rep.rhs > 0.0);
    }

    #[test]
    fn perturbation_scales_linearly_in_upsilon() {
        let l = 6;
        let p = GridParams::new(1, l, 0, 1.0, 2).unwrap();
        let grid = DyadicGrid::zero_shift(p, 1);
        let s0 = grid.cubes_at_level(0)[0].clone();
        let b = Arc::new(DyadicFunction::constant(1, l, 1.0));
        // Mean-zero bounded bump scaled by upsilon.
        let h = DyadicFunction::from_fn(1, l, |c| if c[0] % 2 == 0 { 1.0 } else { -1.0 });
        let f = DyadicFunction::random_uniform(1, l, 17, 1);
        let mut ratios = Vec::new();
        for &u in &[0.08, 0.04] {
            let beta = Arc::new(b.sub(&h.map(|v| v * u)).unwrap());
            let ctx_b = TwistedContext::new(
                grid.clone(),
                s0.clone(),
                b.clone(),
                Vec::new(),
                HashMap::new(),
                2.0,
                0.25,
                2.0,
            )
            .unwrap();
            let ctx_beta = TwistedContext::new(
                grid.clone(),
                s0.clone(),
                beta,
                Vec::new(),
                HashMap::new(),
                2.0,
                0.25,
                2.0,
            )
            .unwrap();
            let rep = perturbation_test(&ctx_b, &ctx_beta, &f, u, 2.0).unwrap();
            ratios.push(rep.ratio_twisted);
            let (checked, worst) = control_report(&ctx_b, &ctx_beta, u).unwrap();
            assert!(checked > 0 && worst <= 0.0);
        }
        // LHS is linear in the perturbation size while RHS carries an
        // explicit factor of upsilon, so the two ratios should agree.
        let rel = (ratios[0] - ratios[1]).abs() / ratios[0].max(1e-300);
        assert!(rel <= 0.15, "ratios {ratios:?}");
    }

    #[test]
    fn sweep_includes_deterministic_patterns() {
        let cubes = vec![];
        let sweep = pattern_sweep(&cubes, 3, 1);
        assert_eq!(sweep.len(), 5);
    }
}
