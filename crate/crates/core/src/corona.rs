//! Stopping-tree ("corona") construction: selection of the test target
//! function, the auxiliary stopping tree driven by average/maximal/testing
//! criteria, perturbation of the accretive functions by their bad-cube
//! martingale parts, truncation at the three types of undesirable cubes,
//! and the exact representation formula over the surviving good cubes.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::accretive::AccretiveSystem;
use crate::czop::DiscretizedOperator;
use crate::dyfun::{self, DyadicFunction};
use crate::error::{Error, Result};
use crate::grid::{classify_goodness, Cube, DyadicGrid};

/// Parameters of the corona construction.
///
/// `tb_proxy` stands in for the unknown global operator norm inside the
/// Type A thresholds; any fixed nonnegative value preserves the structure
/// of the construction and is echoed in reports.
#[derive(Debug, Clone, Serialize)]
pub struct CoronaParams {
    pub p1: f64,
    pub p2: f64,
    /// Stopping slack: thresholds scale with 1/delta.
    pub delta: f64,
    /// Sparseness budget for stopping children.
    pub tau: f64,
    /// Average cap for the selected function (Type C threshold).
    pub lambda: f64,
    /// Type A threshold; must stay below 4^{-1-n}.
    pub upsilon1: f64,
    /// Stand-in for the global operator norm in Type A thresholds.
    pub tb_proxy: f64,
}

impl CoronaParams {
    pub fn new(
        n: u32,
        p1: f64,
        p2: f64,
        delta: f64,
        tau: f64,
        lambda: f64,
        upsilon1: f64,
        tb_proxy: f64,
    ) -> Result<Self> {
        if !(p1 > 1.0 && p1.is_finite() && p2 > 1.0 && p2.is_finite()) {
            return Err(Error::Config(format!("exponents must lie in (1,inf), got {p1}, {p2}")));
        }
        if 1.0 / p1 + 1.0 / p2 > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "1/p1 + 1/p2 = {} exceeds 1",
                1.0 / p1 + 1.0 / p2
            )));
        }
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::Config(format!("delta {delta} outside (0,1)")));
        }
        if !(0.0 < tau && tau < 1.0) {
            return Err(Error::Config(format!("tau {tau} outside (0,1)")));
        }
        if !(lambda > 1.0) {
            return Err(Error::Config(format!("lambda {lambda} must exceed 1")));
        }
        let cap = 4.0f64.powi(-1 - n as i32);
        if !(0.0 < upsilon1 && upsilon1 < cap) {
            return Err(Error::Config(format!(
                "upsilon1 {upsilon1} outside (0, 4^-(1+n)) = (0, {cap})"
            )));
        }
        if !(tb_proxy >= 0.0 && tb_proxy.is_finite()) {
            return Err(Error::Config(format!("tb_proxy {tb_proxy} must be finite and >= 0")));
        }
        Ok(CoronaParams { p1, p2, delta, tau, lambda, upsilon1, tb_proxy })
    }

    /// Exponent attached to side j.
    pub fn p(&self, j: u8) -> f64 {
        if j == 1 {
            self.p1
        } else {
            self.p2
        }
    }

    pub fn dual(p: f64) -> f64 {
        p / (p - 1.0)
    }

    /// The dual exponent of the opposite side, p_k' with {j,k} = {1,2}.
    pub fn other_dual(&self, j: u8) -> f64 {
        Self::dual(self.p(3 - j))
    }
}

/// Per-stopping-cube record: which criterion fired, tree parent, whether
/// the recursion bottomed out at a finest cell.
#[derive(Debug, Clone, Serialize)]
pub struct StopInfo {
    pub parent: Option<String>,
    pub criteria: Vec<String>,
    pub terminal: bool,
}

/// The stopping collection with its parent/child structure. Cubes are kept
/// in insertion order, parents before children.
#[derive(Debug, Clone)]
pub struct StoppingTree {
    pub grid_id: u8,
    pub cubes: Vec<Cube>,
    pub info: HashMap<Cube, StopInfo>,
    pub parents: HashMap<Cube, Option<Cube>>,
    pub warnings: Vec<String>,
    /// Empirical local testing constant used by the testing criterion.
    pub t_loc: f64,
    members: HashSet<Cube>,
}

impl StoppingTree {
    pub fn contains(&self, q: &Cube) -> bool {
        self.members.contains(q)
    }

    /// Minimal stopping cube containing q (q itself when q is stopping).
    pub fn stopping_parent(&self, grid: &DyadicGrid, q: &Cube) -> Result<Cube> {
        let mut cur = q.clone();
        loop {
            if self.contains(&cur) {
                return Ok(cur);
            }
            cur = grid.parent(&cur).ok_or_else(|| {
                Error::Inconsistency(format!("{q} has no stopping ancestor"))
            })?;
        }
    }

    /// Maximal stopping cubes strictly inside s (the tree children).
    pub fn stopping_children(&self, s: &Cube) -> Vec<Cube> {
        self.cubes
            .iter()
            .filter(|c| self.parents.get(*c).map(|p| p.as_ref() == Some(s)).unwrap_or(false))
            .cloned()
            .collect()
    }

    fn push(&mut self, cube: Cube, parent: Option<Cube>, criteria: Vec<String>, terminal: bool) {
        self.info.insert(
            cube.clone(),
            StopInfo {
                parent: parent.as_ref().map(|p| p.to_string()),
                criteria,
                terminal,
            },
        );
        self.parents.insert(cube.clone(), parent);
        self.members.insert(cube.clone());
        self.cubes.push(cube);
    }
}

/// Truncated measure |Q| of a cube on the bounded domain.
pub fn measure(grid: &DyadicGrid, cube: &Cube) -> f64 {
    let p = &grid.params;
    grid.cube_box(cube)
        .clip_domain(p.domain_ticks())
        .map(|b| b.volume_cells() as f64 * p.cell_volume())
        .unwrap_or(0.0)
}

/// Selected target function: the top-block averages of the witness plus its
/// martingale differences over good cubes only. Returns (f_j, ||f~ - f||_2).
pub fn select_f(
    grid_j: &DyadicGrid,
    grid_k: &DyadicGrid,
    f_tilde: &DyadicFunction,
) -> Result<(DyadicFunction, f64)> {
    let top = dyfun::top_part(f_tilde, grid_j);
    let good = dyfun::project_good(f_tilde, grid_j, grid_k)?;
    let f = top.add(&good)?;
    let diff = f_tilde.sub(&f)?.l2_norm_sq().sqrt();
    Ok((f, diff))
}

/// Builds the auxiliary stopping tree for side j: starts from the top-level
/// cubes, then repeatedly adds maximal descendants of each stopping cube S
/// that fail the average floor, the maximal-energy cap, the testing-energy
/// cap (against the supplied operator, oriented for side j), or the
/// infimum-of-maximal cap. The recursion bottoms out at the finest cells,
/// which become terminal stopping cubes with a recorded warning.
pub fn build_auxiliary_tree(
    sys: &AccretiveSystem,
    op: &DiscretizedOperator,
    params: &CoronaParams,
    j: u8,
) -> Result<StoppingTree> {
    let grid = &sys.grid;
    let gp = &grid.params;
    let p_j = params.p(j);
    let pk_dual = params.other_dual(j);
    let t_loc = crate::czop::testing_constant(op, sys, pk_dual)?;
    let avg_floor = 0.5;
    let max_cap = sys.a_const.powf(p_j) / params.delta;
    let test_cap = t_loc.powf(pk_dual) / params.delta;

    let mut tree = StoppingTree {
        grid_id: grid.id,
        cubes: Vec::new(),
        info: HashMap::new(),
        parents: HashMap::new(),
        warnings: Vec::new(),
        t_loc,
        members: HashSet::new(),
    };
    for q in grid.cubes_at_level(gp.top_level) {
        tree.push(q, None, vec!["root".into()], gp.top_level == gp.l);
    }

    let domain = gp.domain_ticks();
    let mut idx = 0;
    while idx < tree.cubes.len() {
        let s = tree.cubes[idx].clone();
        idx += 1;
        if s.level >= gp.l {
            continue;
        }
        let b_s = sys.b(&s)?;
        let mb_p = dyfun::maximal(&b_s, grid).map(|v| v.abs().powf(p_j));
        let m_inf = dyfun::maximal(&b_s.map(|v| v.abs().powf(p_j)), grid);
        let tb_p = op.apply(&b_s)?.map(|v| v.abs().powf(pk_dual));

        let mut stack: Vec<Cube> = grid.children_in_domain(&s);
        while let Some(q) = stack.pop() {
            let mut fired: Vec<String> = Vec::new();
            if b_s.avg(grid, &q)? < avg_floor {
                fired.push("mean-below-half".into());
            }
            if mb_p.avg(grid, &q)? > max_cap {
                fired.push("maximal-energy".into());
            }
            if tb_p.avg(grid, &q)? > test_cap {
                fired.push("testing-energy".into());
            }
            let covered = grid
                .cube_box(&q)
                .clip_domain(domain)
                .ok_or_else(|| Error::DisjointCube(q.to_string()))?;
            let mut inf = f64::INFINITY;
            m_inf.for_each_cell(&covered, |i| inf = inf.min(m_inf.values()[i]));
            if inf > max_cap {
                fired.push("inf-maximal".into());
            }
            if !fired.is_empty() {
                let terminal = q.level >= gp.l;
                if terminal {
                    tree.warnings.push(format!(
                        "stopping recursion reached the finest level at {q}; recorded as terminal"
                    ));
                }
                tree.push(q, Some(s.clone()), fired, terminal);
            } else if q.level < gp.l {
                stack.extend(grid.children_in_domain(&q));
            }
        }
    }
    Ok(tree)
}

/// Measured sparseness: for every stopping cube S, the children mass
/// sum |S'| over tree children S' divided by |S|. Returns the worst ratio.
pub fn sparseness_ratios(tree: &StoppingTree, grid: &DyadicGrid) -> Vec<(Cube, f64)> {
    let mut mass: HashMap<Cube, f64> = HashMap::new();
    for c in &tree.cubes {
        if let Some(Some(p)) = tree.parents.get(c) {
            *mass.entry(p.clone()).or_insert(0.0) += measure(grid, c);
        }
    }
    tree.cubes
        .iter()
        .map(|s| {
            let m = measure(grid, s);
            let kids = mass.get(s).copied().unwrap_or(0.0);
            (s.clone(), if m > 0.0 { kids / m } else { 0.0 })
        })
        .collect()
}

fn is_bad(
    grid: &DyadicGrid,
    other: &DyadicGrid,
    cache: Option<&HashMap<Cube, bool>>,
    q: &Cube,
) -> bool {
    match cache.and_then(|c| c.get(q)) {
        Some(&good) => !good,
        None => !classify_goodness(grid, q, other).good,
    }
}

/// Perturbation of b_S: beta~_S is the sum of martingale differences of b_S
/// over the bad cubes of the block of S, and beta_S = b_S - beta~_S.
/// The integral of beta_S over S equals |S| (the differences are mean zero).
pub fn perturb_b(
    tree: &StoppingTree,
    sys: &AccretiveSystem,
    other_grid: &DyadicGrid,
    s: &Cube,
    goodness: Option<&HashMap<Cube, bool>>,
) -> Result<(DyadicFunction, DyadicFunction)> {
    let grid = &sys.grid;
    let gp = &grid.params;
    let b_s = sys.b(s)?;
    let mut acc = vec![0.0f64; b_s.cells()];
    let mut stack = vec![s.clone()];
    while let Some(q) = stack.pop() {
        if &q != s && tree.contains(&q) {
            continue;
        }
        if q.level < gp.l {
            if is_bad(grid, other_grid, goodness, &q) {
                dyfun::accumulate_martingale_diff(&mut acc, &b_s, grid, &q, 1.0)?;
            }
            stack.extend(grid.children_in_domain(&q));
        }
    }
    let beta_tilde = DyadicFunction::new(gp.n, gp.l, acc)?;
    let beta = b_s.sub(&beta_tilde)?;
    let m = measure(grid, s);
    let integral = beta.integral(grid, s);
    if (integral - m).abs() > 1e-9 * m.max(1.0) {
        return Err(Error::Inconsistency(format!(
            "perturbed mean drifted on {s}: integral {integral} vs measure {m}"
        )));
    }
    Ok((beta, beta_tilde))
}

/// Keeps only cubes not contained in an earlier-kept (larger) cube.
pub fn maximal_cubes(grid: &DyadicGrid, mut cubes: Vec<Cube>) -> Vec<Cube> {
    cubes.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.idx.cmp(&b.idx)));
    cubes.dedup();
    let mut kept: Vec<Cube> = Vec::new();
    'outer: for c in cubes {
        for k in &kept {
            if grid.contains_cube(k, &c) {
                continue 'outer;
            }
        }
        kept.push(c);
    }
    kept
}

/// The three collections of undesirable cubes and the maximal union.
#[derive(Debug, Clone)]
pub struct TypeClassification {
    /// Maximal cubes whose own or stopping-child averages of the maximal /
    /// operator image of the perturbation part exceed the thresholds.
    pub type_a: Vec<Cube>,
    /// Maximal bad cubes with a stopping child (and not Type A).
    pub type_b: Vec<Cube>,
    /// Maximal cubes where the selected function's average exceeds the cap.
    pub type_c: Vec<Cube>,
    /// Maximal cubes of the union of the three types.
    pub b_union: Vec<Cube>,
}

impl TypeClassification {
    /// Total truncated measure of the union set.
    pub fn union_measure(&self, grid: &DyadicGrid) -> f64 {
        self.b_union.iter().map(|c| measure(grid, c)).sum()
    }
}

/// Classifies every cube of side j against the three exclusion types and
/// returns the per-type maximal collections plus the maximal union.
#[allow(clippy::too_many_arguments)]
pub fn classify_types(
    sys: &AccretiveSystem,
    other_grid: &DyadicGrid,
    op: &DiscretizedOperator,
    tree: &StoppingTree,
    beta_tilde: &HashMap<Cube, Arc<DyadicFunction>>,
    f: &DyadicFunction,
    params: &CoronaParams,
    j: u8,
    goodness: Option<&HashMap<Cube, bool>>,
) -> Result<TypeClassification> {
    let grid = &sys.grid;
    let p_j = params.p(j);
    let pk_dual = params.other_dual(j);
    let thr_m = params.upsilon1.powf(p_j);
    let thr_t = params.upsilon1.powf(pk_dual) * params.tb_proxy.powf(pk_dual);

    // Per stopping cube: energy densities of the perturbation part, plus a
    // flag telling whether the cube is already heavy on itself.
    let mut energies: HashMap<Cube, Option<(DyadicFunction, DyadicFunction)>> = HashMap::new();
    let mut self_heavy: HashMap<Cube, bool> = HashMap::new();
    for s in &tree.cubes {
        let bt = beta_tilde
            .get(s)
            .ok_or_else(|| Error::Precondition(format!("missing perturbation part for {s}")))?;
        if bt.values().iter().all(|&v| v == 0.0) {
            energies.insert(s.clone(), None);
            self_heavy.insert(s.clone(), false);
            continue;
        }
        let m_p = dyfun::maximal(bt, grid).map(|v| v.abs().powf(p_j));
        let t_p = op.apply(bt)?.map(|v| v.abs().powf(pk_dual));
        let heavy = m_p.avg(grid, s)? >= thr_m || t_p.avg(grid, s)? >= thr_t;
        energies.insert(s.clone(), Some((m_p, t_p)));
        self_heavy.insert(s.clone(), heavy);
    }

    let absf = f.map(f64::abs);
    let mut a_cubes = Vec::new();
    let mut b_cubes = Vec::new();
    let mut c_cubes = Vec::new();
    for q in grid.all_cubes() {
        let s = tree.stopping_parent(grid, &q)?;
        let own_heavy = match energies.get(&s).expect("stopping cube present") {
            None => false,
            Some((m_p, t_p)) => m_p.avg(grid, &q)? >= thr_m || t_p.avg(grid, &q)? >= thr_t,
        };
        let stop_children: Vec<Cube> = if q.level < grid.params.l {
            grid.children_in_domain(&q).into_iter().filter(|c| tree.contains(c)).collect()
        } else {
            Vec::new()
        };
        let child_heavy = stop_children.iter().any(|c| *self_heavy.get(c).unwrap_or(&false));
        if own_heavy || child_heavy {
            a_cubes.push(q);
        } else if !stop_children.is_empty() && is_bad(grid, other_grid, goodness, &q) {
            b_cubes.push(q);
        } else if absf.avg(grid, &q)? > params.lambda {
            c_cubes.push(q);
        }
    }
    let type_a = maximal_cubes(grid, a_cubes.clone());
    let type_b = maximal_cubes(grid, b_cubes.clone());
    let type_c = maximal_cubes(grid, c_cubes.clone());
    let mut union = a_cubes;
    union.extend(b_cubes);
    union.extend(c_cubes);
    let b_union = maximal_cubes(grid, union);
    Ok(TypeClassification { type_a, type_b, type_c, b_union })
}

/// Truncation of the stopping tree at the exclusion cubes.
#[derive(Debug, Clone)]
pub struct Truncation {
    /// Stopping cubes not strictly inside an exclusion cube.
    pub s_cubes: Vec<Cube>,
    /// Good cubes not contained in any exclusion cube.
    pub g_cubes: Vec<Cube>,
    /// All cubes (good and bad) not contained in any exclusion cube.
    pub r_cubes: Vec<Cube>,
}

/// Applies the truncation and verifies the parent-coincidence property:
/// for every surviving cube and each of its children, the parent selector
/// of the truncated collection agrees with the untruncated one.
pub fn truncate(
    grid: &DyadicGrid,
    tree: &StoppingTree,
    types: &TypeClassification,
    goodness: &HashMap<Cube, bool>,
) -> Result<Truncation> {
    let contained_in_union = |q: &Cube| types.b_union.iter().any(|r| grid.contains_cube(r, q));
    let strictly_inside_union =
        |q: &Cube| types.b_union.iter().any(|r| r != q && grid.contains_cube(r, q));

    let s_cubes: Vec<Cube> =
        tree.cubes.iter().filter(|s| !strictly_inside_union(s)).cloned().collect();
    let s_set: HashSet<Cube> = s_cubes.iter().cloned().collect();
    let mut r_cubes = Vec::new();
    let mut g_cubes = Vec::new();
    for q in grid.all_cubes() {
        if contained_in_union(&q) {
            continue;
        }
        r_cubes.push(q.clone());
        if *goodness.get(&q).unwrap_or(&false) {
            g_cubes.push(q);
        }
    }

    // Parent coincidence check on the surviving cubes and their children.
    let truncated_parent = |q: &Cube| -> Result<Cube> {
        let mut cur = q.clone();
        loop {
            if s_set.contains(&cur) {
                return Ok(cur);
            }
            cur = grid
                .parent(&cur)
                .ok_or_else(|| Error::Inconsistency(format!("{q} escapes the truncated tree")))?;
        }
    };
    for q in &r_cubes {
        let mut targets = vec![q.clone()];
        if q.level < grid.params.l {
            targets.extend(grid.children_in_domain(q));
        }
        for t in targets {
            let a = tree.stopping_parent(grid, &t)?;
            let b = truncated_parent(&t)?;
            if a != b {
                return Err(Error::Inconsistency(format!(
                    "parent selectors disagree at {t}: {a} vs {b}"
                )));
            }
        }
    }
    Ok(Truncation { s_cubes, g_cubes, r_cubes })
}

/// The finished corona for one side.
pub struct CoronaData {
    pub j: u8,
    pub params: CoronaParams,
    pub sys: Arc<AccretiveSystem>,
    pub other_grid: DyadicGrid,
    pub tree: StoppingTree,
    /// The selected target function.
    pub f: DyadicFunction,
    /// ||f~ - f||_2 from the selection step.
    pub f_tilde_diff_l2: f64,
    pub beta: HashMap<Cube, Arc<DyadicFunction>>,
    pub beta_tilde: HashMap<Cube, Arc<DyadicFunction>>,
    pub goodness: HashMap<Cube, bool>,
    pub types: TypeClassification,
    pub s_cubes: Vec<Cube>,
    pub g_cubes: Vec<Cube>,
    pub r_cubes: Vec<Cube>,
    s_set: HashSet<Cube>,
    g_set: HashSet<Cube>,
}

impl CoronaData {
    pub fn grid(&self) -> &DyadicGrid {
        &self.sys.grid
    }

    pub fn is_good(&self, q: &Cube) -> bool {
        *self.goodness.get(q).unwrap_or(&false)
    }

    /// Parent selector over the untruncated stopping collection (coincides
    /// with the truncated one on all surviving cubes and their children).
    pub fn stopping_parent(&self, q: &Cube) -> Result<Cube> {
        self.tree.stopping_parent(self.grid(), q)
    }

    pub fn in_g(&self, q: &Cube) -> bool {
        self.g_set.contains(q)
    }

    pub fn in_s(&self, q: &Cube) -> bool {
        self.s_set.contains(q)
    }

    pub fn beta_of(&self, s: &Cube) -> Result<Arc<DyadicFunction>> {
        self.beta
            .get(s)
            .cloned()
            .ok_or_else(|| Error::Precondition(format!("{s} is not a stopping cube")))
    }

    pub fn b_of(&self, s: &Cube) -> Result<Arc<DyadicFunction>> {
        self.sys.b(s)
    }

    fn assigned(&self, s: &Cube, perturbed: bool) -> Result<Arc<DyadicFunction>> {
        if perturbed {
            self.beta_of(s)
        } else {
            self.b_of(s)
        }
    }

    /// True when some child of q is a (truncated) stopping cube.
    pub fn has_stopping_child(&self, q: &Cube) -> bool {
        q.level < self.grid().params.l
            && self.grid().children_in_domain(q).iter().any(|c| self.s_set.contains(c))
    }

    fn avg_pair(
        &self,
        f: &DyadicFunction,
        g: &DyadicFunction,
        q: &Cube,
    ) -> Result<(f64, f64)> {
        let grid = self.grid();
        let af = f.avg(grid, q)?;
        let ag = g.avg(grid, q)?;
        if ag.abs() < 1e-12 {
            return Err(Error::VanishingDenominator(format!(
                "accretive average vanishes on {q}"
            )));
        }
        Ok((af, ag))
    }

    /// Adds coeff times the twisted martingale difference of f at q to the
    /// accumulator. Each child uses the accretive function of its own
    /// stopping parent; `perturbed` selects the perturbed family.
    pub fn accumulate_twisted_diff(
        &self,
        acc: &mut [f64],
        f: &DyadicFunction,
        q: &Cube,
        coeff: f64,
        perturbed: bool,
    ) -> Result<()> {
        let grid = self.grid();
        let gp = &grid.params;
        if q.level >= gp.l {
            return Err(Error::Precondition(format!(
                "twisted difference needs level < L at {q}"
            )));
        }
        let sq = self.stopping_parent(q)?;
        let g_q = self.assigned(&sq, perturbed)?;
        let (af_q, ag_q) = self.avg_pair(f, &g_q, q)?;
        let ratio_q = af_q / ag_q;
        for child in grid.children_in_domain(q) {
            let sc = if self.tree.contains(&child) { child.clone() } else { sq.clone() };
            let g_c = self.assigned(&sc, perturbed)?;
            let (af_c, ag_c) = self.avg_pair(f, &g_c, &child)?;
            let ratio_c = af_c / ag_c;
            let b = grid
                .cube_box(&child)
                .clip_domain(gp.domain_ticks())
                .expect("child intersects domain");
            f.for_each_cell(&b, |i| {
                acc[i] += coeff * (ratio_c * g_c.values()[i] - ratio_q * g_q.values()[i]);
            });
        }
        Ok(())
    }

    pub fn twisted_diff(&self, f: &DyadicFunction, q: &Cube) -> Result<DyadicFunction> {
        let mut acc = vec![0.0; f.cells()];
        self.accumulate_twisted_diff(&mut acc, f, q, 1.0, true)?;
        DyadicFunction::new(f.dim(), f.resolution(), acc)
    }

    pub fn twisted_diff_b(&self, f: &DyadicFunction, q: &Cube) -> Result<DyadicFunction> {
        let mut acc = vec![0.0; f.cells()];
        self.accumulate_twisted_diff(&mut acc, f, q, 1.0, false)?;
        DyadicFunction::new(f.dim(), f.resolution(), acc)
    }

    /// Half-twisted difference: ratio increments on the children that share
    /// q's stopping parent, minus the q-level ratio on all of q; no
    /// multiplication by the accretive function.
    pub fn half_twisted_diff(
        &self,
        f: &DyadicFunction,
        q: &Cube,
        perturbed: bool,
    ) -> Result<DyadicFunction> {
        let grid = self.grid();
        let gp = &grid.params;
        if q.level >= gp.l {
            return Err(Error::Precondition(format!(
                "half-twisted difference needs level < L at {q}"
            )));
        }
        let sq = self.stopping_parent(q)?;
        let g_q = self.assigned(&sq, perturbed)?;
        let (af_q, ag_q) = self.avg_pair(f, &g_q, q)?;
        let ratio_q = af_q / ag_q;
        let mut acc = vec![0.0; f.cells()];
        let qbox = grid.cube_box(q).clip_domain(gp.domain_ticks()).expect("domain cube");
        f.for_each_cell(&qbox, |i| acc[i] -= ratio_q);
        for child in grid.children_in_domain(q) {
            if self.tree.contains(&child) {
                continue;
            }
            let (af_c, ag_c) = self.avg_pair(f, &g_q, &child)?;
            let ratio_c = af_c / ag_c;
            let b = grid
                .cube_box(&child)
                .clip_domain(gp.domain_ticks())
                .expect("child intersects domain");
            f.for_each_cell(&b, |i| acc[i] += ratio_c);
        }
        DyadicFunction::new(gp.n, gp.l, acc)
    }

    /// The constant value of the half-twisted difference at q on one of its
    /// children (children are exactly the constancy blocks).
    pub fn half_value_on_child(
        &self,
        f: &DyadicFunction,
        q: &Cube,
        child: &Cube,
        perturbed: bool,
    ) -> Result<f64> {
        let grid = self.grid();
        if grid.parent(child).as_ref() != Some(q) {
            return Err(Error::Precondition(format!("{child} is not a child of {q}")));
        }
        let sq = self.stopping_parent(q)?;
        let g_q = self.assigned(&sq, perturbed)?;
        let (af_q, ag_q) = self.avg_pair(f, &g_q, q)?;
        let ratio_q = af_q / ag_q;
        if self.tree.contains(child) {
            return Ok(-ratio_q);
        }
        let (af_c, ag_c) = self.avg_pair(f, &g_q, child)?;
        Ok(af_c / ag_c - ratio_q)
    }
}

/// Builds the full corona for side j against the other side's grid.
pub fn build_corona(
    sys: Arc<AccretiveSystem>,
    other_grid: &DyadicGrid,
    op: &DiscretizedOperator,
    f_tilde: &DyadicFunction,
    params: &CoronaParams,
    j: u8,
) -> Result<CoronaData> {
    let grid = sys.grid.clone();
    let gp = &grid.params;
    if op.n != gp.n || op.l != gp.l {
        return Err(Error::Precondition(format!(
            "operator dims ({}, {}) do not match grid dims ({}, {})",
            op.n, op.l, gp.n, gp.l
        )));
    }
    let mut goodness: HashMap<Cube, bool> = HashMap::new();
    for q in grid.all_cubes() {
        let verdict = classify_goodness(&grid, &q, other_grid);
        goodness.insert(q, verdict.good);
    }
    let (f, f_tilde_diff_l2) = select_f(&grid, other_grid, f_tilde)?;
    let tree = build_auxiliary_tree(&sys, op, params, j)?;
    let mut beta = HashMap::new();
    let mut beta_tilde = HashMap::new();
    for s in &tree.cubes {
        let (b, bt) = perturb_b(&tree, &sys, other_grid, s, Some(&goodness))?;
        beta.insert(s.clone(), Arc::new(b));
        beta_tilde.insert(s.clone(), Arc::new(bt));
    }
    let types =
        classify_types(&sys, other_grid, op, &tree, &beta_tilde, &f, params, j, Some(&goodness))?;
    let trunc = truncate(&grid, &tree, &types, &goodness)?;
    let s_set = trunc.s_cubes.iter().cloned().collect();
    let g_set = trunc.g_cubes.iter().cloned().collect();
    Ok(CoronaData {
        j,
        params: params.clone(),
        sys,
        other_grid: other_grid.clone(),
        tree,
        f,
        f_tilde_diff_l2,
        beta,
        beta_tilde,
        goodness,
        types,
        s_cubes: trunc.s_cubes,
        g_cubes: trunc.g_cubes,
        r_cubes: trunc.r_cubes,
        s_set,
        g_set,
    })
}

/// Telescoped coefficient: the constant value on q_child of the sum of
/// half-twisted differences over all ancestors of q (q included) sharing
/// the stopping parent s.
pub fn lambda_constant(
    cor: &CoronaData,
    q: &Cube,
    q_child: &Cube,
    s: &Cube,
) -> Result<f64> {
    let grid = cor.grid();
    if grid.parent(q_child).as_ref() != Some(q) {
        return Err(Error::Precondition(format!("{q_child} is not a child of {q}")));
    }
    let mut total = 0.0;
    let mut cur = q.clone();
    loop {
        if cor.stopping_parent(&cur)? == *s {
            // Locate the child of cur on the ancestry path of q_child.
            let mut on_path = q_child.clone();
            while grid.parent(&on_path).as_ref() != Some(&cur) {
                on_path = grid
                    .parent(&on_path)
                    .ok_or_else(|| Error::Inconsistency("ancestry walk escaped".into()))?;
            }
            total += cor.half_value_on_child(&cor.f, &cur, &on_path, true)?;
        } else {
            break;
        }
        match grid.parent(&cur) {
            Some(p) if grid.contains_cube(s, &p) || grid.contains_cube(&p, s) => {
                if !grid.contains_cube(s, &p) {
                    break;
                }
                cur = p;
            }
            _ => break,
        }
    }
    Ok(total)
}

/// Report of the exact representation identity.
#[derive(Debug, Clone, Serialize)]
pub struct RepresentationReport {
    pub max_cell_residual: f64,
    pub l2_rel_residual: f64,
    pub lp_residual: f64,
    /// ||phi||_p^p of the truncation remainder.
    pub phi_norm_p: f64,
    /// Reference value lambda^p |B| it is measured against.
    pub phi_bound: f64,
}

/// Recomputes the selected function from its corona expansion: top-block
/// terms over surviving top cubes, twisted differences over the good
/// surviving cubes, plus the truncation remainder, and reports residuals.
pub fn representation_check(cor: &CoronaData) -> Result<RepresentationReport> {
    let grid = cor.grid();
    let gp = &grid.params;
    let p_j = cor.params.p(cor.j);
    let f = &cor.f;
    let b_set: HashSet<&Cube> = cor.types.b_union.iter().collect();

    let mut acc = vec![0.0f64; f.cells()];
    for q in grid.cubes_at_level(gp.top_level) {
        if b_set.contains(&q) {
            continue;
        }
        let beta_q = cor.beta_of(&q)?;
        let a = f.avg(grid, &q)?;
        let b = grid.cube_box(&q).clip_domain(gp.domain_ticks()).expect("top cube");
        f.for_each_cell(&b, |i| acc[i] += a * beta_q.values()[i]);
    }
    for q in &cor.g_cubes {
        if q.level < gp.l {
            cor.accumulate_twisted_diff(&mut acc, f, q, 1.0, true)?;
        }
    }
    let mut phi = vec![0.0f64; f.cells()];
    for r in &cor.types.b_union {
        let b = grid
            .cube_box(r)
            .clip_domain(gp.domain_ticks())
            .ok_or_else(|| Error::DisjointCube(r.to_string()))?;
        if r.level == gp.top_level {
            f.for_each_cell(&b, |i| phi[i] += f.values()[i]);
        } else {
            let s = cor.stopping_parent(r)?;
            let beta_s = cor.beta_of(&s)?;
            let (af, ag) = cor.avg_pair(f, &beta_s, r)?;
            let ratio = af / ag;
            f.for_each_cell(&b, |i| phi[i] += f.values()[i] - ratio * beta_s.values()[i]);
        }
    }
    for (a, p) in acc.iter_mut().zip(&phi) {
        *a += p;
    }
    let rhs = DyadicFunction::new(gp.n, gp.l, acc)?;
    let phi_fn = DyadicFunction::new(gp.n, gp.l, phi)?;
    let residual = f.sub(&rhs)?;
    let f_l2 = f.l2_norm_sq().sqrt();
    let union_measure = cor.types.union_measure(grid);
    Ok(RepresentationReport {
        max_cell_residual: residual.linf_norm(),
        l2_rel_residual: residual.l2_norm_sq().sqrt() / f_l2.max(1e-300),
        lp_residual: residual.lq_norm(p_j),
        phi_norm_p: phi_fn.lq_norm(p_j).powf(p_j),
        phi_bound: cor.params.lambda.powf(p_j) * union_measure,
    })
}

/// Exhaustive audit of the vanishing property: every bad surviving cube
/// with no stopping child must carry identically zero twisted and
/// half-twisted differences. Returns (cubes checked, worst sup-norm).
pub fn zero_difference_report(cor: &CoronaData) -> Result<(usize, f64)> {
    let grid = cor.grid();
    let gp = &grid.params;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for q in &cor.r_cubes {
        if q.level >= gp.l || cor.is_good(q) {
            continue;
        }
        if grid.children_in_domain(q).iter().any(|c| cor.tree.contains(c)) {
            continue;
        }
        let s = cor.stopping_parent(q)?;
        let beta_s = cor.beta_of(&s)?;
        if beta_s.avg(grid, q)?.abs() < 1e-12 {
            continue;
        }
        let d = cor.twisted_diff(&cor.f, q)?;
        let h = cor.half_twisted_diff(&cor.f, q, true)?;
        worst = worst.max(d.linf_norm()).max(h.linf_norm());
        checked += 1;
    }
    Ok((checked, worst))
}

/// Measured constants of the perturbed-family estimates: normalized means
/// on the stopping cubes, energy of the perturbed functions, and the
/// average / maximal-energy / testing-energy extremes over all surviving
/// cubes (and their children) relative to their structural reference
/// levels. The reference levels carry the structural thresholds, so the
/// ratios should stay bounded and stable across resolutions.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbedFamilyReport {
    /// max_S |<beta_S>_S - 1|.
    pub worst_mean_error: f64,
    /// max_S <|beta_S|^p>_S / A^p.
    pub self_energy_ratio: f64,
    /// min over qualifying (Q,S) of <beta_S>_Q (reference floor: 1/4).
    pub min_average: f64,
    /// max over qualifying (Q,S) of <|M beta_S|^p>_Q / (A^p / delta).
    pub maximal_energy_ratio: f64,
    /// max over qualifying (Q,S) of <|T beta_S|^p'>_Q divided by
    /// (t_loc^p'/delta + upsilon1^p' tb_proxy^p').
    pub testing_energy_ratio: f64,
    /// Number of (cube, stopping parent) pairs audited.
    pub pairs_checked: usize,
}

/// Audits the perturbed family over every surviving cube and its children:
/// the analogue of the stopping-criteria bounds must persist for beta_S in
/// place of b_S, up to fixed constants.
pub fn perturbed_family_report(
    cor: &CoronaData,
    op: &DiscretizedOperator,
) -> Result<PerturbedFamilyReport> {
    let grid = cor.grid();
    let gp = &grid.params;
    let p_j = cor.params.p(cor.j);
    let pk_dual = cor.params.other_dual(cor.j);
    let a_p = cor.sys.a_const.powf(p_j);
    let max_ref = a_p / cor.params.delta;
    let test_ref = cor.tree.t_loc.powf(pk_dual) / cor.params.delta
        + (cor.params.upsilon1 * cor.params.tb_proxy).powf(pk_dual);

    let mut worst_mean_error = 0.0f64;
    let mut self_energy_ratio = 0.0f64;
    for s in &cor.s_cubes {
        let beta = cor.beta_of(s)?;
        worst_mean_error = worst_mean_error.max((beta.avg(grid, s)? - 1.0).abs());
        self_energy_ratio =
            self_energy_ratio.max(beta.map(|v| v.abs().powf(p_j)).avg(grid, s)? / a_p);
    }

    // Energy densities per stopping cube, computed lazily.
    let mut cache: HashMap<Cube, (Arc<DyadicFunction>, DyadicFunction, DyadicFunction)> =
        HashMap::new();
    let mut min_average = f64::INFINITY;
    let mut maximal_energy_ratio = 0.0f64;
    let mut testing_energy_ratio = 0.0f64;
    let mut pairs_checked = 0usize;
    let mut audit = |q: &Cube, cor: &CoronaData| -> Result<()> {
        let s = cor.stopping_parent(q)?;
        if !cor.in_s(&s) {
            return Ok(());
        }
        if !cache.contains_key(&s) {
            let beta = cor.beta_of(&s)?;
            let m_p = dyfun::maximal(&beta, grid).map(|v| v.abs().powf(p_j));
            let t_p = op.apply(&beta)?.map(|v| v.abs().powf(pk_dual));
            cache.insert(s.clone(), (beta, m_p, t_p));
        }
        let (beta, m_p, t_p) = cache.get(&s).expect("just inserted");
        min_average = min_average.min(beta.avg(grid, q)?);
        maximal_energy_ratio = maximal_energy_ratio.max(m_p.avg(grid, q)? / max_ref);
        testing_energy_ratio = testing_energy_ratio.max(t_p.avg(grid, q)? / test_ref);
        pairs_checked += 1;
        Ok(())
    };
    let mut seen: HashSet<Cube> = HashSet::new();
    for q in &cor.r_cubes {
        if seen.insert(q.clone()) {
            audit(q, cor)?;
        }
        if q.level < gp.l {
            for child in grid.children_in_domain(q) {
                if seen.insert(child.clone()) {
                    audit(&child, cor)?;
                }
            }
        }
    }
    Ok(PerturbedFamilyReport {
        worst_mean_error,
        self_energy_ratio,
        min_average,
        maximal_energy_ratio,
        testing_energy_ratio,
        pairs_checked,
    })
}

/// JSON snapshot of the corona structure: stopping cubes with fired
/// criteria, the type collections, and headline scalars.
pub fn export_json(cor: &CoronaData) -> serde_json::Value {
    let tree: Vec<serde_json::Value> = cor
        .tree
        .cubes
        .iter()
        .map(|c| {
            let info = &cor.tree.info[c];
            serde_json::json!({
                "cube": c.to_string(),
                "parent": info.parent,
                "criteria": info.criteria,
                "terminal": info.terminal,
                "survives_truncation": cor.in_s(c),
            })
        })
        .collect();
    serde_json::json!({
        "side": cor.j,
        "t_loc": cor.tree.t_loc,
        "f_tilde_diff_l2": cor.f_tilde_diff_l2,
        "stopping_cubes": tree,
        "type_a": cor.types.type_a.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "type_b": cor.types.type_b.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "type_c": cor.types.type_c.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "excluded_union": cor.types.b_union.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
        "good_cube_count": cor.g_cubes.len(),
        "surviving_cube_count": cor.r_cubes.len(),
        "warnings": cor.tree.warnings,
    })
}

/// Writes the JSON snapshot plus the perturbed functions to a directory.
pub fn save_corona(cor: &CoronaData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("corona.json"),
        serde_json::to_string_pretty(&export_json(cor))?,
    )?;
    for (s, beta) in &cor.beta {
        let name = format!(
            "beta_g{}_k{}_i{}.bin",
            s.grid_id,
            s.level,
            s.idx.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("_")
        );
        beta.save(&dir.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::czop::DiscretizedOperator;
    use crate::grid::GridParams;

    fn setup(l: u32, seed: u64) -> (DyadicGrid, DyadicGrid) {
        let p = GridParams::new(1, l, 0, 1.0, 2).unwrap();
        let g1 = DyadicGrid::new_random(p.clone(), 1, seed);
        let g2 = DyadicGrid::new_random(p, 2, seed.wrapping_add(1));
        (g1, g2)
    }

    fn trivial_corona(l: u32, seed: u64) -> CoronaData {
        let (g1, g2) = setup(l, seed);
        let sys = Arc::new(AccretiveSystem::trivial(&g1, 2.0).unwrap());
        let op = DiscretizedOperator::zero(1, l);
        let params = CoronaParams::new(1, 2.0, 2.0, 0.25, 0.95, 1.5, 0.05, 1.0).unwrap();
        let f_tilde = DyadicFunction::from_fn(1, l, |c| if c[0] % 2 == 0 { 1.0 } else { -1.0 });
        build_corona(sys, &g2, &op, &f_tilde, &params, 1).unwrap()
    }

    #[test]
    fn trivial_system_tree_is_roots_only() {
        let cor = trivial_corona(6, 7);
        let top = cor.grid().cubes_at_level(0).len();
        assert_eq!(cor.tree.cubes.len(), top);
        assert!(cor.tree.cubes.iter().all(|c| c.level == 0));
        // No exclusions: averages of f are bounded by 1 < lambda and the
        // perturbation parts vanish nowhere relevant... Type B needs a
        // stopping child below the top, so the union can only be empty.
        assert!(cor.types.b_union.is_empty());
        assert_eq!(cor.s_cubes.len(), cor.tree.cubes.len());
    }

    #[test]
    fn forced_low_average_triggers_stopping() {
        let (g1, g2) = setup(6, 3);
        let sys = AccretiveSystem::trivial(&g1, 2.0).unwrap();
        // Overwrite the top cube's function: average 0.4 on one child cube,
        // compensated on the rest so the overall mean stays at 1.
        let top = g1.cubes_at_level(0)[0].clone();
        let tb = g1.cube_box(&top).clip_domain(g1.params.domain_ticks()).unwrap();
        let child = g1.children_in_domain(&top)[0].clone();
        let cb = g1.cube_box(&child).clip_domain(g1.params.domain_ticks()).unwrap();
        let zero = DyadicFunction::zero(1, 6);
        let total = tb.volume_cells() as f64;
        let child_cells = cb.volume_cells() as f64;
        let lift = 1.0 + 0.6 * child_cells / (total - child_cells);
        let mut vals = vec![0.0; zero.cells()];
        zero.for_each_cell(&tb, |i| vals[i] = lift);
        zero.for_each_cell(&cb, |i| vals[i] = 0.4);
        sys.inject(top.clone(), DyadicFunction::new(1, 6, vals).unwrap());
        let op = DiscretizedOperator::zero(1, 6);
        let params = CoronaParams::new(1, 2.0, 2.0, 0.25, 0.95, 1.5, 0.05, 1.0).unwrap();
        let tree = build_auxiliary_tree(&sys, &op, &params, 1).unwrap();
        let fired: Vec<&Cube> = tree
            .cubes
            .iter()
            .filter(|c| tree.info[*c].criteria.iter().any(|s| s == "mean-below-half"))
            .collect();
        assert!(!fired.is_empty(), "low-average region must create a stopping cube");
        let _ = g2;
    }

    #[test]
    fn perturbed_mean_is_preserved_and_no_bad_cubes_means_identity() {
        let (g1, _g2) = setup(6, 11);
        // Same grid on both sides would still have boundary-touching bad
        // cubes; instead judge goodness against a copy of the same shifts,
        // then only ancestor-boundary contacts can be bad. Use the real
        // second grid for the main assertion below.
        let cor = trivial_corona(6, 11);
        for s in &cor.tree.cubes {
            let beta = cor.beta_of(s).unwrap();
            let m = measure(cor.grid(), s);
            assert!((beta.integral(cor.grid(), s) - m).abs() <= 1e-9 * m);
        }
        let _ = g1;
    }

    #[test]
    fn trivial_corona_twisted_equals_classical() {
        let cor = trivial_corona(6, 5);
        let grid = cor.grid().clone();
        let f = DyadicFunction::random_uniform(1, 6, 99, 1);
        for q in grid.all_cubes() {
            if q.level >= 6 {
                continue;
            }
            let tw = cor.twisted_diff(&f, &q).unwrap();
            let cl = dyfun::martingale_diff(&f, &grid, &q).unwrap();
            let diff = tw.sub(&cl).unwrap().linf_norm();
            assert!(diff <= 1e-12, "twisted vs classical at {q}: {diff}");
        }
    }

    #[test]
    fn trivial_representation_is_exact() {
        let cor = trivial_corona(7, 13);
        let rep = representation_check(&cor).unwrap();
        assert!(rep.max_cell_residual <= 1e-10, "residual {}", rep.max_cell_residual);
        assert!(rep.l2_rel_residual <= 1e-10);
    }

    #[test]
    fn lambda_constant_matches_telescoping_oracle() {
        let cor = trivial_corona(7, 17);
        let grid = cor.grid().clone();
        // Trivial system: the telescoped coefficient on a child is
        // <f>_child - <f>_S where S is the stopping parent block.
        for q in cor.g_cubes.clone() {
            if q.level >= 6 {
                continue;
            }
            let s = cor.stopping_parent(&q).unwrap();
            for child in grid.children_in_domain(&q) {
                let lam = lambda_constant(&cor, &q, &child, &s).unwrap();
                let oracle =
                    cor.f.avg(&grid, &child).unwrap() - cor.f.avg(&grid, &s).unwrap();
                assert!((lam - oracle).abs() <= 1e-10, "at {q} child {child}");
            }
        }
    }

    #[test]
    fn type_c_fires_when_cap_is_below_averages() {
        let (g1, g2) = setup(6, 23);
        let sys = Arc::new(AccretiveSystem::trivial(&g1, 2.0).unwrap());
        let op = DiscretizedOperator::zero(1, 6);
        // lambda must exceed 1 by type; use 1.0001 and a witness of size 2.
        let params = CoronaParams::new(1, 2.0, 2.0, 0.25, 0.95, 1.0001, 0.05, 1.0).unwrap();
        let f_tilde = DyadicFunction::constant(1, 6, 2.0);
        let cor = build_corona(sys, &g2, &op, &f_tilde, &params, 1).unwrap();
        assert!(
            !cor.types.type_c.is_empty(),
            "averages 2 > cap 1.0001 must force Type C exclusions"
        );
        assert!(cor.types.type_c.iter().all(|c| c.level == 0));
        let _ = g1;
    }
}
