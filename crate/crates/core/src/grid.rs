//! Random shifted dyadic grids with exact integer geometry.
//!
//! All coordinates are measured in "ticks": integer multiples of 2^-L where L
//! is the resolution. The base domain is [0, 2^L)^n in ticks. A grid is
//! defined by per-level binary offsets omega_j in {0,1}^n for levels
//! j = top_level+1 ..= L; the cumulative shift at level k is
//! sum_{j>k} 2^{L-j} omega_j, always an integer number of ticks, so every
//! cube of every grid is a union of standard finest cells.

use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub n: u32,
    pub l: u32,
    pub top_level: u32,
    pub eta: f64,
    pub r: u32,
    pub epsilon: f64,
}

impl GridParams {
    /// Default constructor: epsilon = eta / (2 (eta + n)).
    pub fn new(n: u32, l: u32, top_level: u32, eta: f64, r: u32) -> Result<Self> {
        let epsilon = eta / (2.0 * (eta + n as f64));
        Self::with_epsilon(n, l, top_level, eta, r, epsilon)
    }

    pub fn with_epsilon(n: u32, l: u32, top_level: u32, eta: f64, r: u32, epsilon: f64) -> Result<Self> {
        let p = GridParams { n, l, top_level, eta, r, epsilon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > 3 {
            return Err(Error::Config(format!("dimension n={} outside 1..=3", self.n)));
        }
        if self.l == 0 || self.l > 24 {
            return Err(Error::Config(format!("resolution L={} outside 1..=24", self.l)));
        }
        if self.l <= self.top_level {
            return Err(Error::Config(format!(
                "resolution L={} must exceed top_level={}",
                self.l, self.top_level
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta={} must be positive", self.eta)));
        }
        if self.r == 0 {
            return Err(Error::Config("separation parameter r must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::Config(format!("epsilon={} outside (0, 1/2]", self.epsilon)));
        }
        if self.l <= self.top_level + self.r {
            return Err(Error::Config(format!(
                "L={} must exceed top_level+r={} for a nontrivial good/bad split",
                self.l,
                self.top_level + self.r
            )));
        }
        Ok(())
    }

    /// Soft conditions assumed by the estimates but not required to run.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if (self.r as f64) < 3.0 / self.epsilon {
            w.push(format!(
                "r={} is below 3/epsilon={:.1}; decay estimates assume larger separation",
                self.r,
                3.0 / self.epsilon
            ));
        }
        w
    }

    /// Side length of a level-k cube in ticks.
    pub fn side_ticks(&self, level: u32) -> i64 {
        debug_assert!(level <= self.l);
        1i64 << (self.l - level)
    }

    /// Domain extent per axis in ticks.
    pub fn domain_ticks(&self) -> i64 {
        1i64 << self.l
    }

    /// Number of finest cells in the base domain.
    pub fn cell_count(&self) -> usize {
        1usize << (self.l * self.n)
    }

    /// Volume of one finest cell (domain units).
    pub fn cell_volume(&self) -> f64 {
        (2.0f64).powi(-((self.l * self.n) as i32))
    }
}

/// A dyadic cube: grid it belongs to, level (side 2^-level), and index vector.
/// The lower corner in ticks is idx * side_ticks + shift_ticks(level).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cube {
    pub grid_id: u8,
    pub level: u32,
    pub idx: Vec<i64>,
}

impl std::fmt::Display for Cube {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "g{}:k{}:{:?}", self.grid_id, self.level, self.idx)
    }
}

/// Axis-aligned half-open box in ticks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TickBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl TickBox {
    pub fn dim(&self) -> u32 {
        self.lo.len() as u32
    }

    /// Intersection with [0, domain)^n; None if empty.
    pub fn clip_domain(&self, domain: i64) -> Option<TickBox> {
        let lo: Vec<i64> = self.lo.iter().map(|&a| a.max(0)).collect();
        let hi: Vec<i64> = self.hi.iter().map(|&b| b.min(domain)).collect();
        if lo.iter().zip(&hi).all(|(a, b)| a < b) {
            Some(TickBox { lo, hi })
        } else {
            None
        }
    }

    pub fn volume_cells(&self) -> i64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a).max(0))
            .product()
    }

    pub fn contains_box(&self, other: &TickBox) -> bool {
        self.lo.iter().zip(&other.lo).all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a >= b)
    }

    pub fn intersects(&self, other: &TickBox) -> bool {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .all(|((a, b), (c, d))| a.max(c) < b.min(d))
    }

    /// Concentric dilation by an odd integer factor (3Q etc.).
    pub fn dilate(&self, factor: i64) -> TickBox {
        debug_assert!(factor >= 1 && factor % 2 == 1);
        let k = (factor - 1) / 2;
        let lo = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a - k * (b - a))
            .collect();
        let hi = self
            .hi
            .iter()
            .zip(&self.lo)
            .map(|(b, a)| b + k * (b - a))
            .collect();
        TickBox { lo, hi }
    }
}

/// Visits every integer index vector in the inclusive box [lo, hi].
pub fn for_each_index(lo: &[i64], hi: &[i64], mut f: impl FnMut(&[i64])) {
    let n = lo.len();
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return;
    }
    let mut cur: Vec<i64> = lo.to_vec();
    loop {
        f(&cur);
        let mut axis = n;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            if cur[axis] < hi[axis] {
                cur[axis] += 1;
                for a in axis + 1..n {
                    cur[a] = lo[a];
                }
                break;
            }
        }
    }
}

/// Sup-norm distance from the closure of box q to the boundary of box p,
/// in half-ticks (exact; half-ticks because cube centers live there).
///
/// Uses the signed inside-distance phi(x) = min_i min(x_i - pa_i, pb_i - x_i),
/// whose absolute value is the sup-norm distance from x to the boundary.
/// The inf over the closed box q is 0 when phi changes sign or vanishes,
/// otherwise min phi (q inside p) or -max phi (q outside p).
pub fn dist_to_boundary_half_ticks(q: &TickBox, p: &TickBox) -> Result<i64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch(q.dim(), p.dim()));
    }
    let mut min_phi = i64::MAX;
    let mut max_phi = i64::MAX;
    for a in 0..q.lo.len() {
        let (qa, qb) = (2 * q.lo[a], 2 * q.hi[a]);
        let (pa, pb) = (2 * p.lo[a], 2 * p.hi[a]);
        let g = |x: i64| (x - pa).min(pb - x);
        let g_min = g(qa).min(g(qb));
        let center = (pa + pb) / 2;
        let g_max = g(center.clamp(qa, qb));
        min_phi = min_phi.min(g_min);
        max_phi = max_phi.min(g_max);
    }
    Ok(if min_phi <= 0 && max_phi >= 0 {
        0
    } else if min_phi > 0 {
        min_phi
    } else {
        -max_phi
    })
}

/// An exact dyadic rational num / 2^log_den.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyadicRational {
    pub num: i64,
    pub log_den: u32,
}

impl DyadicRational {
    pub fn normalized(mut self) -> Self {
        while self.num != 0 && self.num % 2 == 0 && self.log_den > 0 {
            self.num /= 2;
            self.log_den -= 1;
        }
        if self.num == 0 {
            self.log_den = 0;
        }
        self
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 * (2.0f64).powi(-(self.log_den as i32))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub params: GridParams,
    pub id: u8,
    /// omegas[j - top_level - 1][axis] for j = top_level+1 ..= L.
    omegas: Vec<Vec<u8>>,
    /// Cumulative shift in ticks per level k = top_level ..= L.
    cum: Vec<Vec<i64>>,
}

impl DyadicGrid {
    pub fn new_random(params: GridParams, id: u8, seed: u64) -> Self {
        let mut rng = seed::stream(seed, &[seed::tag::GRID, id as u64]);
        let n = params.n as usize;
        let omegas: Vec<Vec<u8>> = (params.top_level + 1..=params.l)
            .map(|_| (0..n).map(|_| rng.gen_range(0..=1u8)).collect())
            .collect();
        Self::from_omegas(params, id, omegas).expect("generated omegas are valid")
    }

    pub fn zero_shift(params: GridParams, id: u8) -> Self {
        let n = params.n as usize;
        let omegas = vec![vec![0u8; n]; (params.l - params.top_level) as usize];
        Self::from_omegas(params, id, omegas).expect("zero omegas are valid")
    }

    pub fn from_omegas(params: GridParams, id: u8, omegas: Vec<Vec<u8>>) -> Result<Self> {
        params.validate()?;
        let levels = (params.l - params.top_level) as usize;
        if omegas.len() != levels {
            return Err(Error::Config(format!(
                "expected {} omega vectors, got {}",
                levels,
                omegas.len()
            )));
        }
        for w in &omegas {
            if w.len() != params.n as usize || w.iter().any(|&b| b > 1) {
                return Err(Error::Config("omega entries must be 0/1 vectors of length n".into()));
            }
        }
        let mut cum = vec![vec![0i64; params.n as usize]; levels + 1];
        // cum[k - top_level] = sum over j in k+1..=L of 2^(L-j) omega_j.
        for k in (params.top_level..params.l).rev() {
            let slot = (k - params.top_level) as usize;
            let w = &omegas[slot]; // omega_{k+1}
            let scale = 1i64 << (params.l - (k + 1));
            for a in 0..params.n as usize {
                cum[slot][a] = cum[slot + 1][a] + scale * w[a] as i64;
            }
        }
        Ok(DyadicGrid { params, id, omegas, cum })
    }

    pub fn omega(&self, j: u32) -> &[u8] {
        debug_assert!(j > self.params.top_level && j <= self.params.l);
        &self.omegas[(j - self.params.top_level - 1) as usize]
    }

    pub fn omegas(&self) -> &[Vec<u8>] {
        &self.omegas
    }

    pub fn shift_ticks(&self, level: u32) -> &[i64] {
        debug_assert!(level >= self.params.top_level && level <= self.params.l);
        &self.cum[(level - self.params.top_level) as usize]
    }

    pub fn cube_box(&self, cube: &Cube) -> TickBox {
        debug_assert_eq!(cube.grid_id, self.id);
        let side = self.params.side_ticks(cube.level);
        let sh = self.shift_ticks(cube.level);
        let lo: Vec<i64> = cube.idx.iter().zip(sh).map(|(&i, &s)| i * side + s).collect();
        let hi: Vec<i64> = lo.iter().map(|&a| a + side).collect();
        TickBox { lo, hi }
    }

    /// Inclusive index range of level-k cubes intersecting the base domain.
    pub fn index_range(&self, level: u32) -> (Vec<i64>, Vec<i64>) {
        let side = self.params.side_ticks(level);
        let sh = self.shift_ticks(level);
        let domain = self.params.domain_ticks();
        let lo: Vec<i64> = sh.iter().map(|&s| if s > 0 { -1 } else { 0 }).collect();
        let hi: Vec<i64> = sh.iter().map(|&s| (domain - 1 - s).div_euclid(side)).collect();
        (lo, hi)
    }

    /// All level-k cubes intersecting the base domain.
    pub fn cubes_at_level(&self, level: u32) -> Vec<Cube> {
        let (lo, hi) = self.index_range(level);
        let mut out = Vec::new();
        for_each_index(&lo, &hi, |idx| {
            out.push(Cube { grid_id: self.id, level, idx: idx.to_vec() })
        });
        out
    }

    /// All cubes intersecting the base domain, coarsest level first.
    pub fn all_cubes(&self) -> Vec<Cube> {
        (self.params.top_level..=self.params.l)
            .flat_map(|k| self.cubes_at_level(k))
            .collect()
    }

    /// The 2^n dyadic children (some may lie outside the base domain).
    pub fn children(&self, cube: &Cube) -> Vec<Cube> {
        debug_assert!(cube.level < self.params.l);
        let w = self.omega(cube.level + 1);
        let n = self.params.n as usize;
        let mut out = Vec::with_capacity(1 << n);
        let lo = vec![0i64; n];
        let hi = vec![1i64; n];
        for_each_index(&lo, &hi, |c| {
            let idx: Vec<i64> = (0..n).map(|a| 2 * cube.idx[a] + w[a] as i64 + c[a]).collect();
            out.push(Cube { grid_id: self.id, level: cube.level + 1, idx });
        });
        out
    }

    /// Children whose intersection with the base domain is nonempty.
    pub fn children_in_domain(&self, cube: &Cube) -> Vec<Cube> {
        let domain = self.params.domain_ticks();
        self.children(cube)
            .into_iter()
            .filter(|c| self.cube_box(c).clip_domain(domain).is_some())
            .collect()
    }

    pub fn parent(&self, cube: &Cube) -> Option<Cube> {
        if cube.level <= self.params.top_level {
            return None;
        }
        let w = self.omega(cube.level);
        let idx: Vec<i64> = cube
            .idx
            .iter()
            .zip(w)
            .map(|(&i, &b)| (i - b as i64).div_euclid(2))
            .collect();
        Some(Cube { grid_id: self.id, level: cube.level - 1, idx })
    }

    /// The unique level-k cube containing the given point (in ticks).
    pub fn cube_containing(&self, level: u32, point: &[i64]) -> Cube {
        let side = self.params.side_ticks(level);
        let sh = self.shift_ticks(level);
        let idx: Vec<i64> = point
            .iter()
            .zip(sh)
            .map(|(&x, &s)| (x - s).div_euclid(side))
            .collect();
        Cube { grid_id: self.id, level, idx }
    }

    /// Geometric containment Q' subset of Q for cubes of this grid.
    pub fn contains_cube(&self, outer: &Cube, inner: &Cube) -> bool {
        outer.level <= inner.level && self.cube_box(outer).contains_box(&self.cube_box(inner))
    }

    pub fn intersects_domain(&self, cube: &Cube) -> bool {
        self.cube_box(cube).clip_domain(self.params.domain_ticks()).is_some()
    }
}

/// Exact sup-norm distance from cube Q to the boundary of cube P, as a
/// dyadic rational in domain units. The grids may differ but must share
/// dimension and resolution.
pub fn dist_to_boundary(
    gq: &DyadicGrid,
    q: &Cube,
    gp: &DyadicGrid,
    p: &Cube,
) -> Result<DyadicRational> {
    if gq.params.n != gp.params.n {
        return Err(Error::DimensionMismatch(gq.params.n, gp.params.n));
    }
    let ht = dist_to_boundary_half_ticks(&gq.cube_box(q), &gp.cube_box(p))?;
    Ok(DyadicRational { num: ht, log_den: gq.params.l + 1 }.normalized())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoodnessVerdict {
    pub cube: Cube,
    pub good: bool,
    pub witness: Option<Cube>,
    /// Coarsest level enumerated for potential witnesses (the domain-scale
    /// cap; larger cubes are not searched).
    pub cap_level: u32,
}

/// Badness separation threshold (lQ)^eps (lP)^(1-eps), in half-ticks.
pub fn badness_threshold_half_ticks(params: &GridParams, level_q: u32, level_p: u32) -> f64 {
    let e = params.epsilon;
    ((params.l + 1) as f64 - e * level_q as f64 - (1.0 - e) * level_p as f64).exp2()
}

/// Classifies Q in its grid against the other grid: Q is bad iff some cube P
/// of the other grid with side at least 2^r times larger (capped at the
/// domain scale) has dist(Q, boundary P) <= (lQ)^eps (lP)^(1-eps).
/// Candidate P range over the full shifted lattice, not only the domain.
pub fn classify_goodness(grid_q: &DyadicGrid, q: &Cube, other: &DyadicGrid) -> GoodnessVerdict {
    let params = &grid_q.params;
    debug_assert_eq!(other.params.n, params.n);
    debug_assert_eq!(other.params.l, params.l);
    let cap_level = params.top_level;
    let qbox = grid_q.cube_box(q);
    if q.level < cap_level + params.r {
        return GoodnessVerdict { cube: q.clone(), good: true, witness: None, cap_level };
    }
    for level_p in cap_level..=(q.level - params.r) {
        let thr = badness_threshold_half_ticks(params, q.level, level_p);
        let side = params.side_ticks(level_p);
        let sh = other.shift_ticks(level_p);
        // Any violating P must have its closure within thr of Q.
        let pad = (thr / 2.0).ceil() as i64 + 1;
        let lo: Vec<i64> = (0..params.n as usize)
            .map(|a| (qbox.lo[a] - pad - sh[a]).div_euclid(side) - 1)
            .collect();
        let hi: Vec<i64> = (0..params.n as usize)
            .map(|a| (qbox.hi[a] + pad - sh[a]).div_euclid(side) + 1)
            .collect();
        let mut witness = None;
        for_each_index(&lo, &hi, |idx| {
            if witness.is_some() {
                return;
            }
            let p = Cube { grid_id: other.id, level: level_p, idx: idx.to_vec() };
            let d = dist_to_boundary_half_ticks(&qbox, &other.cube_box(&p))
                .expect("dimensions match");
            if (d as f64) <= thr {
                witness = Some(p);
            }
        });
        if let Some(p) = witness {
            return GoodnessVerdict { cube: q.clone(), good: false, witness: Some(p), cap_level };
        }
    }
    GoodnessVerdict { cube: q.clone(), good: true, witness: None, cap_level }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiBadEstimate {
    pub level: u32,
    pub r: u32,
    pub trials: u64,
    pub bad: u64,
    pub estimate: f64,
    pub ci95: f64,
}

/// Monte Carlo estimate of the probability (over the other grid's shifts)
/// that a fixed cube of the given level is bad. The probed cube is the
/// level-k cube of grid 1 containing the domain center; by translation
/// invariance of the lattice quantifier the position does not matter.
pub fn estimate_pi_bad(
    level: u32,
    params: &GridParams,
    trials: u64,
    master_seed: u64,
) -> Result<PiBadEstimate> {
    if trials < 100 {
        return Err(Error::Config(format!("trials={} below minimum 100", trials)));
    }
    if level < params.top_level || level > params.l {
        return Err(Error::Config(format!("level={} outside grid range", level)));
    }
    let grid1 = DyadicGrid::new_random(*params, 1, seed::derive(master_seed, &[seed::tag::GRID, 1]));
    let center = vec![params.domain_ticks() / 2; params.n as usize];
    let q = grid1.cube_containing(level, &center);
    let mut bad = 0u64;
    for t in 0..trials {
        let grid2 = DyadicGrid::new_random(
            *params,
            2,
            seed::derive(master_seed, &[seed::tag::PI_BAD_TRIAL, t]),
        );
        if !classify_goodness(&grid1, &q, &grid2).good {
            bad += 1;
        }
    }
    let p = bad as f64 / trials as f64;
    let ci95 = 1.96 * (p * (1.0 - p) / trials as f64).sqrt();
    Ok(PiBadEstimate { level, r: params.r, trials, bad, estimate: p, ci95 })
}
