//! Dyadic functions: piecewise constant on the 2^(Ln) finest cells of the
//! base domain [0,1)^n. Box sums use a summed-area table, so averages over
//! arbitrary tick-aligned boxes (cubes of either grid, translated cubes,
//! dilations) cost O(2^n) each.

use crate::error::{Error, Result};
use crate::grid::{for_each_index, Cube, DyadicGrid, GridParams, TickBox};
use crate::seed;
use once_cell::sync::OnceCell;
use rand::Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct DyadicFunction {
    n: u32,
    l: u32,
    values: Vec<f64>,
    sat: OnceCell<Vec<f64>>,
}

impl DyadicFunction {
    pub fn new(n: u32, l: u32, values: Vec<f64>) -> Result<Self> {
        let cells = 1usize << (l * n);
        if values.len() != cells {
            return Err(Error::Config(format!(
                "value array has {} entries, expected {}",
                values.len(),
                cells
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite function value".into()));
        }
        Ok(DyadicFunction { n, l, values, sat: OnceCell::new() })
    }

    pub fn zero(n: u32, l: u32) -> Self {
        let cells = 1usize << (l * n);
        DyadicFunction { n, l, values: vec![0.0; cells], sat: OnceCell::new() }
    }

    pub fn constant(n: u32, l: u32, c: f64) -> Self {
        let cells = 1usize << (l * n);
        DyadicFunction { n, l, values: vec![c; cells], sat: OnceCell::new() }
    }

    pub fn from_fn(n: u32, l: u32, mut f: impl FnMut(&[i64]) -> f64) -> Self {
        let m = 1i64 << l;
        let lo = vec![0i64; n as usize];
        let hi = vec![m - 1; n as usize];
        let mut values = Vec::with_capacity(1usize << (l * n));
        for_each_index(&lo, &hi, |c| values.push(f(c)));
        DyadicFunction { n, l, values, sat: OnceCell::new() }
    }

    pub fn random_uniform(n: u32, l: u32, master_seed: u64, tag: u64) -> Self {
        let mut rng = seed::stream(master_seed, &[seed::tag::TEST_FUNCTION, tag]);
        let cells = 1usize << (l * n);
        let values = (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DyadicFunction { n, l, values, sat: OnceCell::new() }
    }

    pub fn dim(&self) -> u32 {
        self.n
    }

    pub fn resolution(&self) -> u32 {
        self.l
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn cell_volume(&self) -> f64 {
        (2.0f64).powi(-((self.l * self.n) as i32))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_index(&self, coords: &[i64]) -> usize {
        let m = 1usize << self.l;
        let mut idx = 0usize;
        for &c in coords {
            debug_assert!(c >= 0 && (c as usize) < m);
            idx = idx * m + c as usize;
        }
        idx
    }

    pub fn value_at(&self, coords: &[i64]) -> f64 {
        self.values[self.cell_index(coords)]
    }

    pub fn compatible(&self, other: &DyadicFunction) -> Result<()> {
        if self.n != other.n || self.l != other.l {
            return Err(Error::Config(format!(
                "incompatible functions: (n={}, L={}) vs (n={}, L={})",
                self.n, self.l, other.n, other.l
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DyadicFunction {
        DyadicFunction {
            n: self.n,
            l: self.l,
            values: self.values.iter().map(|&v| f(v)).collect(),
            sat: OnceCell::new(),
        }
    }

    pub fn zip_with(&self, other: &DyadicFunction, f: impl Fn(f64, f64) -> f64) -> Result<DyadicFunction> {
        self.compatible(other)?;
        Ok(DyadicFunction {
            n: self.n,
            l: self.l,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            sat: OnceCell::new(),
        })
    }

    pub fn add(&self, other: &DyadicFunction) -> Result<DyadicFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DyadicFunction) -> Result<DyadicFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> DyadicFunction {
        self.map(|v| c * v)
    }

    fn sat(&self) -> &[f64] {
        self.sat.get_or_init(|| {
            let n = self.n as usize;
            let m = 1usize << self.l;
            let dim = m + 1;
            let size = dim.pow(n as u32);
            let mut sat = vec![0.0f64; size];
            // Scatter values at coordinates offset by 1 on each axis.
            let lo = vec![0i64; n];
            let hi = vec![m as i64 - 1; n];
            let mut src = 0usize;
            for_each_index(&lo, &hi, |c| {
                let mut idx = 0usize;
                for &x in c {
                    idx = idx * dim + (x as usize + 1);
                }
                sat[idx] = self.values[src];
                src += 1;
            });
            // Cumulative sum along each axis.
            for axis in 0..n {
                let stride = dim.pow((n - 1 - axis) as u32);
                let outer = size / (dim * stride);
                for o in 0..outer {
                    for inner in 0..stride {
                        let base = (o * dim) * stride + inner;
                        for i in 1..dim {
                            sat[base + i * stride] += sat[base + (i - 1) * stride];
                        }
                    }
                }
            }
            sat
        })
    }

    /// Exact sum of values over a box already clipped to the domain.
    pub fn box_sum(&self, b: &TickBox) -> f64 {
        debug_assert_eq!(b.dim(), self.n);
        let n = self.n as usize;
        let m = 1usize << self.l;
        let dim = m + 1;
        let sat = self.sat();
        let mut total = 0.0;
        let corners = 1usize << n;
        for mask in 0..corners {
            let mut idx = 0usize;
            let mut sign = 1.0f64;
            for (a, (&lo, &hi)) in b.lo.iter().zip(&b.hi).enumerate() {
                let x = if mask & (1 << a) != 0 {
                    hi as usize
                } else {
                    sign = -sign;
                    lo as usize
                };
                idx = idx * dim + x;
            }
            total += sign * sat[idx];
        }
        total
    }

    /// Mean of values over the covered cells of a box (clipped to domain).
    pub fn avg_box(&self, b: &TickBox) -> Result<f64> {
        let domain = 1i64 << self.l;
        let clipped = b
            .clip_domain(domain)
            .ok_or_else(|| Error::DisjointCube(format!("{:?}", b)))?;
        Ok(self.box_sum(&clipped) / clipped.volume_cells() as f64)
    }

    /// <f>_Q: exact mean over the covered cells of the cube.
    pub fn avg(&self, grid: &DyadicGrid, cube: &Cube) -> Result<f64> {
        self.avg_box(&grid.cube_box(cube))
    }

    /// Covered measure |Q intersect domain| in domain units.
    pub fn cube_measure(&self, grid: &DyadicGrid, cube: &Cube) -> f64 {
        let domain = 1i64 << self.l;
        grid.cube_box(cube)
            .clip_domain(domain)
            .map(|b| b.volume_cells() as f64 * self.cell_volume())
            .unwrap_or(0.0)
    }

    /// Integral of f over the covered cells of the cube.
    pub fn integral(&self, grid: &DyadicGrid, cube: &Cube) -> f64 {
        let domain = 1i64 << self.l;
        grid.cube_box(cube)
            .clip_domain(domain)
            .map(|b| self.box_sum(&b) * self.cell_volume())
            .unwrap_or(0.0)
    }

    /// L^q norm (exact cell-sum quadrature), q >= 1.
    pub fn lq_norm(&self, q: f64) -> f64 {
        debug_assert!(q >= 1.0);
        let s: f64 = self.values.iter().map(|v| v.abs().powf(q)).sum();
        (s * self.cell_volume()).powf(1.0 / q)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// <f, g> = integral of f g.
    pub fn inner(&self, other: &DyadicFunction) -> Result<f64> {
        self.compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.cell_volume())
    }

    /// Visits the flat index of every cell in a box already inside the domain.
    pub fn for_each_cell(&self, b: &TickBox, mut f: impl FnMut(usize)) {
        let hi: Vec<i64> = b.hi.iter().map(|&x| x - 1).collect();
        for_each_index(&b.lo, &hi, |c| f(self.cell_index(c)));
    }

    /// Writes the flat binary64 array (little-endian, row-major) to `path`
    /// and a JSON sidecar `{n, L, domain}` to `path` + ".json".
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let sidecar = serde_json::json!({
            "n": self.n,
            "L": self.l,
            "domain": "[0,1)^n",
        });
        let side_path = sidecar_path(path);
        std::fs::write(side_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let n = side["n"].as_u64().ok_or_else(|| Error::Config("sidecar missing n".into()))? as u32;
        let l = side["L"].as_u64().ok_or_else(|| Error::Config("sidecar missing L".into()))? as u32;
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() % 8 != 0 {
            return Err(Error::Config("binary payload is not a multiple of 8 bytes".into()));
        }
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n, l, values)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Indicator of Q intersected with the domain.
pub fn indicator(grid: &DyadicGrid, cube: &Cube) -> DyadicFunction {
    let p = &grid.params;
    let mut f = DyadicFunction::zero(p.n, p.l);
    if let Some(b) = grid.cube_box(cube).clip_domain(p.domain_ticks()) {
        let mut vals = f.values;
        let probe = DyadicFunction::zero(p.n, p.l);
        probe.for_each_cell(&b, |i| vals[i] = 1.0);
        f = DyadicFunction { n: p.n, l: p.l, values: vals, sat: OnceCell::new() };
    }
    f
}

/// Adds coeff * D_Q f to the accumulator (covered cells only).
/// D_Q f = sum over children Q' of (<f>_Q' - <f>_Q) 1_Q'.
pub fn accumulate_martingale_diff(
    acc: &mut [f64],
    f: &DyadicFunction,
    grid: &DyadicGrid,
    cube: &Cube,
    coeff: f64,
) -> Result<()> {
    if cube.level >= grid.params.l {
        return Err(Error::Precondition(format!(
            "martingale difference needs level < L, got {} at {}",
            cube.level, cube
        )));
    }
    let a_q = f.avg(grid, cube)?;
    let domain = grid.params.domain_ticks();
    for child in grid.children_in_domain(cube) {
        let b = grid.cube_box(&child).clip_domain(domain).expect("child intersects domain");
        let a_c = f.box_sum(&b) / b.volume_cells() as f64;
        f.for_each_cell(&b, |i| acc[i] += coeff * (a_c - a_q));
    }
    Ok(())
}

/// The classical martingale difference D_Q f as a standalone function.
pub fn martingale_diff(f: &DyadicFunction, grid: &DyadicGrid, cube: &Cube) -> Result<DyadicFunction> {
    let mut acc = vec![0.0; f.cells()];
    accumulate_martingale_diff(&mut acc, f, grid, cube, 1.0)?;
    DyadicFunction::new(f.dim(), f.resolution(), acc)
}

/// Top part: sum over top-level cubes of <f>_Q 1_Q.
pub fn top_part(f: &DyadicFunction, grid: &DyadicGrid) -> DyadicFunction {
    let p = &grid.params;
    let mut acc = vec![0.0; f.cells()];
    for q in grid.cubes_at_level(p.top_level) {
        let b = grid.cube_box(&q).clip_domain(p.domain_ticks()).expect("top cubes cover domain");
        let a = f.box_sum(&b) / b.volume_cells() as f64;
        f.for_each_cell(&b, |i| acc[i] += a);
    }
    DyadicFunction::new(p.n, p.l, acc).expect("finite")
}

/// Transform sum over the given cubes: sum of eps_Q D_Q f.
pub fn sign_transform(
    f: &DyadicFunction,
    grid: &DyadicGrid,
    signs: &HashMap<Cube, f64>,
) -> Result<DyadicFunction> {
    let mut acc = vec![0.0; f.cells()];
    for (q, &eps) in signs {
        accumulate_martingale_diff(&mut acc, f, grid, q, eps)?;
    }
    DyadicFunction::new(f.dim(), f.resolution(), acc)
}

/// P_bad f: sum of D_Q f over bad cubes Q of grid_j (levels top..L-1),
/// goodness judged against grid_k.
pub fn project_bad(
    f: &DyadicFunction,
    grid_j: &DyadicGrid,
    grid_k: &DyadicGrid,
) -> Result<DyadicFunction> {
    let p = &grid_j.params;
    let mut acc = vec![0.0; f.cells()];
    for k in p.top_level..p.l {
        for q in grid_j.cubes_at_level(k) {
            if !crate::grid::classify_goodness(grid_j, &q, grid_k).good {
                accumulate_martingale_diff(&mut acc, f, grid_j, &q, 1.0)?;
            }
        }
    }
    DyadicFunction::new(p.n, p.l, acc)
}

/// P_good f: complementary projection over good cubes.
pub fn project_good(
    f: &DyadicFunction,
    grid_j: &DyadicGrid,
    grid_k: &DyadicGrid,
) -> Result<DyadicFunction> {
    let p = &grid_j.params;
    let mut acc = vec![0.0; f.cells()];
    for k in p.top_level..p.l {
        for q in grid_j.cubes_at_level(k) {
            if crate::grid::classify_goodness(grid_j, &q, grid_k).good {
                accumulate_martingale_diff(&mut acc, f, grid_j, &q, 1.0)?;
            }
        }
    }
    DyadicFunction::new(p.n, p.l, acc)
}

/// Shifted-dyadic surrogate maximal function: at each cell, the sup of
/// |<f>_B| over all boxes B of the one-third-trick family covering the cell.
/// The family at level k consists of every level-k lattice box of the grid
/// together with its unit translates, i.e. all boxes idx*side + shift with
/// idx one step beyond the domain range; this majorizes |f| pointwise
/// because level L boxes are the cells themselves.
pub fn maximal(f: &DyadicFunction, grid: &DyadicGrid) -> DyadicFunction {
    let p = &grid.params;
    let domain = p.domain_ticks();
    let mut out = vec![0.0f64; f.cells()];
    for k in p.top_level..=p.l {
        let (lo0, hi0) = grid.index_range(k);
        let lo: Vec<i64> = lo0.iter().map(|&a| a - 1).collect();
        let hi: Vec<i64> = hi0.iter().map(|&b| b + 1).collect();
        let side = p.side_ticks(k);
        let sh = grid.shift_ticks(k);
        for_each_index(&lo, &hi, |idx| {
            let blo: Vec<i64> = idx.iter().zip(sh).map(|(&i, &s)| i * side + s).collect();
            let bhi: Vec<i64> = blo.iter().map(|&a| a + side).collect();
            if let Some(b) = (TickBox { lo: blo, hi: bhi }).clip_domain(domain) {
                let a = (f.box_sum(&b) / b.volume_cells() as f64).abs();
                f.for_each_cell(&b, |i| {
                    if a > out[i] {
                        out[i] = a;
                    }
                });
            }
        });
    }
    DyadicFunction::new(p.n, p.l, out).expect("finite")
}

/// Dyadic BMO norm: max over cubes of <|f - <f>_Q|>_Q.
pub fn bmo_norm(f: &DyadicFunction, grid: &DyadicGrid) -> f64 {
    let p = &grid.params;
    let domain = p.domain_ticks();
    let mut worst = 0.0f64;
    for q in grid.all_cubes() {
        let b = grid.cube_box(&q).clip_domain(domain).expect("domain cubes");
        let a = f.box_sum(&b) / b.volume_cells() as f64;
        let mut osc = 0.0;
        f.for_each_cell(&b, |i| osc += (f.values()[i] - a).abs());
        worst = worst.max(osc / b.volume_cells() as f64);
    }
    worst
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProjectionReport {
    pub q: f64,
    pub level: u32,
    pub r: u32,
    pub trials: u64,
    pub input_norm_qq: f64,
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub ci95: f64,
}

/// Bad-projection decay harness. The probe function phi is a fixed
/// single-level martingale field (all its Haar energy at `level`), built
/// before any grid-2 shifts are drawn; each trial resamples grid 2 and
/// records ||P_bad phi||_q^q / ||phi||_q^q. For q=2, orthogonality makes the
/// trial mean an unbiased estimator of pi_bad at `level`.
pub fn test_bad_projection_decay(
    q: f64,
    level: u32,
    params: &GridParams,
    trials: u64,
    master_seed: u64,
) -> Result<ProjectionReport> {
    if q <= 1.0 {
        return Err(Error::Config(format!("exponent q={} must exceed 1", q)));
    }
    if level >= params.l {
        return Err(Error::Config("probe level must be below L".into()));
    }
    let grid1 =
        DyadicGrid::new_random(*params, 1, seed::derive(master_seed, &[seed::tag::GRID, 1]));
    let psi = DyadicFunction::random_uniform(params.n, params.l, master_seed, 0);
    let mut acc = vec![0.0; psi.cells()];
    for cube in grid1.cubes_at_level(level) {
        accumulate_martingale_diff(&mut acc, &psi, &grid1, &cube, 1.0)?;
    }
    let phi = DyadicFunction::new(params.n, params.l, acc)?;
    let input_qq = phi.lq_norm(q).powf(q);
    if input_qq <= 0.0 {
        return Err(Error::Degenerate("probe function has zero norm".into()));
    }
    let mut ratios = Vec::with_capacity(trials as usize);
    for t in 0..trials {
        let grid2 = DyadicGrid::new_random(
            *params,
            2,
            seed::derive(master_seed, &[seed::tag::PROJECTION, t]),
        );
        let pb = project_bad(&phi, &grid1, &grid2)?;
        ratios.push(pb.lq_norm(q).powf(q) / input_qq);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let var = ratios.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
        / (ratios.len().saturating_sub(1)).max(1) as f64;
    let ci95 = 1.96 * (var / ratios.len() as f64).sqrt();
    Ok(ProjectionReport {
        q,
        level,
        r: params.r,
        trials,
        input_norm_qq: input_qq,
        ratios,
        mean_ratio: mean,
        ci95,
    })
}
