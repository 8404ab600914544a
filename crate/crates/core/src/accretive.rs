//! Systems of p-accretive test functions {b_Q}: supp b_Q inside Q,
//! integral of b_Q over Q equal to |Q| (truncated measure on the bounded
//! domain), and ||b_Q||_p <= A |Q|^(1/p). Real-valued only; accretivity is
//! realized through the mean normalization, not positivity.

use crate::dyfun::DyadicFunction;
use crate::error::{Error, Result};
use crate::grid::{Cube, DyadicGrid, TickBox};
use crate::seed;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone)]
enum Generator {
    /// b_Q = 1_Q.
    Trivial,
    /// b_Q = 1_Q (1 + a h_Q) with h_Q a seeded mean-zero sign pattern on
    /// Q's descendants at `depth` levels below Q (None: down to the cells).
    Oscillatory { amplitude: f64, depth: Option<u32>, seed: u64 },
    /// Externally supplied functions only; missing cubes are errors.
    External,
}

pub struct AccretiveSystem {
    pub grid: DyadicGrid,
    pub p: f64,
    /// Declared accretivity constant A.
    pub a_const: f64,
    gen: Generator,
    /// Memoized per-cube functions; single evaluation per cube.
    cache: Mutex<HashMap<Cube, Arc<DyadicFunction>>>,
}

impl AccretiveSystem {
    pub fn trivial(grid: &DyadicGrid, p: f64) -> Result<Self> {
        check_exponent(p)?;
        Ok(AccretiveSystem {
            grid: grid.clone(),
            p,
            a_const: 1.0 + 1e-9,
            gen: Generator::Trivial,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn oscillatory(
        grid: &DyadicGrid,
        p: f64,
        a_const: f64,
        amplitude: f64,
        depth: Option<u32>,
        seed: u64,
    ) -> Result<Self> {
        check_exponent(p)?;
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::Config(format!(
                "oscillation amplitude {} outside [0,1); accretivity margin lost",
                amplitude
            )));
        }
        if a_const < 1.0 + amplitude {
            return Err(Error::Config(format!(
                "declared A={} below the construction bound 1+a={}",
                a_const,
                1.0 + amplitude
            )));
        }
        Ok(AccretiveSystem {
            grid: grid.clone(),
            p,
            a_const,
            gen: Generator::Oscillatory { amplitude, depth, seed },
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// The test function assigned to `cube`, generated once and memoized.
    pub fn b(&self, cube: &Cube) -> Result<Arc<DyadicFunction>> {
        if let Some(f) = self.cache.lock().unwrap().get(cube) {
            return Ok(f.clone());
        }
        let f = Arc::new(self.generate(cube)?);
        self.cache
            .lock()
            .unwrap()
            .entry(cube.clone())
            .or_insert_with(|| f.clone());
        Ok(f)
    }

    /// Test hook: force a specific function for one cube (bypasses the
    /// generator; used to inject violations).
    pub fn inject(&self, cube: Cube, f: DyadicFunction) {
        self.cache.lock().unwrap().insert(cube, Arc::new(f));
    }

    fn generate(&self, cube: &Cube) -> Result<DyadicFunction> {
        let params = &self.grid.params;
        let b = self
            .grid
            .cube_box(cube)
            .clip_domain(params.domain_ticks())
            .ok_or_else(|| Error::DisjointCube(cube.to_string()))?;
        match &self.gen {
            Generator::Trivial => Ok(indicator_box(params.n, params.l, &b)),
            Generator::Oscillatory { amplitude, depth, seed } => {
                Ok(self.oscillatory_b(cube, &b, *amplitude, *depth, *seed))
            }
            Generator::External => Err(Error::Config(format!(
                "external system has no function for cube {}",
                cube
            ))),
        }
    }

    fn oscillatory_b(
        &self,
        cube: &Cube,
        covered: &TickBox,
        amplitude: f64,
        depth: Option<u32>,
        seed: u64,
    ) -> DyadicFunction {
        let params = &self.grid.params;
        let pattern_level = match depth {
            Some(d) => (cube.level + d).min(params.l),
            None => params.l,
        };
        let mut tags = vec![
            seed::tag::SYSTEM_CUBE,
            cube.grid_id as u64,
            cube.level as u64,
        ];
        tags.extend(cube.idx.iter().map(|&i| i as u64));
        let mut rng = seed::stream(seed, &tags);

        // Covered descendant cells grouped by descendant-cube volume; signs
        // cancel pairwise within equal-volume groups so the mean is exactly
        // zero. Leftover odd members get sign 0.
        let mut cells = vec![0.0f64; 1usize << (params.l * params.n)];
        let probe = DyadicFunction::zero(params.n, params.l);
        let side = params.side_ticks(pattern_level);
        let sh = self.grid.shift_ticks(pattern_level);
        let lo: Vec<i64> = covered
            .lo
            .iter()
            .zip(sh)
            .map(|(&x, &s)| (x - s).div_euclid(side))
            .collect();
        let hi: Vec<i64> = covered
            .hi
            .iter()
            .zip(sh)
            .map(|(&x, &s)| (x - 1 - s).div_euclid(side))
            .collect();
        let mut groups: HashMap<i64, Vec<TickBox>> = HashMap::new();
        crate::grid::for_each_index(&lo, &hi, |idx| {
            let blo: Vec<i64> = idx.iter().zip(sh).map(|(&i, &s)| i * side + s).collect();
            let bhi: Vec<i64> = blo.iter().map(|&a| a + side).collect();
            let cell_box = TickBox { lo: blo, hi: bhi };
            // Clip to the covered part of the cube.
            let clo: Vec<i64> = cell_box.lo.iter().zip(&covered.lo).map(|(&a, &b)| a.max(b)).collect();
            let chi: Vec<i64> = cell_box.hi.iter().zip(&covered.hi).map(|(&a, &b)| a.min(b)).collect();
            if clo.iter().zip(&chi).all(|(a, b)| a < b) {
                let bb = TickBox { lo: clo, hi: chi };
                groups.entry(bb.volume_cells()).or_default().push(bb);
            }
        });
        use rand::Rng;
        let mut keys: Vec<i64> = groups.keys().copied().collect();
        keys.sort_unstable();
        for k in keys {
            let members = &groups[&k];
            for pair in members.chunks(2) {
                if pair.len() == 2 {
                    let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    probe.for_each_cell(&pair[0], |i| cells[i] = s);
                    probe.for_each_cell(&pair[1], |i| cells[i] = -s);
                }
            }
        }
        let mut values = vec![0.0f64; cells.len()];
        probe.for_each_cell(covered, |i| values[i] = 1.0 + amplitude * cells[i]);
        DyadicFunction::new(params.n, params.l, values).expect("finite")
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::Config(format!("exponent p={} outside (1, infinity)", p)));
    }
    Ok(())
}

fn indicator_box(n: u32, l: u32, b: &TickBox) -> DyadicFunction {
    let mut values = vec![0.0f64; 1usize << (l * n)];
    let probe = DyadicFunction::zero(n, l);
    probe.for_each_cell(b, |i| values[i] = 1.0);
    DyadicFunction::new(n, l, values).expect("finite")
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationFailure {
    pub cube: String,
    pub condition: String,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub cubes_checked: usize,
    /// Worst |mean - 1| over checked cubes (relative mean slack).
    pub worst_mean_slack: f64,
    /// Worst ||b_Q||_p / (A |Q|^{1/p}) over checked cubes.
    pub worst_norm_ratio: f64,
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks both accretivity conditions for every cube of the owning grid.
pub fn validate_system(sys: &AccretiveSystem) -> Result<ValidationReport> {
    let grid = &sys.grid;
    let params = &grid.params;
    let mut worst_mean = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut failures = Vec::new();
    let mut checked = 0usize;
    for cube in grid.all_cubes() {
        let b = sys.b(&cube)?;
        let covered = grid
            .cube_box(&cube)
            .clip_domain(params.domain_ticks())
            .expect("domain cubes");
        let measure = covered.volume_cells() as f64 * b.cell_volume();
        // Support check: zero outside the covered box.
        let mut inside_mask = vec![false; b.cells()];
        b.for_each_cell(&covered, |i| inside_mask[i] = true);
        let escaped = b
            .values()
            .iter()
            .zip(&inside_mask)
            .any(|(&v, &inside)| !inside && v != 0.0);
        if escaped {
            failures.push(ValidationFailure {
                cube: cube.to_string(),
                condition: "support inside Q".into(),
                measured: 1.0,
                bound: 0.0,
            });
        }
        let mean = b.box_sum(&covered) / covered.volume_cells() as f64;
        let mean_slack = (mean - 1.0).abs();
        worst_mean = worst_mean.max(mean_slack);
        if mean_slack > 1e-9 {
            failures.push(ValidationFailure {
                cube: cube.to_string(),
                condition: "mean equals 1".into(),
                measured: mean,
                bound: 1.0,
            });
        }
        let mut norm_pp = 0.0;
        b.for_each_cell(&covered, |i| norm_pp += b.values()[i].abs().powf(sys.p));
        let norm = (norm_pp * b.cell_volume()).powf(1.0 / sys.p);
        let bound = sys.a_const * measure.powf(1.0 / sys.p);
        worst_norm = worst_norm.max(norm / bound);
        if norm > bound * (1.0 + 1e-12) {
            failures.push(ValidationFailure {
                cube: cube.to_string(),
                condition: "L^p bound".into(),
                measured: norm,
                bound,
            });
        }
        checked += 1;
    }
    Ok(ValidationReport {
        cubes_checked: checked,
        worst_mean_slack: worst_mean,
        worst_norm_ratio: worst_norm,
        failures,
    })
}

/// The stopping lower-bound mechanism: E_S is the union of maximal
/// descendants Q of S with <b_S>_Q < 1/2; returns (|S \ E_S|, the
/// guaranteed lower bound (2A)^(-p') |S|).
pub fn residual_lower_bound(sys: &AccretiveSystem, s: &Cube) -> Result<(f64, f64)> {
    let grid = &sys.grid;
    let b = sys.b(s)?;
    let measure_s = b.cube_measure(grid, s);
    let mut e_measure = 0.0;
    let mut stack: Vec<Cube> = vec![s.clone()];
    while let Some(q) = stack.pop() {
        if &q != s {
            let avg = b.avg(grid, &q)?;
            if avg < 0.5 {
                e_measure += b.cube_measure(grid, &q);
                continue;
            }
        }
        if q.level < grid.params.l {
            stack.extend(grid.children_in_domain(&q));
        }
    }
    let p_dual = sys.p / (sys.p - 1.0);
    let bound = (2.0 * sys.a_const).powf(-p_dual) * measure_s;
    Ok((measure_s - e_measure, bound))
}

/// Serializes the per-cube functions of `cubes` to `dir`, one binary file
/// plus sidecar per cube, with a JSON manifest {p, A}.
pub fn save_system(sys: &AccretiveSystem, cubes: &[Cube], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({ "p": sys.p, "A": sys.a_const });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for cube in cubes {
        let f = sys.b(cube)?;
        f.save(&dir.join(cube_file_name(cube)))?;
    }
    Ok(())
}

/// Ingests an externally supplied system: a directory of serialized
/// functions named by cube id plus manifest.json with {p, A}. Functions are
/// available only for the cubes present in the directory.
pub fn load_system(grid: &DyadicGrid, dir: &Path) -> Result<AccretiveSystem> {
    #[derive(Deserialize)]
    struct Manifest {
        p: f64,
        #[serde(rename = "A")]
        a: f64,
    }
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    check_exponent(manifest.p)?;
    let sys = AccretiveSystem {
        grid: grid.clone(),
        p: manifest.p,
        a_const: manifest.a,
        gen: Generator::External,
        cache: Mutex::new(HashMap::new()),
    };
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(cube) = parse_cube_file_name(name) {
            let f = DyadicFunction::load(&path)?;
            sys.inject(cube, f);
        }
    }
    Ok(sys)
}

fn cube_file_name(cube: &Cube) -> String {
    let idx: Vec<String> = cube.idx.iter().map(|i| i.to_string()).collect();
    format!("b_g{}_k{}_i{}.bin", cube.grid_id, cube.level, idx.join("_"))
}

fn parse_cube_file_name(name: &str) -> Option<Cube> {
    let stem = name.strip_suffix(".bin")?;
    let rest = stem.strip_prefix("b_g")?;
    let (gid, rest) = rest.split_once("_k")?;
    let (level, idx_str) = rest.split_once("_i")?;
    let idx: Option<Vec<i64>> = idx_str.split('_').map(|s| s.parse().ok()).collect();
    Some(Cube {
        grid_id: gid.parse().ok()?,
        level: level.parse().ok()?,
        idx: idx?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridParams;

    fn grid(seed: u64) -> DyadicGrid {
        let p = GridParams::new(1, 6, 0, 1.0, 3).unwrap();
        DyadicGrid::new_random(p, 1, seed)
    }

    #[test]
    fn trivial_system_validates() {
        let g = grid(1);
        let sys = AccretiveSystem::trivial(&g, 2.0).unwrap();
        for q in g.all_cubes() {
            let b = sys.b(&q).unwrap();
            assert!((b.avg(&g, &q).unwrap() - 1.0).abs() < 1e-15);
            let m = b.cube_measure(&g, &q);
            assert!((b.lq_norm(2.0) - m.sqrt()).abs() < 1e-12);
        }
        let rep = validate_system(&sys).unwrap();
        assert!(rep.passed());
        assert!(rep.worst_mean_slack < 1e-15);
    }

    #[test]
    fn oscillatory_mean_exact_and_bounded() {
        for seed in 0..3u64 {
            let g = grid(seed);
            let sys = AccretiveSystem::oscillatory(&g, 2.0, 1.5, 0.5, Some(2), seed).unwrap();
            for q in g.all_cubes() {
                let b = sys.b(&q).unwrap();
                assert!((b.avg(&g, &q).unwrap() - 1.0).abs() < 1e-12, "mean off at {}", q);
                // descendant averages stay within [1-a, 1+a]
                let mut stack = vec![q.clone()];
                while let Some(d) = stack.pop() {
                    let a = b.avg(&g, &d).unwrap();
                    assert!((0.5 - 1e-12..=1.5 + 1e-12).contains(&a), "avg {} at {}", a, d);
                    if d.level < 6 {
                        stack.extend(g.children_in_domain(&d));
                    }
                }
            }
            let rep = validate_system(&sys).unwrap();
            assert!(rep.passed(), "failures: {:?}", rep.failures);
        }
    }

    #[test]
    fn zero_amplitude_equals_trivial() {
        let g = grid(4);
        let osc = AccretiveSystem::oscillatory(&g, 2.0, 1.0, 0.0, Some(2), 0).unwrap();
        let triv = AccretiveSystem::trivial(&g, 2.0).unwrap();
        for q in g.all_cubes() {
            let a = osc.b(&q).unwrap();
            let b = triv.b(&q).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn amplitude_one_rejected() {
        let g = grid(0);
        assert!(AccretiveSystem::oscillatory(&g, 2.0, 2.0, 1.0, Some(2), 0).is_err());
    }

    #[test]
    fn injected_violation_detected() {
        let g = grid(2);
        let sys = AccretiveSystem::trivial(&g, 2.0).unwrap();
        let q = Cube { grid_id: 1, level: 2, idx: g.cubes_at_level(2)[1].idx.clone() };
        let bad = crate::dyfun::indicator(&g, &q).scale(0.9);
        sys.inject(q.clone(), bad);
        let rep = validate_system(&sys).unwrap();
        assert!(!rep.passed());
        assert!(rep.failures.iter().any(|f| f.cube == q.to_string() && f.condition.contains("mean")));
    }

    #[test]
    fn residual_lower_bound_holds() {
        for seed in 0..3u64 {
            let g = grid(seed + 10);
            let sys = AccretiveSystem::oscillatory(&g, 2.0, 1.5, 0.5, None, seed).unwrap();
            for s in g.all_cubes() {
                let (residual, bound) = residual_lower_bound(&sys, &s).unwrap();
                assert!(residual >= bound - 1e-12, "cube {}: {} < {}", s, residual, bound);
            }
        }
    }

    #[test]
    fn system_roundtrip_through_directory() {
        let g = grid(3);
        let sys = AccretiveSystem::oscillatory(&g, 2.0, 1.5, 0.25, Some(2), 1).unwrap();
        let cubes: Vec<Cube> = g.cubes_at_level(1);
        let dir = std::env::temp_dir().join("czkit_sys_test");
        let _ = std::fs::remove_dir_all(&dir);
        save_system(&sys, &cubes, &dir).unwrap();
        let loaded = load_system(&g, &dir).unwrap();
        assert_eq!(loaded.p, 2.0);
        assert_eq!(loaded.a_const, 1.5);
        for q in &cubes {
            assert_eq!(loaded.b(q).unwrap().values(), sys.b(q).unwrap().values());
        }
        // cubes not in the directory are errors
        let missing = g.cubes_at_level(3)[0].clone();
        assert!(loaded.b(&missing).is_err());
    }
}
