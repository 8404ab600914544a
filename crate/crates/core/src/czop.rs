//! Calderon-Zygmund kernels and their discretization: dense cell-to-cell
//! matrices via midpoint quadrature with a zeroed diagonal (principal value
//! surrogate), empirical kernel constants, testing constants, operator norm
//! estimation, witness pair construction, and the Hardy inequality check.

use crate::dyfun::DyadicFunction;
use crate::error::{Error, Result};
use crate::grid::{for_each_index, TickBox};
use crate::seed;
use rand::Rng;
use serde::Serialize;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Clone)]
pub struct Kernel {
    pub name: String,
    pub n: u32,
    pub eta: f64,
    eval: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
}

impl Kernel {
    pub fn new(
        name: impl Into<String>,
        n: u32,
        eta: f64,
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Kernel { name: name.into(), n, eta, eval: Arc::new(eval) }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.eval)(x, y)
    }
}

/// K(x,y) = c / (x - y) on the line; eta = 1.
pub fn hilbert_kernel(scale: f64) -> Kernel {
    Kernel::new(format!("hilbert({})", scale), 1, 1.0, move |x, y| scale / (x[0] - y[0]))
}

pub fn zero_kernel(n: u32) -> Kernel {
    Kernel::new("zero", n, 1.0, |_, _| 0.0)
}

/// K(x,y) = psi(|x-y|) / |x-y|^n with a smooth compactly supported bump psi.
pub fn bump_kernel(n: u32) -> Kernel {
    Kernel::new("bump", n, 1.0, move |x, y| {
        let d = dist(x, y);
        if d <= 0.0 || d >= 1.0 {
            return 0.0;
        }
        let psi = (-1.0 / (1.0 - d * d)).exp() * std::f64::consts::E;
        psi / d.powi(n as i32)
    })
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelConstants {
    pub c_size: f64,
    pub c_smooth: f64,
    pub size_samples: u64,
    pub smooth_samples: u64,
}

/// Smallest empirical constants over a random sample: the sup of
/// |K(x,y)| |x-y|^n and of the Hoelder smoothness ratio for |x-x'| < |x-y|/2.
/// Measured, never pass/fail against 1.
pub fn validate_kernel(k: &Kernel, samples: u64, master_seed: u64) -> KernelConstants {
    let mut rng = seed::stream(master_seed, &[seed::tag::KERNEL_SAMPLES]);
    let n = k.n as usize;
    let mut c_size = 0.0f64;
    let mut c_smooth = 0.0f64;
    let point = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    };
    for _ in 0..samples {
        let x = point(&mut rng);
        let y = point(&mut rng);
        let d = dist(&x, &y);
        if d <= 1e-9 {
            continue;
        }
        c_size = c_size.max(k.eval(&x, &y).abs() * d.powi(k.n as i32));
        // Perturb x toward a fraction of |x-y| along a random direction.
        let step = rng.gen_range(0.01..0.499) * d;
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dist(&dir, &vec![0.0; n]);
        if norm <= 1e-12 {
            continue;
        }
        let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, u)| a + u / norm * step).collect();
        let dd = dist(&x, &xp);
        if dd <= 1e-12 || dd >= d / 2.0 {
            continue;
        }
        let num = (k.eval(&x, &y) - k.eval(&xp, &y)).abs()
            + (k.eval(&y, &x) - k.eval(&y, &xp)).abs();
        c_smooth = c_smooth.max(num * d.powf(k.n as f64 + k.eta) / dd.powf(k.eta));
    }
    KernelConstants { c_size, c_smooth, size_samples: samples, smooth_samples: samples }
}

/// Dense discretization of T f(x) = integral K(x,y) f(y) dy at resolution L:
/// matrix[i][j] = K(center_i, center_j) for i != j, diagonal zero.
#[derive(Clone)]
pub struct DiscretizedOperator {
    pub n: u32,
    pub l: u32,
    pub kernel_name: String,
    matrix: Vec<f64>,
}

impl DiscretizedOperator {
    pub fn from_kernel(k: &Kernel, l: u32) -> Result<Self> {
        let n = k.n;
        if (n == 1 && l > 12) || (n >= 2 && l > 6) {
            return Err(Error::Config(format!(
                "dense operator at n={}, L={} exceeds the desk-scale cap",
                n, l
            )));
        }
        let m = 1usize << (l * n);
        let centers = cell_centers(n, l);
        let mut matrix = vec![0.0f64; m * m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    matrix[i * m + j] = k.eval(&centers[i], &centers[j]);
                }
            }
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("kernel produced non-finite matrix entries".into()));
        }
        Ok(DiscretizedOperator { n, l, kernel_name: k.name.clone(), matrix })
    }

    pub fn zero(n: u32, l: u32) -> Self {
        let m = 1usize << (l * n);
        DiscretizedOperator { n, l, kernel_name: "zero".into(), matrix: vec![0.0; m * m] }
    }

    pub fn size(&self) -> usize {
        1usize << (self.l * self.n)
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size() + j]
    }

    pub fn cell_volume(&self) -> f64 {
        (2.0f64).powi(-((self.l * self.n) as i32))
    }

    pub fn is_antisymmetric(&self) -> bool {
        let m = self.size();
        (0..m).all(|i| (0..m).all(|j| self.matrix[i * m + j] == -self.matrix[j * m + i]))
    }

    pub fn transpose(&self) -> DiscretizedOperator {
        let m = self.size();
        let mut t = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                t[j * m + i] = self.matrix[i * m + j];
            }
        }
        DiscretizedOperator {
            n: self.n,
            l: self.l,
            kernel_name: format!("{}^T", self.kernel_name),
            matrix: t,
        }
    }

    /// (T f)(cell i) = sum_{j != i} M[i,j] f(j) cellvolume.
    pub fn apply(&self, f: &DyadicFunction) -> Result<DyadicFunction> {
        if f.dim() != self.n || f.resolution() != self.l {
            return Err(Error::Config(format!(
                "operator (n={}, L={}) applied to function (n={}, L={})",
                self.n,
                self.l,
                f.dim(),
                f.resolution()
            )));
        }
        let m = self.size();
        let cv = self.cell_volume();
        let vals = f.values();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.matrix[i * m..(i + 1) * m];
            out[i] = row.iter().zip(vals).map(|(a, b)| a * b).sum::<f64>() * cv;
        }
        DyadicFunction::new(self.n, self.l, out)
    }

    /// <T f, g>.
    pub fn bilinear(&self, f: &DyadicFunction, g: &DyadicFunction) -> Result<f64> {
        self.apply(f)?.inner(g)
    }

    /// Binary matrix cache: row-major f64 little-endian plus a JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.matrix.len() * 8);
        for v in &self.matrix {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let header = serde_json::json!({
            "kernel": self.kernel_name,
            "n": self.n,
            "L": self.l,
        });
        let mut hp = path.as_os_str().to_owned();
        hp.push(".json");
        std::fs::write(hp, serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut hp = path.as_os_str().to_owned();
        hp.push(".json");
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(std::path::PathBuf::from(hp))?)?;
        let n = header["n"].as_u64().ok_or_else(|| Error::Config("header missing n".into()))? as u32;
        let l = header["L"].as_u64().ok_or_else(|| Error::Config("header missing L".into()))? as u32;
        let kernel_name = header["kernel"].as_str().unwrap_or("unknown").to_string();
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let matrix: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = 1usize << (l * n);
        if matrix.len() != m * m {
            return Err(Error::Config(format!(
                "matrix payload has {} entries, expected {}",
                matrix.len(),
                m * m
            )));
        }
        Ok(DiscretizedOperator { n, l, kernel_name, matrix })
    }
}

/// Centers of the finest cells, row-major order matching DyadicFunction.
pub fn cell_centers(n: u32, l: u32) -> Vec<Vec<f64>> {
    let m = 1i64 << l;
    let h = (2.0f64).powi(-(l as i32));
    let lo = vec![0i64; n as usize];
    let hi = vec![m - 1; n as usize];
    let mut out = Vec::with_capacity(1usize << (l * n));
    for_each_index(&lo, &hi, |c| {
        out.push(c.iter().map(|&x| (x as f64 + 0.5) * h).collect());
    });
    out
}

/// Empirical local testing constant: max over cubes Q of the owning grid of
/// (<|T b_Q|^{p'}>_Q)^{1/p'}. The adjoint variant takes the transposed matrix.
pub fn testing_constant(
    op: &DiscretizedOperator,
    sys: &crate::accretive::AccretiveSystem,
    p_dual: f64,
) -> Result<f64> {
    let grid = &sys.grid;
    let domain = grid.params.domain_ticks();
    let mut worst = 0.0f64;
    for q in grid.all_cubes() {
        let b = sys.b(&q)?;
        let tb = op.apply(&b)?;
        let covered = grid.cube_box(&q).clip_domain(domain).expect("domain cube");
        let mut s = 0.0;
        tb.for_each_cell(&covered, |i| s += tb.values()[i].abs().powf(p_dual));
        let avg = s / covered.volume_cells() as f64;
        worst = worst.max(avg.powf(1.0 / p_dual));
    }
    Ok(worst)
}

/// Largest singular value of the discretized operator acting on L^2, via
/// power iteration on M^T M, to 1e-6 relative.
pub fn estimate_opnorm(op: &DiscretizedOperator, master_seed: u64) -> f64 {
    let m = op.size();
    let mut rng = seed::stream(master_seed, &[seed::tag::OPNORM]);
    let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut sigma_prev = 0.0f64;
    for _ in 0..20_000 {
        // w = M v, u = M^T w
        let mut w = vec![0.0; m];
        for i in 0..m {
            w[i] = (0..m).map(|j| op.entry(i, j) * v[j]).sum();
        }
        let mut u = vec![0.0; m];
        for j in 0..m {
            u[j] = (0..m).map(|i| op.entry(i, j) * w[i]).sum();
        }
        let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_u == 0.0 {
            return 0.0;
        }
        let sigma = {
            let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (norm_u / norm_v).sqrt()
        };
        for x in u.iter_mut() {
            *x /= norm_u;
        }
        v = u;
        if (sigma - sigma_prev).abs() <= 1e-7 * sigma.max(1e-300) {
            return sigma * op.cell_volume();
        }
        sigma_prev = sigma;
    }
    sigma_prev * op.cell_volume()
}

/// Witness pair on the box Q0: f1 = 1_{Q0}, f2 = sign(T f1) 1_{Q0} with
/// sign(0) := +1, so <T f1, f2> = || 1_{Q0} T 1_{Q0} ||_{L^1}.
pub fn witness_pair(
    op: &DiscretizedOperator,
    q0: &TickBox,
) -> Result<(DyadicFunction, DyadicFunction)> {
    let domain = 1i64 << op.l;
    let covered = q0
        .clip_domain(domain)
        .ok_or_else(|| Error::DisjointCube(format!("{:?}", q0)))?;
    let mut ind = vec![0.0f64; op.size()];
    let probe = DyadicFunction::zero(op.n, op.l);
    probe.for_each_cell(&covered, |i| ind[i] = 1.0);
    let f1 = DyadicFunction::new(op.n, op.l, ind)?;
    let tf1 = op.apply(&f1)?;
    let mut f2_vals = vec![0.0f64; op.size()];
    probe.for_each_cell(&covered, |i| {
        f2_vals[i] = if tf1.values()[i] < 0.0 { -1.0 } else { 1.0 };
    });
    let f2 = DyadicFunction::new(op.n, op.l, f2_vals)?;
    Ok((f1, f2))
}

/// Hardy inequality instrument: for g1 supported on Q and g2 on kappa Q
/// minus Q, returns the ratio of the double integral of
/// |g1(y) g2(x)| / |x-y|^n over the pair of regions to ||g1||_p ||g2||_{p'}.
pub fn hardy_check(
    q: &TickBox,
    kappa: i64,
    p: f64,
    g1: &DyadicFunction,
    g2: &DyadicFunction,
) -> Result<f64> {
    g1.compatible(g2)?;
    let n = g1.dim();
    let l = g1.resolution();
    let domain = 1i64 << l;
    let inner = q
        .clip_domain(domain)
        .ok_or_else(|| Error::DisjointCube(format!("{:?}", q)))?;
    let ring_outer = q.dilate(kappa);
    let ring_outer = ring_outer
        .clip_domain(domain)
        .ok_or_else(|| Error::DisjointCube("dilated cube misses the domain".into()))?;
    let norm1 = g1.lq_norm(p);
    let p_dual = p / (p - 1.0);
    let norm2 = g2.lq_norm(p_dual);
    if norm1 <= 0.0 || norm2 <= 0.0 {
        return Err(Error::Degenerate("hardy check requires nonzero g1, g2".into()));
    }
    // Support preconditions.
    let mut in_inner = vec![false; g1.cells()];
    g1.for_each_cell(&inner, |i| in_inner[i] = true);
    for (i, &v) in g1.values().iter().enumerate() {
        if v != 0.0 && !in_inner[i] {
            return Err(Error::Precondition("g1 must be supported on Q".into()));
        }
    }
    let mut in_ring = vec![false; g2.cells()];
    g2.for_each_cell(&ring_outer, |i| in_ring[i] = true);
    g2.for_each_cell(&inner, |i| in_ring[i] = false);
    for (i, &v) in g2.values().iter().enumerate() {
        if v != 0.0 && !in_ring[i] {
            return Err(Error::Precondition("g2 must be supported on kappa Q minus Q".into()));
        }
    }
    let centers = cell_centers(n, l);
    let cv = g1.cell_volume();
    let mut inner_cells = Vec::new();
    g1.for_each_cell(&inner, |i| inner_cells.push(i));
    let mut ring_cells = Vec::new();
    for (i, &flag) in in_ring.iter().enumerate() {
        if flag {
            ring_cells.push(i);
        }
    }
    let mut lhs = 0.0;
    for &xi in &ring_cells {
        let gx = g2.values()[xi].abs();
        if gx == 0.0 {
            continue;
        }
        for &yi in &inner_cells {
            let gy = g1.values()[yi].abs();
            if gy == 0.0 {
                continue;
            }
            let d = dist(&centers[xi], &centers[yi]);
            lhs += gy * gx / d.powi(n as i32) * cv * cv;
        }
    }
    Ok(lhs / (norm1 * norm2))
}
