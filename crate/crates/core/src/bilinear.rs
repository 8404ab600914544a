//! Decomposition of the bilinear form <Tf1, f2> over pairs of good cubes:
//! classification of pairs into inside / diagonal / nearby / far
//! collections, the per-term sums with their bound instruments, and the
//! exact bookkeeping identity against the double good-cube sum.

use std::collections::{HashMap, HashSet};
use std::path::Path;


use serde::Serialize;

use crate::corona::{self, CoronaData};
use crate::czop::DiscretizedOperator;
use crate::dyfun::{self, DyadicFunction};
use crate::error::{Error, Result};
use crate::grid::{Cube, TickBox};
use crate::seed;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PairClass {
    Inside,
    Diagonal,
    Nearby,
    Far,
}

/// One classified pair (P from side 1, Q from side 2, with Q no larger
/// than P).
#[derive(Debug, Clone)]
pub struct ClassifiedPair {
    pub p: Cube,
    pub q: Cube,
    pub class: PairClass,
    /// Scale gap: side of P = 2^s times side of Q.
    pub s: u32,
    /// Distance index for far pairs: 2^{t-1} lP <= dist < 2^t lP.
    pub t: Option<u32>,
    /// The child of P containing Q (inside pairs).
    pub p_child: Option<Cube>,
    /// True when the pair fits none of the clean geometric cases (for
    /// example Q straddling the boundary of P); bucketed as Nearby for
    /// bookkeeping but excluded from bound instruments.
    pub straddle: bool,
}

/// Distance between two tick boxes in ticks (sup metric; zero if they
/// touch or overlap).
fn box_dist_ticks(a: &TickBox, b: &TickBox) -> i64 {
    a.lo.iter()
        .zip(&a.hi)
        .zip(b.lo.iter().zip(&b.hi))
        .map(|((alo, ahi), (blo, bhi))| (blo - ahi).max(alo - bhi).max(0))
        .max()
        .unwrap_or(0)
}

/// Classifies every pair (P, Q) of difference-carrying good cubes with Q
/// no larger than P. With `include_equal` false, equal-size pairs are
/// skipped (they belong to the other triangular half).
pub fn classify_pairs(
    cor1: &CoronaData,
    cor2: &CoronaData,
    r: u32,
    include_equal: bool,
) -> Vec<ClassifiedPair> {
    let g1 = cor1.grid();
    let g2 = cor2.grid();
    let lmax = g1.params.l;
    let mut out = Vec::new();
    let mut by_level: HashMap<u32, Vec<(Cube, TickBox)>> = HashMap::new();
    for q in &cor2.g_cubes {
        if q.level < lmax {
            by_level.entry(q.level).or_default().push((q.clone(), g2.cube_box(q)));
        }
    }
    for p in &cor1.g_cubes {
        if p.level >= lmax {
            continue;
        }
        let pbox = g1.cube_box(p);
        let p3 = pbox.dilate(3);
        let lp = g1.params.side_ticks(p.level);
        let q_lo = if include_equal { p.level } else { p.level + 1 };
        for ql in q_lo..lmax {
            let Some(qs) = by_level.get(&ql) else { continue };
            let s = ql - p.level;
            for (q, qbox) in qs {
                if !p3.intersects(qbox) {
                    let dist = box_dist_ticks(&pbox, qbox);
                    let mut t = 1u32;
                    while dist >= (1i64 << t) * lp {
                        t += 1;
                    }
                    out.push(ClassifiedPair {
                        p: p.clone(),
                        q: q.clone(),
                        class: PairClass::Far,
                        s,
                        t: Some(t),
                        p_child: None,
                        straddle: false,
                    });
                    continue;
                }
                if s <= r {
                    out.push(ClassifiedPair {
                        p: p.clone(),
                        q: q.clone(),
                        class: PairClass::Diagonal,
                        s,
                        t: None,
                        p_child: None,
                        straddle: false,
                    });
                    continue;
                }
                if pbox.contains_box(qbox) {
                    let child = g1
                        .children(p)
                        .into_iter()
                        .find(|c| g1.cube_box(c).contains_box(qbox));
                    match child {
                        Some(pc) => out.push(ClassifiedPair {
                            p: p.clone(),
                            q: q.clone(),
                            class: PairClass::Inside,
                            s,
                            t: None,
                            p_child: Some(pc),
                            straddle: false,
                        }),
                        None => out.push(ClassifiedPair {
                            p: p.clone(),
                            q: q.clone(),
                            class: PairClass::Nearby,
                            s,
                            t: None,
                            p_child: None,
                            straddle: true,
                        }),
                    }
                    continue;
                }
                // Outside P but within the tripled cube: the nearby case.
                // Anything touching both sides of the boundary is flagged.
                let straddle = pbox.intersects(qbox) || !p3.contains_box(qbox);
                out.push(ClassifiedPair {
                    p: p.clone(),
                    q: q.clone(),
                    class: PairClass::Nearby,
                    s,
                    t: None,
                    p_child: None,
                    straddle,
                });
            }
        }
    }
    out
}

/// Shared precomputations for one orientation of the decomposition:
/// differences and their operator images on side 1, differences and Box
/// integrals on side 2, and memoized operator images of the stopped
/// accretive functions.
pub struct Engine<'a> {
    pub cor1: &'a CoronaData,
    pub cor2: &'a CoronaData,
    pub op: &'a DiscretizedOperator,
    cell_volume: f64,
    // Side 1, per difference-carrying good cube P.
    td1: HashMap<Cube, DyadicFunction>,
    tdt1: HashMap<Cube, DyadicFunction>,
    dh_abs_avg1: HashMap<Cube, f64>,
    box_avg1: HashMap<Cube, f64>,
    // Side 2, per difference-carrying good cube Q.
    d2: HashMap<Cube, DyadicFunction>,
    qbox2: HashMap<Cube, TickBox>,
    box_int2: HashMap<Cube, f64>,
    // Memos keyed by stopping cube.
    t_beta: HashMap<Cube, DyadicFunction>,
    t_beta_child: HashMap<(Cube, Cube), DyadicFunction>,
    m_beta: HashMap<Cube, DyadicFunction>,
    // Diagonal-part memos (original family on side 1).
    t_db1: HashMap<Cube, DyadicFunction>,
    box_b_avg1: HashMap<Cube, f64>,
}

/// Box majorant of a corona at a difference-carrying cube: the absolute
/// half-twisted difference plus the indicator when a child is a surviving
/// stopping cube.
pub fn corona_box_majorant(
    cor: &CoronaData,
    f: &DyadicFunction,
    q: &Cube,
    perturbed: bool,
) -> Result<DyadicFunction> {
    let grid = cor.grid();
    let gp = &grid.params;
    let half = cor.half_twisted_diff(f, q, perturbed)?;
    let mut acc: Vec<f64> = half.values().iter().map(|v| v.abs()).collect();
    if cor.has_stopping_child(q) {
        let qb = grid
            .cube_box(q)
            .clip_domain(gp.domain_ticks())
            .ok_or_else(|| Error::DisjointCube(q.to_string()))?;
        half.for_each_cell(&qb, |i| acc[i] += 1.0);
    }
    DyadicFunction::new(gp.n, gp.l, acc)
}

impl<'a> Engine<'a> {
    pub fn new(
        cor1: &'a CoronaData,
        cor2: &'a CoronaData,
        op: &'a DiscretizedOperator,
    ) -> Result<Self> {
        let g1 = cor1.grid();
        let g2 = cor2.grid();
        let lmax = g1.params.l;
        let f1 = &cor1.f;
        let f2 = &cor2.f;
        let mut td1 = HashMap::new();
        let mut tdt1 = HashMap::new();
        let mut dh_abs_avg1 = HashMap::new();
        let mut box_avg1 = HashMap::new();
        for p in &cor1.g_cubes {
            if p.level >= lmax {
                continue;
            }
            let d = cor1.twisted_diff(f1, p)?;
            td1.insert(p.clone(), op.apply(&d)?);
            let dh = cor1.half_twisted_diff(f1, p, true)?;
            dh_abs_avg1.insert(p.clone(), dh.map(f64::abs).avg(g1, p)?);
            let s = cor1.stopping_parent(p)?;
            let beta = cor1.beta_of(&s)?;
            let dtilde = DyadicFunction::new(
                g1.params.n,
                lmax,
                dh.values().iter().zip(beta.values()).map(|(a, b)| a * b).collect(),
            )?;
            tdt1.insert(p.clone(), op.apply(&dtilde)?);
            box_avg1.insert(p.clone(), corona_box_majorant(cor1, f1, p, true)?.avg(g1, p)?);
        }
        let mut d2 = HashMap::new();
        let mut qbox2 = HashMap::new();
        let mut box_int2 = HashMap::new();
        for q in &cor2.g_cubes {
            if q.level >= lmax {
                continue;
            }
            d2.insert(q.clone(), cor2.twisted_diff(f2, q)?);
            qbox2.insert(
                q.clone(),
                g2.cube_box(q)
                    .clip_domain(g2.params.domain_ticks())
                    .ok_or_else(|| Error::DisjointCube(q.to_string()))?,
            );
            box_int2
                .insert(q.clone(), corona_box_majorant(cor2, f2, q, true)?.integral(g2, q));
        }
        Ok(Engine {
            cor1,
            cor2,
            op,
            cell_volume: op.cell_volume(),
            td1,
            tdt1,
            dh_abs_avg1,
            box_avg1,
            d2,
            qbox2,
            box_int2,
            t_beta: HashMap::new(),
            t_beta_child: HashMap::new(),
            m_beta: HashMap::new(),
            t_db1: HashMap::new(),
            box_b_avg1: HashMap::new(),
        })
    }

    /// Inner product of a full function with a side-2 difference,
    /// restricted to the difference's support.
    fn pair_inner(&self, full: &DyadicFunction, q: &Cube) -> f64 {
        let d = &self.d2[q];
        let b = &self.qbox2[q];
        let mut sum = 0.0;
        d.for_each_cell(b, |i| sum += full.values()[i] * d.values()[i]);
        sum * self.cell_volume
    }

    /// Exact pair value <T Delta_P f1, Delta_Q f2>.
    pub fn pair_value(&self, p: &Cube, q: &Cube) -> f64 {
        self.pair_inner(&self.td1[p], q)
    }

    fn t_beta(&mut self, s: &Cube) -> Result<&DyadicFunction> {
        if !self.t_beta.contains_key(s) {
            let beta = self.cor1.beta_of(s)?;
            self.t_beta.insert(s.clone(), self.op.apply(&beta)?);
        }
        Ok(&self.t_beta[s])
    }

    fn t_beta_child(&mut self, s: &Cube, child: &Cube) -> Result<&DyadicFunction> {
        let key = (s.clone(), child.clone());
        if !self.t_beta_child.contains_key(&key) {
            let g1 = self.cor1.grid();
            let beta = self.cor1.beta_of(s)?;
            let cb = g1
                .cube_box(child)
                .clip_domain(g1.params.domain_ticks())
                .ok_or_else(|| Error::DisjointCube(child.to_string()))?;
            let mut vals = vec![0.0; beta.cells()];
            beta.for_each_cell(&cb, |i| vals[i] = beta.values()[i]);
            let restricted = DyadicFunction::new(g1.params.n, g1.params.l, vals)?;
            self.t_beta_child.insert(key.clone(), self.op.apply(&restricted)?);
        }
        Ok(&self.t_beta_child[&key])
    }

    fn m_beta(&mut self, s: &Cube) -> Result<&DyadicFunction> {
        if !self.m_beta.contains_key(s) {
            let beta = self.cor1.beta_of(s)?;
            // The grid maximal function vanishes at cells no grid cube
            // connects to the support of beta; on an unbounded grid a
            // large enough cube always gives at least the domain-level
            // average, so that value floors the majorant here.
            let cell = 2f64.powi(-((self.cor1.grid().params.l * self.cor1.grid().params.n) as i32));
            let floor = beta.values().iter().sum::<f64>().abs() * cell;
            let m = dyfun::maximal(&beta, self.cor1.grid()).map(|v| v.max(floor));
            self.m_beta.insert(s.clone(), m);
        }
        Ok(&self.m_beta[s])
    }

    fn t_db1(&mut self, p: &Cube) -> Result<&DyadicFunction> {
        if !self.t_db1.contains_key(p) {
            let d = self.cor1.twisted_diff_b(&self.cor1.f, p)?;
            self.t_db1.insert(p.clone(), self.op.apply(&d)?);
        }
        Ok(&self.t_db1[p])
    }

    fn box_b_avg1(&mut self, p: &Cube) -> Result<f64> {
        if let Some(v) = self.box_b_avg1.get(p) {
            return Ok(*v);
        }
        let v = corona_box_majorant(self.cor1, &self.cor1.f, p, false)?
            .avg(self.cor1.grid(), p)?;
        self.box_b_avg1.insert(p.clone(), v);
        Ok(v)
    }
}

/// Inside-term report: the stopped-block term, the paraproduct / stopping
/// / error split of the block sums, per-scale magnitudes with their decay
/// instrument, and the coefficient-boundedness sweep.
#[derive(Debug, Clone, Serialize)]
pub struct InsideReport {
    /// Exact sum of the pair values (enters the bookkeeping identity).
    pub total: f64,
    /// Contribution of the stopping children of the paired cubes.
    pub stop_block: f64,
    pub para: f64,
    pub stop: f64,
    pub error: f64,
    /// |total - (stop_block + para - stop + error)|: zero by construction
    /// up to rounding.
    pub split_residual: f64,
    /// max over Q of |sum of half-difference child values| divided by the
    /// average cap of the corona.
    pub max_eps_over_cap: f64,
    /// Worst per-block magnitude over (1 + t_loc) |S|.
    pub max_block_constant: f64,
    /// Rows (s, |para|_s, |stop|_s, |error|_s, instrument 2^{-eta' s} mass).
    pub per_s: Vec<(u32, f64, f64, f64, f64)>,
    pub pairs: usize,
}

pub fn inside_term(engine: &mut Engine, pairs: &[ClassifiedPair]) -> Result<InsideReport> {
    let cor1 = engine.cor1;
    let g1 = cor1.grid();
    let f1 = &cor1.f;
    let eta = g1.params.eta;
    let eta_prime = (1.0 - g1.params.epsilon) * eta;
    let mut total = 0.0;
    let mut stop_block = 0.0;
    let mut para = 0.0;
    let mut stop = 0.0;
    let mut error = 0.0;
    let mut eps: HashMap<(Cube, Cube), f64> = HashMap::new();
    let mut per_s_blocks: HashMap<u32, HashSet<Cube>> = HashMap::new();
    let mut per_s_signed: HashMap<(Cube, u32), (f64, f64, f64)> = HashMap::new();
    let mut block_mag: HashMap<Cube, f64> = HashMap::new();
    let mut pairs_seen = 0usize;
    for pair in pairs {
        if pair.class != PairClass::Inside {
            continue;
        }
        let Some(pc) = &pair.p_child else { continue };
        pairs_seen += 1;
        let p = &pair.p;
        let q = &pair.q;
        let s_cube = cor1.stopping_parent(p)?;
        let v = engine.pair_value(p, q);
        total += v;
        // Stopping-children contributions of Delta_P.
        let mut sb = 0.0;
        if p.level < g1.params.l {
            for child in g1.children_in_domain(p) {
                if !cor1.tree.contains(&child) {
                    continue;
                }
                let beta_c = cor1.beta_of(&child)?;
                let af = f1.avg(g1, &child)?;
                let ab = beta_c.avg(g1, &child)?;
                if ab.abs() < 1e-12 {
                    return Err(Error::VanishingDenominator(child.to_string()));
                }
                let tb = engine.t_beta(&child)?.clone();
                sb += (af / ab) * engine.pair_inner(&tb, q);
            }
        }
        stop_block += sb;
        let block_val = engine.pair_inner(&engine.tdt1[p].clone(), q);
        let dval = cor1.half_value_on_child(f1, p, pc, true)?;
        let tb_s = engine.t_beta(&s_cube)?.clone();
        let tb_child = engine.t_beta_child(&s_cube, pc)?.clone();
        let full_beta_inner = engine.pair_inner(&tb_s, q);
        let child_inner = engine.pair_inner(&tb_child, q);
        let para_v = dval * full_beta_inner;
        let stop_v = dval * (full_beta_inner - child_inner);
        let err_v = block_val - para_v + stop_v;
        para += para_v;
        stop += stop_v;
        error += err_v;
        *eps.entry((s_cube.clone(), q.clone())).or_insert(0.0) += dval;
        let es = per_s_signed.entry((s_cube.clone(), pair.s)).or_insert((0.0, 0.0, 0.0));
        es.0 += para_v;
        es.1 += stop_v;
        es.2 += err_v;
        per_s_blocks.entry(pair.s).or_default().insert(s_cube.clone());
        *block_mag.entry(s_cube.clone()).or_insert(0.0) += block_val;
    }
    // Per-scale magnitudes: fold the signed per-block sums in absolute
    // value, instrumented against 2^{-eta' s} times the active block mass.
    let mut rows: Vec<(u32, f64, f64, f64, f64)> = Vec::new();
    let mut scales: Vec<u32> = per_s_blocks.keys().copied().collect();
    scales.sort_unstable();
    for s in scales {
        let mut pa = 0.0;
        let mut st = 0.0;
        let mut er = 0.0;
        for ((_, ss), (a, b, c)) in &per_s_signed {
            if *ss == s {
                pa += a.abs();
                st += b.abs();
                er += c.abs();
            }
        }
        let mass: f64 =
            per_s_blocks[&s].iter().map(|b| corona::measure(g1, b)).sum();
        rows.push((s, pa, st, er, 2f64.powf(-eta_prime * s as f64) * mass));
    }
    let max_eps =
        eps.values().fold(0.0f64, |m, v| m.max(v.abs())) / cor1.params.lambda;
    let tref = 1.0 + cor1.tree.t_loc + cor1.params.upsilon1 * cor1.params.tb_proxy;
    let max_block_constant = block_mag
        .iter()
        .map(|(s, v)| v.abs() / (tref * corona::measure(g1, s)).max(1e-300))
        .fold(0.0f64, f64::max);
    let split_residual = (total - (stop_block + para - stop + error)).abs();
    Ok(InsideReport {
        total,
        stop_block,
        para,
        stop,
        error,
        split_residual,
        max_eps_over_cap: max_eps,
        max_block_constant,
        per_s: rows,
        pairs: pairs_seen,
    })
}

/// Nearby-term report with the per-pair off-diagonal instrument.
#[derive(Debug, Clone, Serialize)]
pub struct NearbyReport {
    pub total: f64,
    /// Worst measured |<T Dtilde_P f1 beta, Delta_Q f2>| over its bound.
    pub max_ratio: f64,
    /// Rows (s, sum of instrumented magnitudes, running partial total).
    pub per_s: Vec<(u32, f64, f64)>,
    pub pairs: usize,
    pub straddle_pairs: usize,
}

pub fn nearby_term(engine: &mut Engine, pairs: &[ClassifiedPair]) -> Result<NearbyReport> {
    let cor1 = engine.cor1;
    let g1 = cor1.grid();
    let eta_prime = (1.0 - g1.params.epsilon) * g1.params.eta;
    let mut total = 0.0;
    let mut max_ratio = 0.0f64;
    let mut per_s: HashMap<u32, f64> = HashMap::new();
    let mut n_pairs = 0usize;
    let mut n_straddle = 0usize;
    for pair in pairs {
        if pair.class != PairClass::Nearby {
            continue;
        }
        n_pairs += 1;
        let p = &pair.p;
        let q = &pair.q;
        total += engine.pair_value(p, q);
        if pair.straddle {
            n_straddle += 1;
            continue;
        }
        let lhs = engine.pair_inner(&engine.tdt1[p].clone(), q).abs();
        let s_cube = cor1.stopping_parent(p)?;
        let mb = engine.m_beta(&s_cube)?.clone();
        let qb = &engine.qbox2[q];
        let mut inf = f64::INFINITY;
        mb.for_each_cell(qb, |i| inf = inf.min(mb.values()[i]));
        // A cube clipped entirely outside the domain leaves `inf` infinite;
        // the instrument is undefined there and the pair is skipped.
        if !inf.is_finite() {
            continue;
        }
        let rhs = 2f64.powf(-eta_prime * pair.s as f64)
            * inf
            * engine.dh_abs_avg1[p]
            * engine.box_int2[q];
        if rhs > 1e-300 {
            max_ratio = max_ratio.max(lhs / rhs);
        } else if lhs > 1e-12 {
            max_ratio = f64::INFINITY;
        }
        *per_s.entry(pair.s).or_insert(0.0) += lhs;
    }
    let mut scales: Vec<u32> = per_s.keys().copied().collect();
    scales.sort_unstable();
    let mut rows = Vec::new();
    let mut running = 0.0;
    for s in scales {
        running += per_s[&s];
        rows.push((s, per_s[&s], running));
    }
    Ok(NearbyReport {
        total,
        max_ratio,
        per_s: rows,
        pairs: n_pairs,
        straddle_pairs: n_straddle,
    })
}

/// Far-term report: per-(s,t) magnitudes instrumented against the
/// geometric reference, per-pair kernel-decay checks, and the fitted
/// decay exponents.
#[derive(Debug, Clone, Serialize)]
pub struct FarReport {
    pub total: f64,
    pub max_pair_ratio: f64,
    /// Rows (s, t, sum of |pair value|, instrument 2^{-eta (s+t)}, ratio).
    pub table: Vec<(u32, u32, f64, f64, f64)>,
    /// Fitted log2 slope of the s-marginal sums (expected negative).
    pub s_slope: Option<f64>,
    /// Fitted log2 slope of the t-marginal sums (expected negative).
    pub t_slope: Option<f64>,
    pub pairs: usize,
}

pub fn far_term(engine: &mut Engine, pairs: &[ClassifiedPair]) -> Result<FarReport> {
    let cor1 = engine.cor1;
    let g1 = cor1.grid();
    let g2 = engine.cor2.grid();
    let n = g1.params.n as f64;
    let eta = g1.params.eta;
    let mut total = 0.0;
    let mut max_pair_ratio = 0.0f64;
    let mut table: HashMap<(u32, u32), f64> = HashMap::new();
    let mut n_pairs = 0usize;
    for pair in pairs {
        if pair.class != PairClass::Far {
            continue;
        }
        n_pairs += 1;
        let p = &pair.p;
        let q = &pair.q;
        let t = pair.t.expect("far pairs carry t");
        let v = engine.pair_value(p, q);
        total += v;
        *table.entry((pair.s, t)).or_insert(0.0) += v.abs();
        let lp = g1.params.side_ticks(p.level) as f64;
        let dist = box_dist_ticks(&g1.cube_box(p), &g2.cube_box(q)) as f64;
        let rhs = 2f64.powf(-eta * pair.s as f64)
            * (dist / lp).powf(-(n + eta))
            * engine.box_avg1[p]
            * engine.box_int2[q];
        if rhs > 1e-300 {
            max_pair_ratio = max_pair_ratio.max(v.abs() / rhs);
        } else if v.abs() > 1e-12 {
            max_pair_ratio = f64::INFINITY;
        }
    }
    let mut keys: Vec<(u32, u32)> = table.keys().copied().collect();
    keys.sort_unstable();
    let mut rows = Vec::new();
    let mut s_marg: HashMap<u32, f64> = HashMap::new();
    let mut t_marg: HashMap<u32, f64> = HashMap::new();
    for (s, t) in keys {
        let v = table[&(s, t)];
        let instr = 2f64.powf(-eta * (s + t) as f64);
        rows.push((s, t, v, instr, if instr > 0.0 { v / instr } else { 0.0 }));
        *s_marg.entry(s).or_insert(0.0) += v;
        *t_marg.entry(t).or_insert(0.0) += v;
    }
    let fit_marginal = |m: &HashMap<u32, f64>| -> Option<f64> {
        let mut pts: Vec<(f64, f64)> =
            m.iter().filter(|(_, v)| **v > 0.0).map(|(k, v)| (*k as f64, v.log2())).collect();
        if pts.len() < 2 {
            return None;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        stats::ols_fit(&x, &y).ok().map(|f| f.slope)
    };
    Ok(FarReport {
        total,
        max_pair_ratio,
        table: rows,
        s_slope: fit_marginal(&s_marg),
        t_slope: fit_marginal(&t_marg),
        pairs: n_pairs,
    })
}

/// Diagonal-term report: the replacement part (perturbed versus original
/// family), the original-family pair sums with the per-pair near-diagonal
/// instrument, the sign-pattern sweep, and the energy-splitting audit.
#[derive(Debug, Clone, Serialize)]
pub struct DiagonalReport {
    pub total: f64,
    /// Sum over pairs of <T (Delta^beta - Delta^b)_P f1, Delta_Q f2>.
    pub replacement_part: f64,
    /// Sum over pairs with the original family on side 1.
    pub original_part: f64,
    /// Reference scale r * upsilon1 * tb_proxy * |domain|.
    pub replacement_reference: f64,
    /// Worst |signed sum| over random sign patterns on both sides.
    pub sign_sweep_max: f64,
    /// Worst per-pair ratio against (1 + t_loc) <Box f1> <Box f2> |P|.
    pub max_pair_ratio: f64,
    /// Worst residual of the per-child energy splitting (exact by
    /// construction up to rounding).
    pub split_residual: f64,
    pub pairs: usize,
}

pub fn diagonal_term(
    engine: &mut Engine,
    pairs: &[ClassifiedPair],
    seed_val: u64,
) -> Result<DiagonalReport> {
    let cor1 = engine.cor1;
    let cor2 = engine.cor2;
    let g1 = cor1.grid();
    let mut total = 0.0;
    let mut replacement = 0.0;
    let mut original = 0.0;
    let mut max_pair_ratio = 0.0f64;
    let mut pair_diffs: Vec<(Cube, Cube, f64)> = Vec::new();
    let mut n_pairs = 0usize;
    let t_loc = cor1.tree.t_loc;
    let mut diag_ps: HashSet<Cube> = HashSet::new();
    for pair in pairs {
        if pair.class != PairClass::Diagonal {
            continue;
        }
        n_pairs += 1;
        let p = &pair.p;
        let q = &pair.q;
        diag_ps.insert(p.clone());
        let v = engine.pair_value(p, q);
        total += v;
        let tdb = engine.t_db1(p)?.clone();
        let vb = engine.pair_inner(&tdb, q);
        original += vb;
        let d = v - vb;
        replacement += d;
        pair_diffs.push((p.clone(), q.clone(), d));
        let box1 = engine.box_b_avg1(p)?;
        let box2 = engine.box_int2[q] / corona::measure(cor2.grid(), q).max(1e-300);
        let rhs = (1.0 + t_loc) * box1 * box2 * corona::measure(g1, p);
        if rhs > 1e-300 {
            max_pair_ratio = max_pair_ratio.max(vb.abs() / rhs);
        } else if vb.abs() > 1e-12 {
            max_pair_ratio = f64::INFINITY;
        }
    }
    // Sign sweep: independent random signs per cube on each side.
    let mut rng = seed::stream(seed_val, &[seed::tag::SIGN_PATTERN, 2]);
    let mut sweep_max = 0.0f64;
    use rand::Rng;
    for _ in 0..8 {
        let mut sp: HashMap<Cube, f64> = HashMap::new();
        let mut sq: HashMap<Cube, f64> = HashMap::new();
        let mut val = 0.0;
        for (p, q, d) in &pair_diffs {
            let ep = *sp
                .entry(p.clone())
                .or_insert_with(|| if rng.gen::<bool>() { 1.0 } else { -1.0 });
            let eq = *sq
                .entry(q.clone())
                .or_insert_with(|| if rng.gen::<bool>() { 1.0 } else { -1.0 });
            val += ep * eq * d;
        }
        sweep_max = sweep_max.max(val.abs());
    }
    // Energy-splitting audit on a sample of diagonal cubes: on each child,
    // the squared difference splits into a multiple of the squared
    // accretive function plus an exactly mean-free remainder.
    let mut split_residual = 0.0f64;
    let mut sample: Vec<Cube> = diag_ps.into_iter().collect();
    sample.sort_by(|a, b| a.level.cmp(&b.level).then_with(|| a.idx.cmp(&b.idx)));
    sample.truncate(16);
    for p in &sample {
        let psi = cor1.twisted_diff_b(&cor1.f, p)?;
        let psi_sq = psi.map(|v| v * v);
        for child in g1.children_in_domain(p) {
            let b_c = cor1.sys.b(&child)?;
            let b_sq = b_c.map(|v| v * v);
            let denom = b_sq.integral(g1, &child);
            if denom.abs() < 1e-300 {
                continue;
            }
            let c = psi_sq.integral(g1, &child) / denom;
            let resid = (psi_sq.integral(g1, &child) - c * denom).abs();
            split_residual = split_residual.max(resid);
        }
    }
    let domain_measure = 1.0f64; // unit cube domain
    let reference = g1.params.r as f64
        * cor1.params.upsilon1
        * cor1.params.tb_proxy
        * domain_measure;
    Ok(DiagonalReport {
        total,
        replacement_part: replacement,
        original_part: original,
        replacement_reference: reference,
        sign_sweep_max: sweep_max,
        max_pair_ratio,
        split_residual,
        pairs: n_pairs,
    })
}

/// The four term reports of one triangular half.
#[derive(Debug, Clone, Serialize)]
pub struct HalfReport {
    pub inside: InsideReport,
    pub nearby: NearbyReport,
    pub far: FarReport,
    pub diagonal: DiagonalReport,
    pub total: f64,
}

pub fn run_half(
    cor1: &CoronaData,
    cor2: &CoronaData,
    op: &DiscretizedOperator,
    r: u32,
    include_equal: bool,
    seed_val: u64,
) -> Result<HalfReport> {
    let pairs = classify_pairs(cor1, cor2, r, include_equal);
    let mut engine = Engine::new(cor1, cor2, op)?;
    let inside = inside_term(&mut engine, &pairs)?;
    let nearby = nearby_term(&mut engine, &pairs)?;
    let far = far_term(&mut engine, &pairs)?;
    let diagonal = diagonal_term(&mut engine, &pairs, seed_val)?;
    let total = inside.total + nearby.total + far.total + diagonal.total;
    Ok(HalfReport { inside, nearby, far, diagonal, total })
}

/// Full decomposition: both triangular halves, the exact double good-cube
/// sum they must reproduce, and the comparison against the full pairing.
#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub forward: HalfReport,
    pub transposed: HalfReport,
    pub classified_total: f64,
    pub double_good_sum: f64,
    /// |classified_total - double_good_sum| (must be ~0).
    pub bookkeeping_residual: f64,
    /// <T f1, f2> over the full functions.
    pub full_pairing: f64,
    /// |full_pairing - double_good_sum|.
    pub good_sum_error: f64,
}

/// Sum of the twisted differences of a corona over its difference-carrying
/// good cubes.
pub fn good_projection(cor: &CoronaData) -> Result<DyadicFunction> {
    let gp = &cor.grid().params;
    let mut acc = vec![0.0; cor.f.cells()];
    for q in &cor.g_cubes {
        if q.level < gp.l {
            cor.accumulate_twisted_diff(&mut acc, &cor.f, q, 1.0, true)?;
        }
    }
    DyadicFunction::new(gp.n, gp.l, acc)
}

pub fn full_decomposition(
    cor1: &CoronaData,
    cor2: &CoronaData,
    op: &DiscretizedOperator,
    seed_val: u64,
) -> Result<DecompositionReport> {
    let r = cor1.grid().params.r;
    let forward = run_half(cor1, cor2, op, r, true, seed_val)?;
    let op_t = op.transpose();
    let transposed = run_half(cor2, cor1, &op_t, r, false, seed_val.wrapping_add(1))?;
    let classified_total = forward.total + transposed.total;
    let sum1 = good_projection(cor1)?;
    let sum2 = good_projection(cor2)?;
    let double_good_sum = op.bilinear(&sum1, &sum2)?;
    let bookkeeping_residual = (classified_total - double_good_sum).abs();
    if bookkeeping_residual > 1e-9 * double_good_sum.abs().max(1.0) {
        return Err(Error::Inconsistency(format!(
            "classified terms {classified_total} disagree with the double good sum \
             {double_good_sum} (residual {bookkeeping_residual})"
        )));
    }
    let full_pairing = op.bilinear(&cor1.f, &cor2.f)?;
    Ok(DecompositionReport {
        forward,
        transposed,
        classified_total,
        double_good_sum,
        bookkeeping_residual,
        full_pairing,
        good_sum_error: (full_pairing - double_good_sum).abs(),
    })
}

/// Writes the per-term rows as CSV: (term, s, t, value, bound_instrument,
/// ratio). Aggregate rows use t = -1; pure totals use s = -1.
pub fn write_csv(report: &DecompositionReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["term", "s", "t", "value", "bound_instrument", "ratio"])
        .map_err(csv_err)?;
    let mut row = |term: &str, s: i64, t: i64, v: f64, b: f64| {
        let ratio = if b > 0.0 { v / b } else { 0.0 };
        w.write_record([
            term,
            &s.to_string(),
            &t.to_string(),
            &format!("{v:.12e}"),
            &format!("{b:.12e}"),
            &format!("{ratio:.6e}"),
        ])
        .map_err(csv_err)
    };
    for (tag, half) in [("fwd", &report.forward), ("tr", &report.transposed)] {
        row(&format!("{tag}_inside_total"), -1, -1, half.inside.total, 0.0)?;
        for (s, pa, st, er, instr) in &half.inside.per_s {
            row(&format!("{tag}_inside_para"), *s as i64, -1, *pa, *instr)?;
            row(&format!("{tag}_inside_stop"), *s as i64, -1, *st, *instr)?;
            row(&format!("{tag}_inside_error"), *s as i64, -1, *er, *instr)?;
        }
        row(&format!("{tag}_nearby_total"), -1, -1, half.nearby.total, 0.0)?;
        for (s, v, run) in &half.nearby.per_s {
            row(&format!("{tag}_nearby"), *s as i64, -1, *v, *run)?;
        }
        row(&format!("{tag}_far_total"), -1, -1, half.far.total, 0.0)?;
        for (s, t, v, instr, _) in &half.far.table {
            row(&format!("{tag}_far"), *s as i64, *t as i64, *v, *instr)?;
        }
        row(&format!("{tag}_diagonal_total"), -1, -1, half.diagonal.total, 0.0)?;
        row(
            &format!("{tag}_diagonal_replacement"),
            -1,
            -1,
            half.diagonal.replacement_part,
            half.diagonal.replacement_reference,
        )?;
    }
    row("double_good_sum", -1, -1, report.double_good_sum, 0.0)?;
    row("full_pairing", -1, -1, report.full_pairing, 0.0)?;
    row("good_sum_error", -1, -1, report.good_sum_error, 0.0)?;
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv: {e}"))
}
