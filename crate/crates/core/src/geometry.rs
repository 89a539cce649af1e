//! Decision boundaries as finite point sets, Hausdorff distances between
//! them, and the empirical `H <= alpha + epsilon` check.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfe::{refine_to_boundary, CfePair};
use crate::data::Dataset;
use crate::nn::MlpModel;
use crate::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 256;
pub const DEFAULT_LEVEL_TOL: f64 = 1e-6;

/// Axis-aligned box in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Region {
    pub fn new(lower: [f64; 2], upper: [f64; 2]) -> Result<Self> {
        let r = Self { lower, upper };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if !(self.lower[i] < self.upper[i]) || !self.lower[i].is_finite() || !self.upper[i].is_finite() {
                return Err(Error::Validation(format!(
                    "region bounds must satisfy lower < upper, got {:?} / {:?}",
                    self.lower, self.upper
                )));
            }
        }
        Ok(())
    }

    /// Bounding box of a 2-D dataset widened by 10% of its extent on every side.
    pub fn around(ds: &Dataset) -> Result<Self> {
        if ds.dim() != 2 {
            return Err(Error::InputShape {
                expected: 2,
                got: ds.dim(),
            });
        }
        let (lo, hi) = ds
            .bounding_box()
            .ok_or_else(|| Error::Validation("region of an empty dataset".into()))?;
        let mut lower = [0.0; 2];
        let mut upper = [0.0; 2];
        for i in 0..2 {
            let pad = 0.1 * (hi[i] - lo[i]).max(f64::EPSILON);
            lower[i] = lo[i] - pad;
            upper[i] = hi[i] + pad;
        }
        Self::new(lower, upper)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.lower[i] && p[i] <= self.upper[i])
    }

    pub fn diagonal(&self) -> f64 {
        (self.upper[0] - self.lower[0]).hypot(self.upper[1] - self.lower[1])
    }

    /// Node `i` of `n` evenly spaced nodes along `axis`, endpoints included.
    pub fn node(&self, axis: usize, i: usize, n: usize) -> f64 {
        if i + 1 == n {
            return self.upper[axis];
        }
        self.lower[axis] + (self.upper[axis] - self.lower[axis]) * (i as f64 / (n - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub points: Vec<[f64; 2]>,
    pub source_model_id: String,
    pub region: Region,
    pub grid_resolution: usize,
    pub level_tol: f64,
}

impl BoundarySet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the model did not cross 0.5 anywhere on the grid.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with header `x1,x2`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x1", "x2"])?;
        for p in &self.points {
            wtr.write_record([p[0].to_string(), p[1].to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn bisect_edge(f: &(impl Fn([f64; 2]) -> f64 + ?Sized), a: [f64; 2], fa: f64, b: [f64; 2], level_tol: f64) -> Option<[f64; 2]> {
    // fa and fb straddle zero (fa >= 0 xor fb >= 0).
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let point = |t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    let lo_side = fa >= 0.0;
    let mut best = (f64::INFINITY, a);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let p = point(mid);
        let g = f(p);
        if g.abs() < best.0 {
            best = (g.abs(), p);
        }
        if (g >= 0.0) == lo_side {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (best.0 <= level_tol).then_some(best.1)
}

/// Level set `f = 0.5` of an arbitrary scalar field on a
/// `resolution x resolution` node grid.
///
/// Every grid edge whose endpoints fall on different sides of 0.5 is bisected
/// until the field is within `level_tol` of 0.5. Points are ordered by edge:
/// horizontal edges row by row, then vertical edges.
pub fn extract_boundary_fn<F>(f: F, region: Region, resolution: usize, level_tol: f64, id: &str) -> Result<BoundarySet>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    region.validate()?;
    if resolution < 2 {
        return Err(Error::Config(format!("grid resolution must be at least 2, got {resolution}")));
    }
    if !(level_tol > 0.0) {
        return Err(Error::Config("level_tol must be positive".into()));
    }
    let n = resolution;
    let g = |p: [f64; 2]| f(p) - 0.5;
    let xs: Vec<f64> = (0..n).map(|i| region.node(0, i, n)).collect();
    let ys: Vec<f64> = (0..n).map(|j| region.node(1, j, n)).collect();
    let values: Vec<Vec<f64>> = ys
        .par_iter()
        .map(|&y| xs.iter().map(|&x| g([x, y])).collect())
        .collect();
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("model produced non-finite values on the grid".into()));
    }

    let horizontal: Vec<Vec<[f64; 2]>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (0..n - 1)
                .filter(|&i| (values[j][i] >= 0.0) != (values[j][i + 1] >= 0.0))
                .filter_map(|i| bisect_edge(&g, [xs[i], ys[j]], values[j][i], [xs[i + 1], ys[j]], level_tol))
                .collect()
        })
        .collect();
    let vertical: Vec<Vec<[f64; 2]>> = (0..n - 1)
        .into_par_iter()
        .map(|j| {
            (0..n)
                .filter(|&i| (values[j][i] >= 0.0) != (values[j + 1][i] >= 0.0))
                .filter_map(|i| bisect_edge(&g, [xs[i], ys[j]], values[j][i], [xs[i], ys[j + 1]], level_tol))
                .collect()
        })
        .collect();

    Ok(BoundarySet {
        points: horizontal.into_iter().chain(vertical).flatten().collect(),
        source_model_id: id.to_string(),
        region,
        grid_resolution: resolution,
        level_tol,
    })
}

/// Samples the 0.5 level set of a 2-D model. Models with other input
/// dimensions are rejected.
pub fn extract_boundary(model: &MlpModel, region: Region, resolution: usize, level_tol: f64, id: &str) -> Result<BoundarySet> {
    if model.input_dim() != 2 {
        return Err(Error::InputShape {
            expected: 2,
            got: model.input_dim(),
        });
    }
    extract_boundary_fn(
        |p| model.prob1(&p).unwrap_or(f64::NAN),
        region,
        resolution,
        level_tol,
        id,
    )
}

/// Class-1 probabilities on the `resolution x resolution` node grid, as CSV
/// `x1,x2,p1` with `x1` varying fastest.
pub fn write_probability_grid<W: Write>(model: &MlpModel, region: Region, resolution: usize, w: W) -> Result<()> {
    region.validate()?;
    if resolution < 2 {
        return Err(Error::Config(format!("grid resolution must be at least 2, got {resolution}")));
    }
    let n = resolution;
    let rows: Vec<Vec<[f64; 3]>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let y = region.node(1, j, n);
            (0..n)
                .map(|i| {
                    let x = region.node(0, i, n);
                    Ok([x, y, model.prob1(&[x, y])?])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["x1", "x2", "p1"])?;
    for r in rows.iter().flatten() {
        wtr.write_record([r[0].to_string(), r[1].to_string(), r[2].to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HausdorffReport {
    pub h: f64,
    /// Largest distance from a point of the first set to the second set.
    pub directed_ts: f64,
    pub directed_st: f64,
    pub witness_ts: Witness,
    pub witness_st: Witness,
}

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn check_nonempty(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::UndefinedDistance)
    } else {
        Ok(())
    }
}

fn directed_brute(a: &[[f64; 2]], b: &[[f64; 2]]) -> (f64, Witness) {
    let mut worst = (f64::NEG_INFINITY, Witness { from: a[0], to: b[0] });
    for &p in a {
        let mut best = (f64::INFINITY, b[0]);
        for &q in b {
            let d = dist2(p, q);
            if d < best.0 || (d == best.0 && lex_less(q, best.1)) {
                best = (d, q);
            }
        }
        if best.0 > worst.0 {
            worst = (best.0, Witness { from: p, to: best.1 });
        }
    }
    (worst.0.sqrt(), worst.1)
}

fn report(ts: (f64, Witness), st: (f64, Witness)) -> HausdorffReport {
    HausdorffReport {
        h: ts.0.max(st.0),
        directed_ts: ts.0,
        directed_st: st.0,
        witness_ts: ts.1,
        witness_st: st.1,
    }
}

/// Exact Hausdorff distance by the double loop over both sets.
pub fn hausdorff_brute(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<HausdorffReport> {
    check_nonempty(a, b)?;
    Ok(report(directed_brute(a, b), directed_brute(b, a)))
}

/// Uniform bucket grid over a point set for nearest-neighbour queries.
///
/// Queries return the same squared distance as a linear scan: every candidate
/// distance is computed with the same expression, and the ring search only
/// stops once no unvisited bucket can hold anything closer.
struct BucketGrid<'a> {
    points: &'a [[f64; 2]],
    origin: [f64; 2],
    cell: f64,
    dims: [i64; 2],
    buckets: Vec<Vec<u32>>,
}

impl<'a> BucketGrid<'a> {
    fn new(points: &'a [[f64; 2]]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let side = ((points.len() as f64).sqrt().ceil() as i64).max(1);
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let cell = if extent > 0.0 { extent / side as f64 } else { 1.0 };
        let dims = [
            (((hi[0] - lo[0]) / cell).floor() as i64 + 1).max(1),
            (((hi[1] - lo[1]) / cell).floor() as i64 + 1).max(1),
        ];
        let mut buckets = vec![Vec::new(); (dims[0] * dims[1]) as usize];
        let mut grid = Self {
            points,
            origin: lo,
            cell,
            dims,
            buckets: Vec::new(),
        };
        for (k, &p) in points.iter().enumerate() {
            let c = grid.clamped_cell(p);
            buckets[(c[1] * dims[0] + c[0]) as usize].push(k as u32);
        }
        grid.buckets = buckets;
        grid
    }

    fn raw_cell(&self, p: [f64; 2]) -> [i64; 2] {
        [
            ((p[0] - self.origin[0]) / self.cell).floor() as i64,
            ((p[1] - self.origin[1]) / self.cell).floor() as i64,
        ]
    }

    fn clamped_cell(&self, p: [f64; 2]) -> [i64; 2] {
        let c = self.raw_cell(p);
        [c[0].clamp(0, self.dims[0] - 1), c[1].clamp(0, self.dims[1] - 1)]
    }

    fn nearest(&self, q: [f64; 2]) -> (f64, [f64; 2]) {
        let c = self.clamped_cell(q);
        let mut best = (f64::INFINITY, self.points[0]);
        let max_ring = self.dims[0].max(self.dims[1]);
        for r in 0..=max_ring {
            let (x_lo, x_hi) = (c[0] - r, c[0] + r);
            let (y_lo, y_hi) = (c[1] - r, c[1] + r);
            for cy in y_lo.max(0)..=y_hi.min(self.dims[1] - 1) {
                let on_edge_row = cy == y_lo || cy == y_hi;
                let mut cx = x_lo.max(0);
                while cx <= x_hi.min(self.dims[0] - 1) {
                    for &k in &self.buckets[(cy * self.dims[0] + cx) as usize] {
                        let p = self.points[k as usize];
                        let d = dist2(q, p);
                        if d < best.0 || (d == best.0 && lex_less(p, best.1)) {
                            best = (d, p);
                        }
                    }
                    cx = if on_edge_row || cx == x_hi { cx + 1 } else { x_hi };
                }
            }
            // Points in unvisited buckets are at least `(r - 1) * cell` away.
            let reach = (r - 1).max(0) as f64 * self.cell;
            if r >= 1 && best.0 <= reach * reach {
                break;
            }
        }
        best
    }
}

fn lex_less(a: [f64; 2], b: [f64; 2]) -> bool {
    (a[0], a[1]) < (b[0], b[1])
}

fn directed_indexed(a: &[[f64; 2]], index: &BucketGrid) -> (f64, Witness) {
    let mins: Vec<(f64, [f64; 2])> = a.par_iter().map(|&p| index.nearest(p)).collect();
    let mut worst = (f64::NEG_INFINITY, Witness { from: a[0], to: mins[0].1 });
    for (&p, &(d, q)) in a.iter().zip(&mins) {
        if d > worst.0 {
            worst = (d, Witness { from: p, to: q });
        }
    }
    (worst.0.sqrt(), worst.1)
}

/// Exact Hausdorff distance using bucket grids; the distances are bitwise
/// identical to [`hausdorff_brute`].
pub fn hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<HausdorffReport> {
    check_nonempty(a, b)?;
    let ia = BucketGrid::new(a);
    let ib = BucketGrid::new(b);
    Ok(report(directed_indexed(a, &ib), directed_indexed(b, &ia)))
}

pub fn hausdorff_sets(a: &BoundarySet, b: &BoundarySet) -> Result<HausdorffReport> {
    hausdorff(&a.points, &b.points)
}

/// One crossing point per pair, on the segment `[x, x_cf]`, with
/// `|f_t - 0.5| <= tol`.
pub fn crossings_for_pairs(teacher: &MlpModel, pairs: &[CfePair], tol: f64) -> Result<Vec<Vec<f64>>> {
    pairs
        .par_iter()
        .map(|p| refine_to_boundary(teacher, &p.x, &p.x_cf, tol))
        .collect()
}

/// Largest perturbation norm over the pairs.
pub fn compute_alpha(pairs: &[CfePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("alpha of an empty pair list".into()));
    }
    Ok(pairs.iter().map(|p| p.perturbation_norm).fold(0.0, f64::max))
}

fn coverage_radius(boundary: &[[f64; 2]], centers: &BucketGrid) -> f64 {
    boundary
        .par_iter()
        .map(|&p| centers.nearest(p).0)
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

/// The larger of the two coverage radii: how far any boundary point (teacher
/// or student) lies from its nearest crossing.
pub fn compute_epsilon(crossings: &[Vec<f64>], boundary_t: &BoundarySet, boundary_s: &BoundarySet) -> Result<f64> {
    if crossings.is_empty() {
        return Err(Error::Validation("epsilon needs at least one crossing".into()));
    }
    if boundary_t.is_empty() || boundary_s.is_empty() {
        return Err(Error::UndefinedDistance);
    }
    let centers = crossings
        .iter()
        .map(|c| match c.as_slice() {
            &[a, b] => Ok([a, b]),
            other => Err(Error::InputShape {
                expected: 2,
                got: other.len(),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let index = BucketGrid::new(&centers);
    Ok(coverage_radius(&boundary_t.points, &index).max(coverage_radius(&boundary_s.points, &index)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub h: f64,
    pub bound: f64,
    pub satisfied: bool,
    pub slack_used: f64,
    pub directed_ts: f64,
    pub directed_st: f64,
    pub teacher_boundary_points: usize,
    pub student_boundary_points: usize,
}

impl BoundCheckReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Measures `H(M_s, M_t)` on the grid and compares it with `alpha + epsilon
/// + a2_slack`.
pub fn check_bound(
    teacher: &MlpModel,
    student: &MlpModel,
    pairs: &[CfePair],
    region: Region,
    resolution: usize,
    a2_slack: f64,
) -> Result<BoundCheckReport> {
    if !(a2_slack >= 0.0) {
        return Err(Error::Config("a2_slack must be nonnegative".into()));
    }
    let bt = extract_boundary(teacher, region, resolution, DEFAULT_LEVEL_TOL, "teacher")?;
    let bs = extract_boundary(student, region, resolution, DEFAULT_LEVEL_TOL, "student")?;
    bound_from_sets(teacher, pairs, &bt, &bs, a2_slack)
}

/// [`check_bound`] with boundaries that were already extracted.
pub fn bound_from_sets(
    teacher: &MlpModel,
    pairs: &[CfePair],
    bt: &BoundarySet,
    bs: &BoundarySet,
    a2_slack: f64,
) -> Result<BoundCheckReport> {
    let alpha = compute_alpha(pairs)?;
    let crossings = crossings_for_pairs(teacher, pairs, bt.level_tol)?;
    let epsilon = compute_epsilon(&crossings, bt, bs)?;
    let hr = hausdorff_sets(bt, bs)?;
    let bound = alpha + epsilon;
    Ok(BoundCheckReport {
        alpha,
        epsilon,
        h: hr.h,
        bound,
        satisfied: hr.h <= bound + a2_slack,
        slack_used: a2_slack,
        directed_ts: hr.directed_ts,
        directed_st: hr.directed_st,
        teacher_boundary_points: bt.len(),
        student_boundary_points: bs.len(),
    })
}
