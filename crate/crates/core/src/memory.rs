//! Reference memory: calibrated per-scene parameters grouped over the rain/intersection/night
//! feature cube, with one averaged parameter tuple per group.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::environment::EnvDescription;
use crate::mpc::DrivingParams;
use crate::scenario::{Features, Scenario};
use crate::simulator::{simulate_fixed, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub scenario_id: String,
    pub features: Features,
    pub params: DrivingParams,
}

/// Arithmetic means of the six parameters; the horizon mean is rounded on lookup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "Q_h")]
    pub q_h: f64,
    pub v_d: f64,
    pub h_d: f64,
}

impl MeanParams {
    pub fn of(params: &[DrivingParams]) -> Self {
        let k = params.len() as f64;
        let mean = |f: fn(&DrivingParams) -> f64| params.iter().map(f).sum::<f64>() / k;
        Self {
            n: mean(|p| p.horizon as f64),
            q: mean(|p| p.q),
            r: mean(|p| p.r),
            q_h: mean(|p| p.q_h),
            v_d: mean(|p| p.v_d),
            h_d: mean(|p| p.h_d),
        }
    }

    pub fn to_params(&self) -> DrivingParams {
        DrivingParams {
            horizon: self.n.round() as usize,
            q: self.q,
            r: self.r,
            q_h: self.q_h,
            v_d: self.v_d,
            h_d: self.h_d,
        }
    }
}

impl From<DrivingParams> for MeanParams {
    fn from(p: DrivingParams) -> Self {
        Self::of(&[p])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGroup {
    pub members: Vec<Features>,
    pub mean: MeanParams,
    /// Number of calibrated entries behind the mean.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MemoryError {
    #[error("feature cell {0} is not covered by any group")]
    Uncovered(String),
    #[error("feature cell {0} appears in more than one group")]
    Overlap(String),
    #[error("group mean for {0} is not a valid parameter vector: {1}")]
    InvalidMean(String, String),
    #[error("no memory entries to group")]
    Empty,
    #[error("memory file {path}: {message}")]
    File { path: String, message: String },
}

/// Groups partitioning the eight feature cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    groups: Vec<ScenarioGroup>,
    #[serde(skip)]
    cell: [usize; 8],
}

impl Memory {
    pub fn new(groups: Vec<ScenarioGroup>) -> Result<Self, MemoryError> {
        let mut cell = [usize::MAX; 8];
        for (g, group) in groups.iter().enumerate() {
            for f in &group.members {
                if cell[f.index()] != usize::MAX {
                    return Err(MemoryError::Overlap(f.tag()));
                }
                cell[f.index()] = g;
            }
            group
                .mean
                .to_params()
                .validate()
                .map_err(|e| MemoryError::InvalidMean(group.members[0].tag(), e.to_string()))?;
        }
        if let Some(i) = cell.iter().position(|&g| g == usize::MAX) {
            return Err(MemoryError::Uncovered(Features::from_index(i).tag()));
        }
        Ok(Self { groups, cell })
    }

    /// One group holding every cell.
    pub fn single(params: DrivingParams) -> Self {
        Self::new(vec![ScenarioGroup {
            members: Features::all().collect(),
            mean: params.into(),
            count: 1,
        }])
        .expect("valid parameters")
    }

    /// Built-in grouped table: three parameter sets spread over the eight cells.
    pub fn builtin() -> Self {
        let f = Features::from_index;
        let tuple = |r, q_h, v_d, h_d| MeanParams {
            n: 9.0,
            q: 1.0,
            r,
            q_h,
            v_d,
            h_d,
        };
        Self::new(vec![
            ScenarioGroup {
                members: vec![f(0), f(2), f(5), f(6)],
                mean: tuple(1.68, 2.75, 6.44, 2.60),
                count: 0,
            },
            ScenarioGroup {
                members: vec![f(1), f(7)],
                mean: tuple(1.68, 1.99, 5.09, 2.55),
                count: 0,
            },
            ScenarioGroup {
                members: vec![f(3), f(4)],
                mean: tuple(1.15, 1.99, 5.09, 2.55),
                count: 0,
            },
        ])
        .expect("fixture is a partition")
    }

    pub fn groups(&self) -> &[ScenarioGroup] {
        &self.groups
    }

    pub fn group_of(&self, features: Features) -> &ScenarioGroup {
        &self.groups[self.cell[features.index()]]
    }

    pub fn lookup(&self, features: Features) -> DrivingParams {
        self.group_of(features).mean.to_params()
    }

    pub fn lookup_env(&self, env: &EnvDescription) -> DrivingParams {
        self.lookup(features_from_env(env))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("memory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        #[derive(Deserialize)]
        struct Raw {
            groups: Vec<ScenarioGroup>,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| MemoryError::File {
            path: String::new(),
            message: e.to_string(),
        })?;
        Self::new(raw.groups)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        crate::io::write_atomic(path, self.to_json().as_bytes()).map_err(|e| MemoryError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MemoryError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            MemoryError::File { message, .. } => MemoryError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

/// Label rules: rainy weather, night lighting and an intersection road type.
pub fn features_from_env(env: &EnvDescription) -> Features {
    Features::new(
        env.weather == "rainy",
        env.road_type.contains("intersection"),
        env.lighting == "night",
    )
}

/// Parameters compared between cells; Q is fixed and has no test.
pub const TESTED_PARAMS: [&str; 5] = ["N", "R", "Q_h", "v_d", "h_d"];

fn tested_values(p: &DrivingParams) -> [f64; 5] {
    [p.horizon as f64, p.r, p.q_h, p.v_d, p.h_d]
}

/// Two-sided Welch t-test p-value; `None` when either sample has fewer than two values.
pub fn welch_p(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, var)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Some(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
}

/// Pairwise p-values between feature cells, one 8x8 matrix per tested parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    /// `p[k][i][j]` for parameter `TESTED_PARAMS[k]` and cells `i`, `j`.
    pub p: [[[Option<f64>; 8]; 8]; 5],
}

impl PValueMatrix {
    pub fn get(&self, param: usize, a: Features, b: Features) -> Option<f64> {
        self.p[param][a.index()][b.index()]
    }

    /// True when some parameter differs significantly between the two cells.
    pub fn differs(&self, a: Features, b: Features, alpha: f64) -> bool {
        (0..TESTED_PARAMS.len()).any(|k| self.get(k, a, b).is_some_and(|p| p < alpha))
    }

    /// Heat-map style text: one block per parameter, significant entries starred.
    pub fn render(&self, alpha: f64) -> String {
        let tags: Vec<String> = Features::all().map(|f| f.tag()).collect();
        let mut out = String::new();
        for (k, name) in TESTED_PARAMS.iter().enumerate() {
            out.push_str(&format!("{name}\n{:>8}", ""));
            for t in &tags {
                out.push_str(&format!("{t:>9}"));
            }
            out.push('\n');
            for (i, t) in tags.iter().enumerate() {
                out.push_str(&format!("{t:>8}"));
                for j in 0..8 {
                    let cell = match self.p[k][i][j] {
                        Some(p) if p < alpha => format!("{p:.3}*"),
                        Some(p) => format!("{p:.3} "),
                        None => "  -  ".to_string(),
                    };
                    out.push_str(&format!("{cell:>9}"));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

fn by_cell(entries: &[MemoryEntry]) -> BTreeMap<usize, Vec<&MemoryEntry>> {
    let mut cells: BTreeMap<usize, Vec<&MemoryEntry>> = BTreeMap::new();
    for e in entries {
        cells.entry(e.features.index()).or_default().push(e);
    }
    cells
}

pub fn significance_matrix(entries: &[MemoryEntry]) -> PValueMatrix {
    let cells = by_cell(entries);
    let column = |i: usize, k: usize| -> Vec<f64> {
        cells
            .get(&i)
            .map(|es| es.iter().map(|e| tested_values(&e.params)[k]).collect())
            .unwrap_or_default()
    };
    let mut p = [[[None; 8]; 8]; 5];
    for (k, pk) in p.iter_mut().enumerate() {
        for i in 0..8 {
            for j in i..8 {
                let v = welch_p(&column(i, k), &column(j, k));
                pk[i][j] = v;
                pk[j][i] = v;
            }
        }
    }
    PValueMatrix { p }
}

/// Greedy merge in cell-index order: a cell joins the first open group none of whose members
/// differs from it significantly. Cells without entries join the group of the nearest cell
/// with entries (fewest differing features, then lowest index).
pub fn build_groups(
    entries: &[MemoryEntry],
    pvals: &PValueMatrix,
    alpha: f64,
) -> Result<Vec<ScenarioGroup>, MemoryError> {
    if entries.is_empty() {
        return Err(MemoryError::Empty);
    }
    let cells = by_cell(entries);
    let mut members: Vec<Vec<Features>> = Vec::new();
    for &i in cells.keys() {
        let f = Features::from_index(i);
        let slot = members
            .iter()
            .position(|g| g.iter().all(|&m| !pvals.differs(m, f, alpha)));
        match slot {
            Some(g) => members[g].push(f),
            None => members.push(vec![f]),
        }
    }
    let mut groups: Vec<ScenarioGroup> = members
        .into_iter()
        .map(|ms| {
            let params: Vec<DrivingParams> = ms
                .iter()
                .flat_map(|f| cells[&f.index()].iter().map(|e| e.params))
                .collect();
            ScenarioGroup {
                mean: MeanParams::of(&params),
                count: params.len(),
                members: ms,
            }
        })
        .collect();
    for f in Features::all().filter(|f| !cells.contains_key(&f.index())) {
        let hamming = |g: &Features| (g.index() ^ f.index()).count_ones();
        let nearest = cells
            .keys()
            .map(|&i| Features::from_index(i))
            .min_by_key(|g| (hamming(g), g.index()))
            .expect("entries exist");
        let g = groups
            .iter()
            .position(|grp| grp.members.contains(&nearest))
            .expect("every populated cell is grouped");
        groups[g].members.push(f);
    }
    for g in &mut groups {
        g.members.sort();
    }
    Ok(groups)
}

/// Evenly spaced values `lo, lo + step, ..., <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Axis {
    pub const fn new(lo: f64, hi: f64, step: f64) -> Self {
        Self { lo, hi, step }
    }

    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0) || self.hi < self.lo {
            return Vec::new();
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.lo + k as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub horizons: Vec<usize>,
    pub r: Axis,
    pub q_h: Axis,
    pub v_d: Axis,
    pub h_d: Axis,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            horizons: (5..=15).collect(),
            r: Axis::new(0.5, 3.0, 0.25),
            q_h: Axis::new(0.5, 4.0, 0.25),
            v_d: Axis::new(2.0, 12.0, 0.25),
            h_d: Axis::new(1.0, 4.0, 0.1),
        }
    }
}

impl CalibrationGrid {
    fn axes(&self) -> [Axis; 4] {
        [self.r, self.q_h, self.v_d, self.h_d]
    }

    fn is_empty(&self) -> bool {
        self.horizons.is_empty() || self.axes().iter().any(|a| a.values().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub t: f64,
    pub x: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub grid: CalibrationGrid,
    /// Values per axis in the coarse factorial pass (endpoints included).
    pub coarse_points: usize,
    /// Coarse points used as coordinate-descent starts.
    pub starts: usize,
    /// Upper bound on horizon moves from each start.
    pub max_sweeps: usize,
    /// Damped least-squares iterations per horizon.
    pub fit_iterations: usize,
    /// Halvings of the grid steps for the reported values.
    pub refine_rounds: usize,
    /// Position RMSE (m) treated as an exact fit; the search stops once it is reached.
    pub tolerance: f64,
    pub sim: SimConfig,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            grid: CalibrationGrid::default(),
            coarse_points: 3,
            starts: 2,
            max_sweeps: 10,
            fit_iterations: 40,
            refine_rounds: 2,
            tolerance: 1e-6,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: DrivingParams,
    /// Position RMSE against the reference (m).
    pub rmse: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("calibration grid has an empty axis")]
    EmptyGrid,
    #[error("reference trajectory must cover [0, {duration}] s (covers [{start}, {end}] s)")]
    ShortReference { duration: f64, start: f64, end: f64 },
    #[error("every candidate diverged")]
    AllDiverged,
}

/// Simulated minus reference ego position at each reference sample; `None` if the run diverges.
pub fn tracking_residuals(
    scenario: &Scenario,
    params: &DrivingParams,
    reference: &[ReferenceSample],
    sim: &SimConfig,
) -> Option<Vec<f64>> {
    if params.validate().is_err() {
        return None;
    }
    let trace = simulate_fixed(scenario, params, sim);
    if !trace.anomalies.is_empty() || trace.steps.iter().any(|s| !(s.x.is_finite() && s.v.is_finite())) {
        return None;
    }
    let dt = sim.dt_l;
    let last = trace.steps.last()?;
    let out = reference
        .iter()
        .map(|r| {
            let x = if r.t >= last.t {
                let h = r.t - last.t;
                last.x + last.v * h + 0.5 * last.a * h * h
            } else {
                let k = ((r.t / dt).floor() as usize).min(trace.steps.len() - 2);
                let (s0, s1) = (&trace.steps[k], &trace.steps[k + 1]);
                let w = (r.t - s0.t) / (s1.t - s0.t);
                s0.x + w * (s1.x - s0.x)
            };
            x - r.x
        })
        .collect();
    Some(out)
}

/// Closed-loop position RMSE of `params` against the reference; `None` if the run diverges.
pub fn tracking_rmse(
    scenario: &Scenario,
    params: &DrivingParams,
    reference: &[ReferenceSample],
    sim: &SimConfig,
) -> Option<f64> {
    tracking_residuals(scenario, params, reference, sim).map(|r| rms(&r))
}

fn rms(r: &[f64]) -> f64 {
    (r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64).sqrt()
}

/// `k` evenly spread entries of `values`, first and last included.
fn spread<T: Copy>(values: &[T], k: usize) -> Vec<T> {
    if values.len() <= k || k < 2 {
        return values.to_vec();
    }
    (0..k)
        .map(|i| values[(i * (values.len() - 1) + (k - 1) / 2) / (k - 1)])
        .collect()
}

type Point = (DrivingParams, f64);

struct Search<'a> {
    scenario: &'a Scenario,
    reference: &'a [ReferenceSample],
    opts: &'a CalibrationOptions,
    evaluations: std::sync::atomic::AtomicUsize,
}

impl Search<'_> {
    fn residuals(&self, cands: &[DrivingParams]) -> Vec<Option<Vec<f64>>> {
        self.evaluations
            .fetch_add(cands.len(), std::sync::atomic::Ordering::Relaxed);
        cands
            .par_iter()
            .map(|p| tracking_residuals(self.scenario, p, self.reference, &self.opts.sim))
            .collect()
    }

    fn costs(&self, cands: &[DrivingParams]) -> Vec<f64> {
        self.residuals(cands)
            .into_iter()
            .map(|r| r.map_or(f64::INFINITY, |r| rms(&r)))
            .collect()
    }

    /// Best candidate, ties to the earliest.
    fn best(&self, cands: Vec<DrivingParams>) -> Point {
        let costs = self.costs(&cands);
        let mut best = 0;
        for (i, c) in costs.iter().enumerate() {
            if *c < costs[best] {
                best = i;
            }
        }
        (cands[best], costs[best])
    }

    /// Levenberg-Marquardt over the four continuous parameters at a fixed horizon, inside the
    /// grid box, with forward-difference Jacobians.
    fn fit(&self, start: DrivingParams) -> Point {
        let axes = self.opts.grid.axes();
        let clamp = |k: usize, v: f64| v.clamp(axes[k].lo, axes[k].hi);
        let Some(Some(mut r)) = self.residuals(&[start]).pop() else {
            return (start, f64::INFINITY);
        };
        let mut cur = start;
        let mut cost: f64 = r.iter().map(|e| e * e).sum();
        let mut lambda = 1e-3;
        for _ in 0..self.opts.fit_iterations {
            if (cost / r.len() as f64).sqrt() < self.opts.tolerance {
                break;
            }
            let h: Vec<f64> = (0..4)
                .map(|k| {
                    let step = 1e-4 * axes[k].step.max(1e-3) * 10.0;
                    if axis_value(&cur, k) + step > axes[k].hi { -step } else { step }
                })
                .collect();
            let probes: Vec<DrivingParams> = (0..4).map(|k| with_axis(cur, k, axis_value(&cur, k) + h[k])).collect();
            let cols = self.residuals(&probes);
            if cols.iter().any(|c| c.is_none()) {
                break;
            }
            let m = r.len();
            let jac = nalgebra::DMatrix::from_fn(m, 4, |i, k| {
                (cols[k].as_ref().unwrap()[i] - r[i]) / h[k]
            });
            let res = nalgebra::DVector::from_column_slice(&r);
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * res;
            let mut improved = false;
            for _ in 0..8 {
                let mut a = jtj.clone();
                for k in 0..4 {
                    a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
                }
                let Some(delta) = a.lu().solve(&(-&jtr)) else { break };
                let mut next = cur;
                for k in 0..4 {
                    next = with_axis(next, k, clamp(k, axis_value(&cur, k) + delta[k]));
                }
                if next == cur {
                    break;
                }
                match self.residuals(&[next]).pop().flatten() {
                    Some(rn) => {
                        let cn: f64 = rn.iter().map(|e| e * e).sum();
                        if cn < cost {
                            let gain = cost - cn;
                            (cur, r, cost) = (next, rn, cn);
                            lambda = (lambda / 3.0).max(1e-9);
                            improved = gain > 1e-6 * (cost + gain);
                            break;
                        }
                        lambda *= 4.0;
                    }
                    None => lambda *= 4.0,
                }
            }
            if !improved {
                break;
            }
        }
        (cur, (cost / r.len() as f64).sqrt())
    }

    /// Continuous fit at the start horizon, then moves to neighbouring horizons while the
    /// refitted cost improves.
    fn descend(&self, start: DrivingParams) -> Point {
        let horizons = &self.opts.grid.horizons;
        let mut cur = self.fit(start);
        for _ in 0..self.opts.max_sweeps {
            if cur.1 < self.opts.tolerance {
                break;
            }
            let i = horizons.iter().position(|&n| n == cur.0.horizon).unwrap_or(0);
            let neighbours: Vec<usize> = [i.checked_sub(1), Some(i + 1).filter(|&j| j < horizons.len())]
                .into_iter()
                .flatten()
                .collect();
            let fits: Vec<Point> = neighbours
                .iter()
                .map(|&j| self.fit(DrivingParams { horizon: horizons[j], ..cur.0 }))
                .collect();
            let best = fits.into_iter().fold(cur, keep_better);
            if best.0.horizon == cur.0.horizon {
                break;
            }
            cur = best;
        }
        cur
    }

    /// Snaps onto the finest refinement lattice and checks one lattice step either side.
    fn snap(&self, cur: Point) -> Point {
        let axes = self.opts.grid.axes();
        let fine = 0.5f64.powi(self.opts.refine_rounds as i32);
        let mut p = cur.0;
        for (k, axis) in axes.iter().enumerate() {
            let step = axis.step * fine;
            let v = axis.lo + ((axis_value(&p, k) - axis.lo) / step).round() * step;
            p = with_axis(p, k, v.clamp(axis.lo, axis.hi));
        }
        let mut best = self.best(vec![p]);
        for (k, axis) in axes.iter().enumerate() {
            let step = axis.step * fine;
            let v = axis_value(&best.0, k);
            let cands: Vec<DrivingParams> = [v - step, v + step]
                .into_iter()
                .filter(|x| *x >= axis.lo - 1e-12 && *x <= axis.hi + 1e-12)
                .map(|x| with_axis(best.0, k, x))
                .collect();
            if !cands.is_empty() {
                best = keep_better(best, self.best(cands));
            }
        }
        best
    }
}

fn axis_value(p: &DrivingParams, axis: usize) -> f64 {
    [p.r, p.q_h, p.v_d, p.h_d][axis]
}

fn with_axis(p: DrivingParams, axis: usize, value: f64) -> DrivingParams {
    let mut q = p;
    match axis {
        0 => q.r = value,
        1 => q.q_h = value,
        2 => q.v_d = value,
        _ => q.h_d = value,
    }
    q
}

/// Fits the parameters of a fixed-parameter closed loop to a reference trajectory.
///
/// A coarse factorial pass over the grid seeds local searches from its best points. Each
/// search fits the continuous parameters by damped least squares and walks the horizon to
/// neighbouring values while that improves the fit. The winner is snapped to the grid refined
/// `refine_rounds` times. Q stays at 1.
pub fn calibrate_scene(
    scenario: &Scenario,
    reference: &[ReferenceSample],
    opts: &CalibrationOptions,
) -> Result<Calibration, CalibrationError> {
    let grid = &opts.grid;
    if grid.is_empty() {
        return Err(CalibrationError::EmptyGrid);
    }
    let (start, end) = match (reference.first(), reference.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (f64::NAN, f64::NAN),
    };
    let duration = scenario.duration();
    if !(start <= opts.sim.dt_l && end >= duration - opts.sim.dt_l - 1e-9) {
        return Err(CalibrationError::ShortReference {
            duration,
            start,
            end,
        });
    }
    let search = Search {
        scenario,
        reference,
        opts,
        evaluations: Default::default(),
    };

    let k = opts.coarse_points;
    let axes: Vec<Vec<f64>> = grid.axes().iter().map(|a| spread(&a.values(), k)).collect();
    let mut coarse = Vec::new();
    for &n in &spread(&grid.horizons, k) {
        for &r in &axes[0] {
            for &q_h in &axes[1] {
                for &v_d in &axes[2] {
                    for &h_d in &axes[3] {
                        coarse.push(DrivingParams::new(n, r, q_h, v_d, h_d));
                    }
                }
            }
        }
    }
    let costs = search.costs(&coarse);
    let mut order: Vec<usize> = (0..coarse.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    if !costs[order[0]].is_finite() {
        return Err(CalibrationError::AllDiverged);
    }

    let mut best = (coarse[order[0]], costs[order[0]]);
    for &i in order.iter().take(opts.starts.max(1)) {
        if !costs[i].is_finite() || best.1 < opts.tolerance {
            break;
        }
        best = keep_better(best, search.descend(coarse[i]));
    }
    let (params, rmse) = search.snap(best);
    if !rmse.is_finite() {
        return Err(CalibrationError::AllDiverged);
    }
    Ok(Calibration {
        params,
        rmse,
        evaluations: search.evaluations.into_inner(),
    })
}

fn keep_better(cur: Point, cand: Point) -> Point {
    if cand.1 < cur.1 {
        cand
    } else {
        cur
    }
}

/// Reference samples taken from a simulated run, at every control step.
pub fn reference_from_trace(trace: &crate::simulator::SimTrace) -> Vec<ReferenceSample> {
    let mut out: Vec<ReferenceSample> = trace
        .steps
        .iter()
        .map(|s| ReferenceSample { t: s.t, x: s.x, v: s.v })
        .collect();
    if let Some(last) = trace.steps.last() {
        // the state after the final step closes the interval
        let t = last.t + trace.header.dt_l;
        out.push(ReferenceSample {
            t,
            x: last.x + last.v * trace.header.dt_l + 0.5 * last.a * trace.header.dt_l.powi(2),
            v: last.v + last.a * trace.header.dt_l,
        });
    }
    out
}
