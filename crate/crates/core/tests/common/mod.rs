#![allow(dead_code)]

use drive_mpc::dynamics::VehicleState;
use drive_mpc::mpc::{DrivingParams, MpcQp};
use drive_mpc::scenario::{LeaderState, SceneStatus};
use rand::Rng;

/// Minimum of the condensed MPC objective over the inputs by exhaustive grid search plus
/// compass refinement. For fixed inputs each slack sits at its smallest feasible value, which
/// makes the reduced objective convex and continuously differentiable in the inputs.
pub struct GridOracle {
    n: usize,
    h: Vec<Vec<f64>>,
    g: Vec<f64>,
    c0: f64,
    rows: Vec<(Vec<f64>, Vec<(usize, f64)>, f64)>,
}

impl GridOracle {
    pub fn new(problem: &MpcQp) -> Self {
        let qp = &problem.qp;
        let dim = qp.hessian.nrows();
        let n = problem.horizon;
        let h: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| qp.hessian[(i, j)]).collect()).collect();
        for i in 0..dim {
            for j in n..dim {
                if i != j {
                    assert_eq!(h[i][j], 0.0, "slack coupling in the hessian");
                }
            }
        }
        for j in n..dim {
            assert!(h[j][j] > 0.0 && qp.gradient[j] >= 0.0);
        }
        let rows = (0..qp.constraints.nrows())
            .map(|r| {
                let cu: Vec<f64> = (0..n).map(|j| qp.constraints[(r, j)]).collect();
                let cs: Vec<(usize, f64)> = (n..dim)
                    .filter(|&j| qp.constraints[(r, j)] != 0.0)
                    .map(|j| (j, qp.constraints[(r, j)]))
                    .collect();
                assert!(cs.len() <= 1 && cs.iter().all(|c| c.1 > 0.0), "row {r} couples slacks");
                (cu, cs, qp.bounds[r])
            })
            .collect();
        Self {
            n,
            h,
            g: qp.gradient.iter().cloned().collect(),
            c0: qp.constant,
            rows,
        }
    }

    /// Full decision vector for inputs `u` with minimal slacks; `None` if a row without
    /// slack is violated.
    pub fn lift(&self, u: &[f64]) -> Option<Vec<f64>> {
        let dim = self.g.len();
        let mut z = u.to_vec();
        let mut lb = vec![f64::NEG_INFINITY; dim];
        for (cu, cs, b) in &self.rows {
            let lhs: f64 = cu.iter().zip(u).map(|(c, x)| c * x).sum();
            match cs.first() {
                Some(&(j, c)) => lb[j] = lb[j].max((b - lhs) / c),
                None if lhs < b - 1e-9 => return None,
                None => {}
            }
        }
        for j in self.n..dim {
            z.push(lb[j].max(-self.g[j] / self.h[j][j]));
        }
        Some(z)
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut f = self.c0;
        for i in 0..z.len() {
            f += self.g[i] * z[i];
            for j in 0..z.len() {
                f += 0.5 * z[i] * self.h[i][j] * z[j];
            }
        }
        f
    }

    pub fn reduced(&self, u: &[f64]) -> f64 {
        self.lift(u).map_or(f64::INFINITY, |z| self.objective(&z))
    }

    pub fn minimum(&self, lo: f64, hi: f64, step: f64) -> f64 {
        let k = ((hi - lo) / step).round() as usize + 1;
        let mut best = (f64::INFINITY, vec![0.0; self.n]);
        let mut idx = vec![0usize; self.n];
        loop {
            let u: Vec<f64> = idx.iter().map(|&i| lo + i as f64 * step).collect();
            let f = self.reduced(&u);
            if f < best.0 {
                best = (f, u);
            }
            let mut d = 0;
            while d < self.n {
                idx[d] += 1;
                if idx[d] < k {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == self.n {
                break;
            }
        }
        let (mut f, mut u) = best;
        let mut s = step;
        while s > 1e-11 {
            let mut moved = false;
            for d in 0..self.n {
                for dir in [-1.0, 1.0] {
                    let mut cand = u.clone();
                    cand[d] += dir * s;
                    let fc = self.reduced(&cand);
                    if fc < f {
                        (f, u) = (fc, cand);
                        moved = true;
                    }
                }
            }
            if !moved {
                s *= 0.5;
            }
        }
        f
    }
}

pub fn random_params(rng: &mut impl Rng, max_horizon: usize) -> DrivingParams {
    DrivingParams::new(
        rng.gen_range(1..=max_horizon),
        rng.gen_range(0.2..4.0),
        rng.gen_range(0.0..4.0),
        rng.gen_range(0.0..15.0),
        rng.gen_range(0.5..4.0),
    )
}

pub fn random_scene(rng: &mut impl Rng) -> SceneStatus {
    let v = rng.gen_range(0.0..15.0);
    let a = rng.gen_range(-3.0..3.0);
    let leader = rng.gen_bool(0.6).then(|| LeaderState {
        gap: rng.gen_range(6.5..60.0),
        v: rng.gen_range(0.0..15.0),
        a: rng.gen_range(-2.0..2.0),
        length: 4.5,
    });
    let stop_line = rng.gen_bool(0.3).then(|| rng.gen_range(1.0..80.0));
    SceneStatus {
        ego_history: (0..6)
            .map(|k| VehicleState::new(0.0, v, a, -0.1 * (5 - k) as f64))
            .collect(),
        leader,
        stop_line,
    }
}
