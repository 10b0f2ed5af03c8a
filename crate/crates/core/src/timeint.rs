//! ARK(2,3,2)b implicit-explicit time stepping with a matrix-free
//! restarted GMRES solver for the implicit stages.

use crate::dynamics::{apply_filter, DynamicsModel};
use crate::error::{config_err, MmfError, Result};
use crate::linalg::{axpy, dot, norm2};
use crate::microphysics::{apply_microphysics, KesslerParams};
use crate::operators::PrognosticState;

/// Three-stage, second-order additive Runge-Kutta pair sharing the weights `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ark2Tableau {
    pub explicit: [[f64; 3]; 3],
    pub implicit: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub c: [f64; 3],
    /// Diagonal of the implicit part.
    pub gamma: f64,
}

impl Ark2Tableau {
    /// ARK(2,3,2)b: `gamma = 1 - 1/sqrt 2`, `delta = 1/(2 sqrt 2)`,
    /// `alpha = (3 + 2 sqrt 2)/6`.
    pub fn ark232() -> Self {
        let s2 = std::f64::consts::SQRT_2;
        let gamma = 1.0 - 1.0 / s2;
        let delta = 1.0 / (2.0 * s2);
        let alpha = (3.0 + 2.0 * s2) / 6.0;
        Self {
            explicit: [[0.0; 3], [2.0 * gamma, 0.0, 0.0], [1.0 - alpha, alpha, 0.0]],
            implicit: [[0.0; 3], [gamma, gamma, 0.0], [delta, delta, gamma]],
            b: [delta, delta, gamma],
            c: [0.0, 2.0 * gamma, 1.0],
            gamma,
        }
    }
}

impl Default for Ark2Tableau {
    fn default() -> Self {
        Self::ark232()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresConfig {
    /// Relative residual target `||b - A x|| <= tol ||b||`.
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self { tol: 1e-6, restart: 30, max_iter: 300 }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) || self.restart == 0 || self.max_iter == 0 {
            return config_err(format!("invalid GMRES settings {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmresSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final true relative residual.
    pub residual: f64,
}

/// Solve `A x = b` given only the action of `A`, starting from `x = 0`.
pub fn gmres_solve<F>(mut apply: F, b: &[f64], cfg: &GmresConfig) -> Result<GmresSolution>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(GmresSolution { x, iterations: 0, residual: 0.0 });
    }
    let target = cfg.tol * bnorm;
    let m = cfg.restart.min(n.max(1));
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    loop {
        apply(&x, &mut w)?;
        let r: Vec<f64> = b.iter().zip(&w).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        if beta <= target {
            return Ok(GmresSolution { x, iterations, residual: beta / bnorm });
        }
        if iterations >= cfg.max_iter {
            return Err(MmfError::Solver { iterations, residual: beta / bnorm });
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        for j in 0..m {
            apply(&basis[j], &mut w)?;
            iterations += 1;
            for (i, v) in basis.iter().enumerate() {
                h[i][j] = dot(&w, v);
                axpy(&mut w, -h[i][j], v);
            }
            h[j + 1][j] = norm2(&w);
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let rad = h[j][j].hypot(h[j + 1][j]);
            cs[j] = h[j][j] / rad;
            sn[j] = h[j + 1][j] / rad;
            let sub = h[j + 1][j];
            h[j][j] = rad;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            k = j + 1;
            if g[j + 1].abs() <= target || iterations >= cfg.max_iter || sub == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / sub).collect());
        }
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let s: f64 = (i + 1..k).map(|l| h[i][l] * y[l]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, v) in y.iter().zip(&basis) {
            axpy(&mut x, *yi, v);
        }
    }
}

/// Explicit nonlinear and implicit linear operators of one simulator.
pub trait ImexOperators {
    /// `S(q)`.
    fn full_rhs(&self, q: &[f64], out: &mut [f64]) -> Result<()>;
    /// Linearized fast-wave operator applied to `q`.
    fn linear_rhs(&self, q: &[f64], out: &mut [f64]);
}

impl ImexOperators for DynamicsModel {
    fn full_rhs(&self, q: &[f64], out: &mut [f64]) -> Result<()> {
        self.rhs_slice(q, out)
    }

    fn linear_rhs(&self, q: &[f64], out: &mut [f64]) {
        self.linear_slice(q, out);
    }
}

/// The linearized operator applied to a state increment.
pub fn linear_operator(increment: &PrognosticState, model: &DynamicsModel) -> PrognosticState {
    let mut out = increment.clone();
    model.linear(increment, &mut out);
    out
}

/// Counters from one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub gmres_iterations: usize,
    pub max_residual: f64,
}

/// Advance `q` by one ARK2 step. With `implicit == false` (`delta = 0`) all
/// terms are explicit and no linear solve happens. A constant `coupling`
/// tendency is added to the explicit part of every stage.
pub fn step_ark2<O: ImexOperators + ?Sized>(
    q: &[f64],
    dt: f64,
    ops: &O,
    implicit: bool,
    coupling: Option<&[f64]>,
    gmres: &GmresConfig,
    tableau: &Ark2Tableau,
) -> Result<(Vec<f64>, StepStats)> {
    if !(dt > 0.0) {
        return config_err(format!("time step {dt} must be positive"));
    }
    let n = q.len();
    if coupling.is_some_and(|c| c.len() != n) {
        return Err(MmfError::Shape("coupling tendency length differs from state".into()));
    }
    let mut stats = StepStats::default();
    let mut expl: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut lin: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut tmp = vec![0.0; n];
    for i in 0..3 {
        let mut stage = q.to_vec();
        for j in 0..i {
            axpy(&mut stage, dt * tableau.explicit[i][j], &expl[j]);
            if implicit {
                axpy(&mut stage, dt * tableau.implicit[i][j], &lin[j]);
            }
        }
        let diag = tableau.implicit[i][i];
        if implicit && diag != 0.0 {
            // Solve (I - diag dt L) Q = stage for the increment Q - stage.
            let scale = diag * dt;
            ops.linear_rhs(&stage, &mut tmp);
            let rhs: Vec<f64> = tmp.iter().map(|v| scale * v).collect();
            if rhs.iter().any(|&v| v != 0.0) {
                let sol = gmres_solve(
                    |x, out| {
                        ops.linear_rhs(x, out);
                        for (o, xi) in out.iter_mut().zip(x) {
                            *o = xi - scale * *o;
                        }
                        Ok(())
                    },
                    &rhs,
                    gmres,
                )?;
                stats.gmres_iterations += sol.iterations;
                stats.max_residual = stats.max_residual.max(sol.residual);
                axpy(&mut stage, 1.0, &sol.x);
            }
        }
        let mut s = vec![0.0; n];
        ops.full_rhs(&stage, &mut s)?;
        let mut l = vec![0.0; n];
        if implicit {
            ops.linear_rhs(&stage, &mut l);
            axpy(&mut s, -1.0, &l);
        }
        if let Some(c) = coupling {
            axpy(&mut s, 1.0, c);
        }
        expl.push(s);
        lin.push(l);
    }
    let mut out = q.to_vec();
    for j in 0..3 {
        axpy(&mut out, dt * tableau.b[j], &expl[j]);
        if implicit {
            axpy(&mut out, dt * tableau.b[j], &lin[j]);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(MmfError::State("non-finite value after time step".into()));
    }
    Ok((out, stats))
}

/// One simulator: dynamics, its state and stepping settings.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub model: DynamicsModel,
    pub state: PrognosticState,
    pub time: f64,
    pub dt: f64,
    /// `delta = 1` IMEX when true, fully explicit otherwise.
    pub implicit: bool,
    pub gmres: GmresConfig,
    pub tableau: Ark2Tableau,
    /// Boyd-Vandeven blend weight applied once per step (0 disables).
    pub filter: f64,
    /// Kessler physics after each step; `None` transports moisture only.
    pub microphysics: Option<KesslerParams>,
    /// Accumulated surface rain per grid column (mm).
    pub precip: Vec<f64>,
}

impl Simulator {
    pub fn new(model: DynamicsModel, state: PrognosticState, dt: f64) -> Self {
        let precip = vec![0.0; model.mesh.n_columns()];
        Self {
            model,
            state,
            time: 0.0,
            dt,
            implicit: true,
            gmres: GmresConfig::default(),
            tableau: Ark2Tableau::ark232(),
            filter: 0.0,
            microphysics: None,
            precip,
        }
    }

    /// Advance by one step of `self.dt` with an optional constant tendency.
    pub fn step(&mut self, coupling: Option<&[f64]>) -> Result<StepStats> {
        let (data, stats) = step_ark2(
            self.state.as_slice(),
            self.dt,
            &self.model,
            self.implicit,
            coupling,
            &self.gmres,
            &self.tableau,
        )?;
        let mut next = PrognosticState::from_vec(self.state.dim(), self.state.len(), data);
        if self.filter > 0.0 {
            next = apply_filter(&next, self.filter, &self.model.mesh)?;
        }
        self.model.enforce_no_flux(&mut next);
        if let Some(params) = &self.microphysics {
            let rain = apply_microphysics(&mut next, &self.model, self.dt, params)?;
            for (a, r) in self.precip.iter_mut().zip(rain) {
                *a += r;
            }
        }
        self.state = next;
        self.time += self.dt;
        Ok(stats)
    }
}
