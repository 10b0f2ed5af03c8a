//! Multiscale coupling: a coarse large-scale simulator (LSP) relaxed toward
//! horizontal averages of embedded 2D small-scale simulators (SSPs), and the
//! SSPs relaxed toward the advanced LSP columns.
//!
//! Profiles are exchanged column by column through element-wise vertical
//! projections between the LSP and the (possibly finer) SSP vertical grids.

use std::sync::Arc;

use rayon::prelude::*;

use crate::dynamics::{
    balanced_density_perturbation, build_reference, DynamicsModel, PhysConstants, Profile, SpongeConfig,
};
use crate::error::{config_err, MmfError, Result};
use crate::grid::{BoxSpec, LglRule, Mesh};
use crate::linalg::{matmul, solve_dense};
use crate::microphysics::KesslerParams;
use crate::operators::{Field, PrognosticState};
use crate::timeint::{GmresConfig, Simulator};

/// Element-wise maps between one LSP vertical element and the `n_sl` SSP
/// elements that subdivide it, both of polynomial order `order`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerticalProjection {
    pub order: usize,
    pub n_sl: usize,
    pub s: f64,
    pub offsets: Vec<f64>,
    /// `(N+1) x n_sl (N+1)`, row-major.
    pub s_to_l: Vec<f64>,
    /// `n_sl (N+1) x (N+1)`, row-major.
    pub l_to_s: Vec<f64>,
}

/// Build the projection pair. `L->S` evaluates the LSP basis at the SSP
/// nodes. `S->L` is the L2 projection whose mixed and LSP mass matrices are
/// both integrated with the composite SSP quadrature, so `S->L` undoes
/// `L->S` exactly.
pub fn build_vertical_projection(order: usize, n_sl: usize) -> Result<VerticalProjection> {
    if n_sl == 0 {
        return config_err("SSP elements per LSP element must be at least 1");
    }
    let rule = LglRule::new(order)?;
    let np = order + 1;
    let ns = n_sl * np;
    let s = 1.0 / n_sl as f64;
    let offsets: Vec<f64> = (1..=n_sl).map(|k| (2 * k - 1) as f64 * s - 1.0).collect();
    let mut l_to_s = vec![0.0; ns * np];
    for (k, o) in offsets.iter().enumerate() {
        for i in 0..np {
            let row = rule.basis_at(s * rule.points[i] + o);
            l_to_s[(k * np + i) * np..(k * np + i + 1) * np].copy_from_slice(&row);
        }
    }
    let mut mixed = vec![0.0; np * ns];
    for i in 0..np {
        for k in 0..n_sl {
            for j in 0..np {
                mixed[i * ns + k * np + j] = s * rule.weights[j] * l_to_s[(k * np + j) * np + i];
            }
        }
    }
    let mass = matmul(&mixed, &l_to_s, np, ns, np);
    let s_to_l =
        solve_dense(&mass, np, &mixed, ns).ok_or_else(|| MmfError::Config("singular projection mass matrix".into()))?;
    Ok(VerticalProjection { order, n_sl, s, offsets, s_to_l, l_to_s })
}

impl VerticalProjection {
    fn lsp_elements(&self, len: usize, per: usize) -> Result<usize> {
        let n = self.order;
        if len < per * n + 1 || (len - 1) % (per * n) != 0 {
            return Err(MmfError::Shape(format!(
                "column of {len} values does not match order {n} with {per} element(s) per LSP element"
            )));
        }
        Ok((len - 1) / (per * n))
    }

    /// Interpolate an LSP column profile onto the SSP levels.
    pub fn project_column_l_to_s(&self, lsp: &[f64]) -> Result<Vec<f64>> {
        let n = self.order;
        let np = n + 1;
        let ne = self.lsp_elements(lsp.len(), 1)?;
        let len = ne * self.n_sl * n + 1;
        let (mut acc, mut cnt) = (vec![0.0; len], vec![0.0; len]);
        for e in 0..ne {
            let q = &lsp[e * n..e * n + np];
            for k in 0..self.n_sl {
                for i in 0..np {
                    let row = &self.l_to_s[(k * np + i) * np..(k * np + i + 1) * np];
                    let g = (e * self.n_sl + k) * n + i;
                    acc[g] += row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
                    cnt[g] += 1.0;
                }
            }
        }
        Ok(acc.iter().zip(&cnt).map(|(a, c)| a / c).collect())
    }

    /// L2-project an SSP column profile onto the LSP levels.
    pub fn project_column_s_to_l(&self, ssp: &[f64]) -> Result<Vec<f64>> {
        let n = self.order;
        let np = n + 1;
        let ns = self.n_sl * np;
        let ne = self.lsp_elements(ssp.len(), self.n_sl)?;
        let len = ne * n + 1;
        let (mut acc, mut cnt) = (vec![0.0; len], vec![0.0; len]);
        for e in 0..ne {
            for i in 0..np {
                let mut v = 0.0;
                for k in 0..self.n_sl {
                    for j in 0..np {
                        v += self.s_to_l[i * ns + k * np + j] * ssp[(e * self.n_sl + k) * n + j];
                    }
                }
                acc[e * n + i] += v;
                cnt[e * n + i] += 1.0;
            }
        }
        Ok(acc.iter().zip(&cnt).map(|(a, c)| a / c).collect())
    }
}

/// Quadrature-weighted horizontal mean of a nodal field at every level.
pub fn horizontal_average(mesh: &Mesh, field: &[f64]) -> Vec<f64> {
    let weights: Vec<f64> = (0..mesh.n_columns()).map(|c| mesh.column_weight(c)).collect();
    let total: f64 = weights.iter().sum();
    (0..mesh.n_levels())
        .map(|level| weights.iter().enumerate().map(|(c, w)| w * field[mesh.node(c, level)]).sum::<f64>() / total)
        .collect()
}

/// Prognostic variables that can take part in the coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoupledVar {
    Rho,
    /// Velocity along the SSP slab (x).
    U,
    W,
    Theta,
    Qv,
    Qc,
    Qr,
}

impl CoupledVar {
    pub const ALL: [CoupledVar; 7] = [
        CoupledVar::Rho,
        CoupledVar::U,
        CoupledVar::W,
        CoupledVar::Theta,
        CoupledVar::Qv,
        CoupledVar::Qc,
        CoupledVar::Qr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn field(self, dim: usize) -> Field {
        match self {
            CoupledVar::Rho => Field::Rho,
            CoupledVar::U => Field::Vel(0),
            CoupledVar::W => Field::Vel(dim - 1),
            CoupledVar::Theta => Field::Theta,
            CoupledVar::Qv => Field::Qv,
            CoupledVar::Qc => Field::Qc,
            CoupledVar::Qr => Field::Qr,
        }
    }

    pub fn name(self) -> &'static str {
        ["rho_p", "u", "w", "theta_vp", "qv_p", "qc", "qr"][self.index()]
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| MmfError::Config(format!("unknown coupled variable '{s}'")))
    }

    /// Scale below which residuals are measured in absolute terms.
    pub fn residual_floor(self) -> f64 {
        [1e-3, 1.0, 1.0, 1.0, 1e-3, 1e-4, 1e-4][self.index()]
    }
}

/// Horizontal velocity, `theta_v'`, and the three mixing ratios.
pub fn default_mask() -> Vec<CoupledVar> {
    vec![CoupledVar::U, CoupledVar::Theta, CoupledVar::Qv, CoupledVar::Qc, CoupledVar::Qr]
}

/// One vertical profile per [`CoupledVar`] (empty when not needed).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Profiles {
    pub vars: [Vec<f64>; 7],
}

impl Profiles {
    pub fn get(&self, v: CoupledVar) -> &[f64] {
        &self.vars[v.index()]
    }
}

/// `F = (<q> - Q) / dT` on the coupled variables, zero elsewhere.
pub fn forcing_tendency(q: &Profiles, avg: &Profiles, big_dt: f64, mask: &[CoupledVar]) -> Profiles {
    relaxation(avg, q, big_dt, mask)
}

/// `f = (Q^{n+1} - <q>) / dT` on the coupled variables, zero elsewhere.
pub fn feedback_tendency(q_next: &Profiles, avg: &Profiles, big_dt: f64, mask: &[CoupledVar]) -> Profiles {
    relaxation(q_next, avg, big_dt, mask)
}

fn relaxation(to: &Profiles, from: &Profiles, big_dt: f64, mask: &[CoupledVar]) -> Profiles {
    let mut out = Profiles::default();
    for v in CoupledVar::ALL {
        let len = to.get(v).len().max(from.get(v).len());
        out.vars[v.index()] = if mask.contains(&v) && v != CoupledVar::Rho {
            to.get(v).iter().zip(from.get(v)).map(|(a, b)| (a - b) / big_dt).collect()
        } else {
            vec![0.0; len]
        };
    }
    out
}

/// Where SSPs are placed relative to the LSP grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One SSP per LSP element column, fed the element's quadrature mean.
    ElementColumn,
    /// One SSP per LSP grid column.
    GridColumn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmfConfig {
    pub ssp_length: f64,
    pub ssp_elements_x: usize,
    /// SSP vertical elements per LSP vertical element.
    pub n_sl: usize,
    /// SSP substeps per LSP step.
    pub substeps: usize,
    pub mask: Vec<CoupledVar>,
    pub granularity: Granularity,
    /// Size of the SSP worker pool.
    pub workers: usize,
}

impl Default for MmfConfig {
    fn default() -> Self {
        Self {
            ssp_length: 8000.0,
            ssp_elements_x: 10,
            n_sl: 2,
            substeps: 10,
            mask: default_mask(),
            granularity: Granularity::ElementColumn,
            workers: 1,
        }
    }
}

impl MmfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ssp_length > 0.0)
            || self.ssp_elements_x == 0
            || self.n_sl == 0
            || self.substeps == 0
            || self.workers == 0
        {
            return config_err(format!("invalid MMF settings {self:?}"));
        }
        Ok(())
    }
}

/// Settings shared by every SSP simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct SspSettings {
    pub constants: PhysConstants,
    pub sponge: Option<SpongeConfig>,
    pub filter: f64,
    pub microphysics: Option<KesslerParams>,
    pub gmres: GmresConfig,
    pub implicit: bool,
}

#[derive(Debug, Clone)]
pub struct SspInstance {
    pub id: usize,
    /// Horizontal position on the LSP grid the instance represents.
    pub anchor: [f64; 3],
    /// LSP grid columns and quadrature weights forming the target profile.
    pub lsp_columns: Vec<(usize, f64)>,
    pub sim: Simulator,
}

/// Column groups (column, weight) for each SSP and their anchors.
fn column_groups(lsp: &Mesh, granularity: Granularity) -> Vec<(Vec<(usize, f64)>, [f64; 3])> {
    let nx = lsp.axes[0].n_global;
    let anchor_of = |col: usize| lsp.coords(lsp.node(col, 0));
    match granularity {
        Granularity::GridColumn => (0..lsp.n_columns()).map(|c| (vec![(c, 1.0)], anchor_of(c))).collect(),
        Granularity::ElementColumn => {
            let ax = &lsp.axes[0];
            let np = ax.rule.n_points();
            let center = |a: &crate::grid::Axis, e: usize| (e as f64 + 0.5) * a.h;
            if lsp.dim == 2 {
                (0..ax.n_elem)
                    .map(|e| {
                        let cols = (0..np).map(|i| (ax.global(e, i), 0.5 * ax.rule.weights[i])).collect();
                        (cols, [center(ax, e), 0.0, 0.0])
                    })
                    .collect()
            } else {
                let ay = &lsp.axes[1];
                let mut out = Vec::new();
                for ey in 0..ay.n_elem {
                    for ex in 0..ax.n_elem {
                        let mut cols = Vec::with_capacity(np * np);
                        for j in 0..np {
                            for i in 0..np {
                                let w = 0.25 * ax.rule.weights[i] * ay.rule.weights[j];
                                cols.push((ax.global(ex, i) + nx * ay.global(ey, j), w));
                            }
                        }
                        out.push((cols, [center(ax, ex), center(ay, ey), 0.0]));
                    }
                }
                out
            }
        }
    }
}

/// Weighted mean over a column group at every LSP level for each variable.
fn group_profiles(mesh: &Mesh, state: &PrognosticState, group: &[(usize, f64)], vars: &[CoupledVar]) -> Profiles {
    let total: f64 = group.iter().map(|g| g.1).sum();
    let mut out = Profiles::default();
    for &v in vars {
        let f = state.field(v.field(mesh.dim));
        out.vars[v.index()] = (0..mesh.n_levels())
            .map(|level| group.iter().map(|&(c, w)| w * f[mesh.node(c, level)]).sum::<f64>() / total)
            .collect();
    }
    out
}

/// Create one SSP per column group, each initialized to the projected LSP
/// column profile replicated horizontally. Returns the instances and any
/// sizing warnings.
pub fn spawn_ssp_instances(
    lsp: &Simulator,
    cfg: &MmfConfig,
    profile: &dyn Profile,
    settings: &SspSettings,
) -> Result<(Vec<SspInstance>, Vec<String>)> {
    cfg.validate()?;
    let lmesh = &*lsp.model.mesh;
    let vert = lmesh.vertical();
    let order = vert.order();
    let mut warnings = Vec::new();
    let lsp_dx = lmesh.axes[0].h / lmesh.axes[0].order() as f64;
    if cfg.ssp_length < 2.0 * lsp_dx {
        warnings.push(format!(
            "SSP length {} m is below the smallest LSP-resolvable wavelength {} m",
            cfg.ssp_length,
            2.0 * lsp_dx
        ));
    }
    let smesh = Arc::new(Mesh::build_box(&BoxSpec::slab_2d(
        cfg.ssp_length,
        vert.length,
        cfg.ssp_elements_x,
        vert.n_elem * cfg.n_sl,
        order,
        true,
    ))?);
    let reference = Arc::new(build_reference(profile, &smesh, &settings.constants)?);
    let model = DynamicsModel::new(smesh.clone(), reference.clone(), settings.constants, settings.sponge);
    let proj = build_vertical_projection(order, cfg.n_sl)?;
    let dt = lsp.dt / cfg.substeps as f64;
    let init_vars = [CoupledVar::U, CoupledVar::Theta, CoupledVar::Qv, CoupledVar::Qc, CoupledVar::Qr];

    let mut out = Vec::new();
    for (id, (cols, anchor)) in column_groups(lmesh, cfg.granularity).into_iter().enumerate() {
        let prof = group_profiles(lmesh, &lsp.state, &cols, &init_vars);
        let mut state = PrognosticState::for_mesh(&smesh);
        for &v in &init_vars {
            let column = proj.project_column_l_to_s(prof.get(v))?;
            let f = state.field_mut(v.field(2));
            for (i, x) in f.iter_mut().enumerate() {
                *x = column[smesh.level_of(i)];
            }
        }
        let rho = balanced_density_perturbation(&reference, &settings.constants, state.field(Field::Theta));
        state.field_mut(Field::Rho).copy_from_slice(&rho);
        let mut sim = Simulator::new(model.clone(), state, dt);
        sim.filter = settings.filter;
        sim.microphysics = settings.microphysics;
        sim.gmres = settings.gmres;
        sim.implicit = settings.implicit;
        sim.time = lsp.time;
        out.push(SspInstance { id, anchor, lsp_columns: cols, sim });
    }
    Ok((out, warnings))
}

/// One row of the coupling-condition diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub ssp: usize,
    pub level: usize,
    pub var: CoupledVar,
    /// `|Q - <q>|`.
    pub abs: f64,
    /// `|Q - <q>| / (|Q| + floor)`.
    pub rel: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CouplingReport {
    /// Time at which the residual was measured (start of the step).
    pub time: f64,
    pub rows: Vec<ResidualRow>,
    pub gmres_iterations: usize,
}

impl CouplingReport {
    pub fn max_abs(&self, var: CoupledVar) -> f64 {
        self.rows.iter().filter(|r| r.var == var).fold(0.0, |m, r| m.max(r.abs))
    }

    pub fn max_rel(&self, var: CoupledVar) -> f64 {
        self.rows.iter().filter(|r| r.var == var).fold(0.0, |m, r| m.max(r.rel))
    }
}

/// The coupled system: one LSP and its SSP instances at a common time.
#[derive(Debug)]
pub struct MmfSystem {
    pub lsp: Simulator,
    pub ssps: Vec<SspInstance>,
    pub cfg: MmfConfig,
    pub projection: VerticalProjection,
    /// For each LSP column, the SSPs forcing it and their shares.
    share: Vec<Vec<(usize, f64)>>,
    pool: rayon::ThreadPool,
}

impl MmfSystem {
    pub fn new(lsp: Simulator, ssps: Vec<SspInstance>, cfg: MmfConfig) -> Result<Self> {
        cfg.validate()?;
        let projection = build_vertical_projection(lsp.model.mesh.vertical().order(), cfg.n_sl)?;
        let mut share = vec![Vec::new(); lsp.model.mesh.n_columns()];
        for (s, inst) in ssps.iter().enumerate() {
            for &(c, _) in &inst.lsp_columns {
                share[c].push((s, 0.0));
            }
            let sl = inst.sim.model.mesh.n_levels();
            if sl != (lsp.model.mesh.n_levels() - 1) * cfg.n_sl + 1 {
                return Err(MmfError::Shape(format!("SSP {s} has {sl} levels, inconsistent with the LSP column")));
            }
        }
        for entries in share.iter_mut() {
            // Fixed summation order regardless of how the instances are listed.
            entries.sort_by_key(|&(s, _)| ssps[s].id);
            let a = 1.0 / entries.len().max(1) as f64;
            entries.iter_mut().for_each(|e| e.1 = a);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| MmfError::Config(format!("worker pool: {e}")))?;
        Ok(Self { lsp, ssps, cfg, projection, share, pool })
    }

    pub fn time(&self) -> f64 {
        self.lsp.time
    }

    /// Horizontal SSP means on the SSP levels.
    fn ssp_means(&self) -> Vec<Profiles> {
        self.ssps
            .iter()
            .map(|inst| {
                let mut p = Profiles::default();
                for &v in &self.cfg.mask {
                    p.vars[v.index()] = horizontal_average(&inst.sim.model.mesh, inst.sim.state.field(v.field(2)));
                }
                p
            })
            .collect()
    }

    fn to_lsp_levels(&self, p: &Profiles) -> Result<Profiles> {
        let mut out = Profiles::default();
        for &v in &self.cfg.mask {
            out.vars[v.index()] = self.projection.project_column_s_to_l(p.get(v))?;
        }
        Ok(out)
    }

    fn targets(&self, state: &PrognosticState) -> Vec<Profiles> {
        self.ssps
            .iter()
            .map(|inst| group_profiles(&self.lsp.model.mesh, state, &inst.lsp_columns, &self.cfg.mask))
            .collect()
    }

    /// Coupling-condition residuals at the current time.
    pub fn residuals(&self) -> Result<CouplingReport> {
        let means = self.ssp_means();
        let lsp_means = means.iter().map(|m| self.to_lsp_levels(m)).collect::<Result<Vec<_>>>()?;
        Ok(self.report(&self.targets(&self.lsp.state), &lsp_means))
    }

    fn report(&self, targets: &[Profiles], means: &[Profiles]) -> CouplingReport {
        let mut rows = Vec::new();
        for (s, (t, m)) in targets.iter().zip(means).enumerate() {
            for &v in &self.cfg.mask {
                for (level, (q, a)) in t.get(v).iter().zip(m.get(v)).enumerate() {
                    let abs = (q - a).abs();
                    rows.push(ResidualRow { ssp: s, level, var: v, abs, rel: abs / (q.abs() + v.residual_floor()) });
                }
            }
        }
        CouplingReport { time: self.lsp.time, rows, gmres_iterations: 0 }
    }

    /// One large-scale step: force the LSP toward the SSP means, advance it,
    /// then advance every SSP `substeps` times toward the new LSP columns.
    /// On error nothing is modified.
    pub fn step(&mut self) -> Result<CouplingReport> {
        let big_dt = self.lsp.dt;
        let mask = self.cfg.mask.clone();
        let lmesh = self.lsp.model.mesh.clone();
        let dim = lmesh.dim;
        let means = self.ssp_means();
        let lsp_means = means.iter().map(|m| self.to_lsp_levels(m)).collect::<Result<Vec<_>>>()?;
        let mut report = self.report(&self.targets(&self.lsp.state), &lsp_means);

        let mut forcing = PrognosticState::for_mesh(&lmesh);
        for (c, entries) in self.share.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            let own = group_profiles(&lmesh, &self.lsp.state, &[(c, 1.0)], &mask);
            for &(s, a) in entries {
                let f = forcing_tendency(&own, &lsp_means[s], big_dt, &mask);
                for &v in &mask {
                    let block = forcing.field_mut(v.field(dim));
                    for (level, x) in f.get(v).iter().enumerate() {
                        block[lmesh.node(c, level)] += a * x;
                    }
                }
            }
        }
        let mut lsp = self.lsp.clone();
        report.gmres_iterations += lsp.step(Some(forcing.as_slice()))?.gmres_iterations;

        let targets = self.targets(&lsp.state);
        let mut feedbacks = Vec::with_capacity(self.ssps.len());
        for (s, inst) in self.ssps.iter().enumerate() {
            let mut next = Profiles::default();
            for &v in &mask {
                next.vars[v.index()] = self.projection.project_column_l_to_s(targets[s].get(v))?;
            }
            let f = feedback_tendency(&next, &means[s], big_dt, &mask);
            let smesh = &inst.sim.model.mesh;
            let mut field = PrognosticState::for_mesh(smesh);
            for &v in &mask {
                let prof = f.get(v);
                for (i, x) in field.field_mut(v.field(2)).iter_mut().enumerate() {
                    *x = prof[smesh.level_of(i)];
                }
            }
            feedbacks.push(field);
        }

        let substeps = self.cfg.substeps;
        let ssps = &self.ssps;
        let advanced: Vec<(Simulator, usize)> = self.pool.install(|| {
            ssps.par_iter()
                .zip(feedbacks.par_iter())
                .map(|(inst, f)| {
                    let mut sim = inst.sim.clone();
                    let mut iters = 0;
                    for _ in 0..substeps {
                        iters += sim.step(Some(f.as_slice()))?.gmres_iterations;
                    }
                    sim.time = lsp.time;
                    Ok((sim, iters))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (inst, (sim, iters)) in self.ssps.iter_mut().zip(advanced) {
            inst.sim = sim;
            report.gmres_iterations += iters;
        }
        self.lsp = lsp;
        Ok(report)
    }
}
