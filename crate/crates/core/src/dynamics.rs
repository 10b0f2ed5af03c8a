//! Moist compressible dynamics in perturbation form about a hydrostatic
//! reference: the full operator `S(q)`, its linearization `L`, the gas law,
//! the Rayleigh sponge and the Boyd-Vandeven modal filter.

use std::sync::Arc;

use crate::error::{config_err, MmfError, Result};
use crate::grid::{legendre, LglRule, Mesh};
use crate::operators::{
    apply_inverse_mass, diff_local, gather, laplacian_local, scatter_weighted, weak_gradient, Field, PrognosticState,
};

/// Physical constants in SI units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConstants {
    pub g: f64,
    pub r_d: f64,
    pub r_v: f64,
    pub cp: f64,
    /// Exner reference pressure.
    pub p00: f64,
    /// Kinematic viscosity.
    pub nu: f64,
    /// Latent heat of vaporization.
    pub lv: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        Self { g: 9.81, r_d: 287.0, r_v: 461.5, cp: 1004.0, p00: 1.0e5, nu: 0.0, lv: 2.5e6 }
    }
}

impl PhysConstants {
    /// `R_v / R_d - 1`.
    pub fn eps(&self) -> f64 {
        self.r_v / self.r_d - 1.0
    }

    pub fn cv(&self) -> f64 {
        self.cp - self.r_d
    }

    pub fn kappa(&self) -> f64 {
        self.r_d / self.cp
    }

    /// `c_p / c_v`.
    pub fn gamma(&self) -> f64 {
        self.cp / self.cv()
    }

    pub fn virtual_temperature(&self, t: f64, qv: f64) -> f64 {
        t * (1.0 + self.eps() * qv)
    }

    /// `p = rho R_d T_v`.
    pub fn pressure_from_temperature(&self, rho: f64, t: f64, qv: f64) -> Result<f64> {
        if !(rho > 0.0) {
            return Err(MmfError::State(format!("non-positive density {rho}")));
        }
        Ok(rho * self.r_d * self.virtual_temperature(t, qv))
    }

    /// Gas law in terms of virtual potential temperature,
    /// `p = p00 (rho R_d theta_v / p00)^(c_p / c_v)`.
    pub fn pressure_from_theta_v(&self, rho: f64, theta_v: f64) -> Result<f64> {
        if !(rho > 0.0) {
            return Err(MmfError::State(format!("non-positive density {rho}")));
        }
        Ok(self.p00 * (rho * self.r_d * theta_v / self.p00).powf(self.gamma()))
    }

    /// Inverse of [`Self::pressure_from_theta_v`] for the density.
    pub fn density_from_theta_v(&self, p: f64, theta_v: f64) -> f64 {
        self.p00 / (self.r_d * theta_v) * (p / self.p00).powf(1.0 / self.gamma())
    }

    /// Exner function `(p / p00)^(R_d / c_p)`.
    pub fn exner(&self, p: f64) -> f64 {
        (p / self.p00).powf(self.kappa())
    }
}

/// Monotone piecewise-cubic (Fritsch-Carlson) interpolant.
#[derive(Debug, Clone, PartialEq)]
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut d = vec![0.0; n];
        if n >= 2 {
            let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k])).collect();
            d[0] = delta[0];
            d[n - 1] = delta[n - 2];
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] <= 0.0 {
                    d[k] = 0.0;
                } else {
                    let h0 = x[k] - x[k - 1];
                    let h1 = x[k + 1] - x[k];
                    let w1 = 2.0 * h1 + h0;
                    let w2 = h1 + 2.0 * h0;
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
        }
        Self { x, y, d }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if n == 1 {
            return self.y[0];
        }
        let k = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }
}

/// Vertical thermodynamic profile used to build a reference state.
pub trait Profile {
    /// Dry potential temperature (K).
    fn theta(&self, z: f64) -> Result<f64>;
    /// Water vapor mixing ratio (kg/kg).
    fn qv(&self, z: f64) -> Result<f64>;
    /// Background wind `(u, v)` (m/s).
    fn wind(&self, z: f64) -> Result<(f64, f64)>;
    fn surface_pressure(&self) -> f64;
    /// Highest height covered.
    fn top(&self) -> f64;
}

/// Tabulated sounding with monotone cubic interpolation in height.
#[derive(Debug, Clone, PartialEq)]
pub struct Sounding {
    pub z: Vec<f64>,
    pub p_surf: f64,
    theta: Pchip,
    qv: Pchip,
    u: Pchip,
    v: Pchip,
}

impl Sounding {
    pub fn new(z: Vec<f64>, theta: Vec<f64>, qv: Vec<f64>, u: Vec<f64>, v: Vec<f64>, p_surf: f64) -> Result<Self> {
        let n = z.len();
        if n < 2 || [theta.len(), qv.len(), u.len(), v.len()].iter().any(|&l| l != n) {
            return config_err("sounding needs at least two levels and equal-length columns");
        }
        if z.windows(2).any(|w| w[1] <= w[0]) {
            return config_err("sounding heights must be strictly increasing");
        }
        if theta.iter().any(|&t| !(t > 0.0)) || qv.iter().any(|&q| q < 0.0) || !(p_surf > 0.0) {
            return config_err("sounding has non-physical values");
        }
        Ok(Self {
            theta: Pchip::new(z.clone(), theta),
            qv: Pchip::new(z.clone(), qv),
            u: Pchip::new(z.clone(), u),
            v: Pchip::new(z.clone(), v),
            z,
            p_surf,
        })
    }

    /// Parse the plain-text format: one header line, then
    /// `z_m theta_K qv_kgkg u_ms v_ms` rows. The first data row may carry a
    /// sixth column with the surface pressure in Pa (default `1e5`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        lines.next().ok_or_else(|| MmfError::Config("empty sounding file".into()))?;
        let (mut z, mut th, mut qv, mut u, mut v) = (vec![], vec![], vec![], vec![], vec![]);
        let mut p_surf = 1.0e5;
        for (row, line) in lines.enumerate() {
            let vals = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| MmfError::Config(format!("sounding row {}: {e}", row + 1)))?;
            match (vals.len(), row) {
                (5, _) => {}
                (6, 0) => p_surf = vals[5],
                (k, _) => return config_err(format!("sounding row {} has {k} columns", row + 1)),
            }
            z.push(vals[0]);
            th.push(vals[1]);
            qv.push(vals[2]);
            u.push(vals[3]);
            v.push(vals[4]);
        }
        Self::new(z, th, qv, u, v, p_surf)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("z_m theta_K qv_kgkg u_ms v_ms p_surf_Pa\n");
        for (k, &z) in self.z.iter().enumerate() {
            s.push_str(&format!(
                "{:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
                z, self.theta.y[k], self.qv.y[k], self.u.y[k], self.v.y[k]
            ));
            if k == 0 {
                s.push_str(&format!(" {:.17e}", self.p_surf));
            }
            s.push('\n');
        }
        s
    }

    fn check(&self, z: f64) -> Result<()> {
        let tol = 1e-9 * (1.0 + self.z[self.z.len() - 1].abs());
        if z < self.z[0] - tol || z > self.z[self.z.len() - 1] + tol {
            return config_err(format!(
                "height {z} m outside sounding range [{}, {}]",
                self.z[0],
                self.z[self.z.len() - 1]
            ));
        }
        Ok(())
    }
}

impl Profile for Sounding {
    fn theta(&self, z: f64) -> Result<f64> {
        self.check(z)?;
        Ok(self.theta.eval(z))
    }
    fn qv(&self, z: f64) -> Result<f64> {
        self.check(z)?;
        Ok(self.qv.eval(z).max(0.0))
    }
    fn wind(&self, z: f64) -> Result<(f64, f64)> {
        self.check(z)?;
        Ok((self.u.eval(z), self.v.eval(z)))
    }
    fn surface_pressure(&self) -> f64 {
        self.p_surf
    }
    fn top(&self) -> f64 {
        self.z[self.z.len() - 1]
    }
}

/// Hydrostatically balanced reference profiles sampled per vertical level
/// and expanded to every global node.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceState {
    pub level_z: Vec<f64>,
    pub level_rho: Vec<f64>,
    pub level_theta_v: Vec<f64>,
    pub level_qv: Vec<f64>,
    pub level_p: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta_v: Vec<f64>,
    pub qv: Vec<f64>,
    pub p: Vec<f64>,
    /// Discrete vertical gradients of the reference `theta_v0` and `q_v0`.
    pub dtheta_dz: Vec<f64>,
    pub dqv_dz: Vec<f64>,
    /// `dp/drho` and `dp/dtheta_v` of the gas law at the reference.
    pub dp_drho: Vec<f64>,
    pub dp_dtheta: Vec<f64>,
}

impl ReferenceState {
    /// Expand per-level profiles onto the mesh nodes.
    pub fn from_levels(
        mesh: &Mesh,
        c: &PhysConstants,
        z: Vec<f64>,
        theta_v: Vec<f64>,
        qv: Vec<f64>,
        p: Vec<f64>,
    ) -> Self {
        let rho_l: Vec<f64> = p.iter().zip(&theta_v).map(|(&p, &t)| c.density_from_theta_v(p, t)).collect();
        // Re-evaluate the pressure through the gas law so that a zero
        // perturbation has an exactly zero pressure perturbation.
        let p_l: Vec<f64> = rho_l
            .iter()
            .zip(&theta_v)
            .map(|(&r, &t)| c.pressure_from_theta_v(r, t).expect("positive reference density"))
            .collect();
        let expand = |lv: &[f64]| -> Vec<f64> { (0..mesh.n_global()).map(|i| lv[mesh.level_of(i)]).collect() };
        let rho = expand(&rho_l);
        let th = expand(&theta_v);
        let q = expand(&qv);
        let pn = expand(&p_l);
        let dtheta_dz = weak_gradient(mesh, &th).pop().unwrap();
        let dqv_dz = weak_gradient(mesh, &q).pop().unwrap();
        let gamma = c.gamma();
        let dp_drho = (0..pn.len()).map(|i| gamma * pn[i] / rho[i]).collect();
        let dp_dtheta = (0..pn.len()).map(|i| gamma * pn[i] / th[i]).collect();
        Self {
            level_z: z,
            level_rho: rho_l,
            level_theta_v: theta_v,
            level_qv: qv,
            level_p: p_l,
            rho,
            theta_v: th,
            qv: q,
            p: pn,
            dtheta_dz,
            dqv_dz,
            dp_drho,
            dp_dtheta,
        }
    }
}

/// Build the hydrostatic reference by integrating the Exner form of
/// `dp/dz = -rho g`, `d pi / dz = -g / (c_p theta_v)`, with a high-order
/// Gauss-Lobatto rule between consecutive grid levels.
pub fn build_reference(profile: &dyn Profile, mesh: &Mesh, c: &PhysConstants) -> Result<ReferenceState> {
    let z: Vec<f64> = mesh.vertical().coords.clone();
    let ztop = *z.last().unwrap();
    if profile.top() + 1e-9 * (1.0 + ztop) < ztop {
        return config_err(format!("sounding top {} m below model top {ztop} m", profile.top()));
    }
    let theta_v_at = |zz: f64| -> Result<f64> { Ok(profile.theta(zz)? * (1.0 + c.eps() * profile.qv(zz)?)) };
    let quad = LglRule::new(16)?;
    let mut pi = vec![0.0; z.len()];
    pi[0] = c.exner(profile.surface_pressure());
    for k in 1..z.len() {
        let (a, b) = (z[k - 1], z[k]);
        let mut integral = 0.0;
        for (x, w) in quad.points.iter().zip(&quad.weights) {
            let zz = 0.5 * (a + b) + 0.5 * (b - a) * x;
            integral += w * 0.5 * (b - a) / theta_v_at(zz)?;
        }
        pi[k] = pi[k - 1] - c.g / c.cp * integral;
    }
    let p: Vec<f64> = pi.iter().map(|&v| c.p00 * v.powf(1.0 / c.kappa())).collect();
    let theta_v = z.iter().map(|&zz| theta_v_at(zz)).collect::<Result<Vec<_>>>()?;
    let qv = z.iter().map(|&zz| profile.qv(zz)).collect::<Result<Vec<_>>>()?;
    if p.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(MmfError::State("reference pressure became non-positive".into()));
    }
    Ok(ReferenceState::from_levels(mesh, c, z, theta_v, qv, p))
}

/// Density perturbation that keeps the reference pressure unchanged for the
/// given `theta_v` perturbation (a pressure-balanced thermal).
pub fn balanced_density_perturbation(reference: &ReferenceState, c: &PhysConstants, theta_vp: &[f64]) -> Vec<f64> {
    theta_vp
        .iter()
        .enumerate()
        .map(|(i, th)| c.density_from_theta_v(reference.p[i], reference.theta_v[i] + th) - reference.rho[i])
        .collect()
}

/// Rayleigh damping layer below the model top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpongeConfig {
    pub z_bottom: f64,
    pub z_top: f64,
    pub r_max: f64,
}

impl SpongeConfig {
    pub fn new(z_bottom: f64, z_top: f64, r_max: f64) -> Result<Self> {
        if !(0.0 <= z_bottom && z_bottom < z_top) || !(r_max >= 0.0) {
            return config_err(format!("invalid sponge z_b={z_bottom} z_t={z_top} r_max={r_max}"));
        }
        Ok(Self { z_bottom, z_top, r_max })
    }
}

/// `R_w(z) = R_max sin^2(pi/2 (z - z_b)/(z_t - z_b))` above `z_b`, zero below.
pub fn sponge_profile(z: f64, cfg: &SpongeConfig) -> f64 {
    if z <= cfg.z_bottom {
        return 0.0;
    }
    let s = ((z - cfg.z_bottom) / (cfg.z_top - cfg.z_bottom)).min(1.0);
    // sin^2(pi s / 2) = (1 - cos(pi s)) / 2, with the cosine written so the
    // ends and the midpoint come out exact.
    cfg.r_max * 0.5 * (1.0 - (std::f64::consts::PI * (0.5 - s)).sin())
}

/// Everything needed to evaluate `S(q)` and `L(q)` on one mesh.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub mesh: Arc<Mesh>,
    pub reference: Arc<ReferenceState>,
    pub constants: PhysConstants,
    /// Per-node damping rate `R_w`.
    pub sponge: Vec<f64>,
    /// When false both operators return zero (pure-forcing runs).
    pub enabled: bool,
    normal_mask: Vec<Vec<bool>>,
}

impl DynamicsModel {
    pub fn new(
        mesh: Arc<Mesh>,
        reference: Arc<ReferenceState>,
        constants: PhysConstants,
        sponge: Option<SpongeConfig>,
    ) -> Self {
        let sponge_rate = match sponge {
            Some(cfg) => (0..mesh.n_global()).map(|i| sponge_profile(mesh.z(i), &cfg)).collect(),
            None => vec![0.0; mesh.n_global()],
        };
        let normal_mask = normal_velocity_mask(&mesh);
        Self { mesh, reference, constants, sponge: sponge_rate, enabled: true, normal_mask }
    }

    fn check_state(&self, q: &PrognosticState) -> Result<()> {
        if q.len() != self.mesh.n_global() || q.dim() != self.mesh.dim {
            return Err(MmfError::Shape(format!(
                "state has {} nodes in {}D, mesh has {} in {}D",
                q.len(),
                q.dim(),
                self.mesh.n_global(),
                self.mesh.dim
            )));
        }
        Ok(())
    }

    /// Zero the velocity component normal to every non-periodic boundary.
    pub fn enforce_no_flux(&self, q: &mut PrognosticState) {
        self.mask_slice(q.as_mut_slice());
    }

    fn mask_slice(&self, q: &mut [f64]) {
        let dim = self.mesh.dim;
        let n = self.mesh.n_global();
        for (a, mask) in self.normal_mask.iter().enumerate() {
            let k = Field::Vel(a).index(dim);
            for (v, &m) in q[k * n..(k + 1) * n].iter_mut().zip(mask) {
                if m {
                    *v = 0.0;
                }
            }
        }
    }

    /// Pressure perturbation `p(rho, theta_v) - p_0`.
    pub fn pressure_perturbation(&self, q: &PrognosticState) -> Result<Vec<f64>> {
        self.pressure_from_fields(q.field(Field::Rho), q.field(Field::Theta))
    }

    fn pressure_from_fields(&self, rho_p: &[f64], th: &[f64]) -> Result<Vec<f64>> {
        let r = &self.reference;
        (0..rho_p.len())
            .map(|i| {
                let rho = r.rho[i] + rho_p[i];
                if !(rho > 0.0) {
                    return Err(MmfError::State(format!("vacuum: total density {rho} at node {i}")));
                }
                Ok(self.constants.pressure_from_theta_v(rho, r.theta_v[i] + th[i])? - r.p[i])
            })
            .collect()
    }

    /// Full nonlinear tendency `S(q)` without microphysical sources.
    pub fn rhs(&self, q: &PrognosticState, out: &mut PrognosticState) -> Result<()> {
        self.check_state(q)?;
        self.rhs_slice(q.as_slice(), out.as_mut_slice())
    }

    /// [`Self::rhs`] on flat state vectors.
    pub fn rhs_slice(&self, q: &[f64], out: &mut [f64]) -> Result<()> {
        let nf = 5 + self.mesh.dim;
        if q.len() != nf * self.mesh.n_global() || out.len() != q.len() {
            return Err(MmfError::Shape(format!("state vector of length {} does not fit the mesh", q.len())));
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        if !self.enabled {
            return Ok(());
        }
        let mesh = &*self.mesh;
        let r = &*self.reference;
        let c = &self.constants;
        let dim = mesh.dim;
        let n = mesh.n_global();
        let nl = mesh.n_local();
        let fld = |f: Field| &q[f.index(dim) * n..(f.index(dim) + 1) * n];

        let rho_p = fld(Field::Rho);
        let p_pert = self.pressure_from_fields(rho_p, fld(Field::Theta))?;
        let rho_tot: Vec<f64> = (0..n).map(|i| r.rho[i] + rho_p[i]).collect();
        let vel: Vec<&[f64]> = (0..dim).map(|a| fld(Field::Vel(a))).collect();
        let flux: Vec<Vec<f64>> = vel.iter().map(|u| (0..n).map(|i| rho_tot[i] * u[i]).collect()).collect();
        let th_p = fld(Field::Theta);
        let qv_p = fld(Field::Qv);
        let theta_tot: Vec<f64> = (0..n).map(|i| r.theta_v[i] + th_p[i]).collect();
        let qv_tot: Vec<f64> = (0..n).map(|i| r.qv[i] + qv_p[i]).collect();
        // Advected scalars: velocity components, theta_v, q_v, q_c, q_r.
        let mut adv_src: Vec<&[f64]> = vel.clone();
        adv_src.push(&theta_tot);
        adv_src.push(&qv_tot);
        adv_src.push(fld(Field::Qc));
        adv_src.push(fld(Field::Qr));
        let out_fields: Vec<usize> = (0..dim)
            .map(|a| Field::Vel(a).index(dim))
            .chain([Field::Theta, Field::Qv, Field::Qc, Field::Qr].iter().map(|f| f.index(dim)))
            .collect();
        // Diffused fields: perturbations only.
        let mut diff_src: Vec<&[f64]> = vel.clone();
        diff_src.extend([th_p, qv_p, fld(Field::Qc), fld(Field::Qr)]);
        let nu = c.nu;

        let acc = out;
        let mut u_loc = vec![vec![0.0; nl]; dim];
        let mut rho_loc = vec![0.0; nl];
        let mut s_loc = vec![0.0; nl];
        let mut d = vec![0.0; nl];
        let mut t_loc = vec![0.0; nl];
        let (mut g1, mut g2, mut lap) = (vec![0.0; nl], vec![0.0; nl], vec![0.0; nl]);

        for e in 0..mesh.n_elements() {
            let nodes = mesh.element_nodes(e);
            for a in 0..dim {
                gather(nodes, vel[a], &mut u_loc[a]);
            }
            gather(nodes, &rho_tot, &mut rho_loc);

            // continuity
            t_loc.iter_mut().for_each(|v| *v = 0.0);
            for (a, f) in flux.iter().enumerate() {
                gather(nodes, f, &mut s_loc);
                diff_local(mesh, a, &s_loc, &mut d);
                for (t, dv) in t_loc.iter_mut().zip(&d) {
                    *t -= dv;
                }
            }
            scatter_weighted(mesh, nodes, &t_loc, &mut acc[0..n]);

            // pressure gradient
            gather(nodes, &p_pert, &mut s_loc);
            for a in 0..dim {
                diff_local(mesh, a, &s_loc, &mut d);
                let fi = Field::Vel(a).index(dim);
                for l in 0..nl {
                    d[l] = -d[l] / rho_loc[l];
                }
                scatter_weighted(mesh, nodes, &d, &mut acc[fi * n..(fi + 1) * n]);
            }

            // advection
            for (src, &fi) in adv_src.iter().zip(&out_fields) {
                gather(nodes, src, &mut s_loc);
                t_loc.iter_mut().for_each(|v| *v = 0.0);
                for a in 0..dim {
                    diff_local(mesh, a, &s_loc, &mut d);
                    for l in 0..nl {
                        t_loc[l] -= u_loc[a][l] * d[l];
                    }
                }
                scatter_weighted(mesh, nodes, &t_loc, &mut acc[fi * n..(fi + 1) * n]);
            }

            // viscosity
            if nu != 0.0 {
                for (src, &fi) in diff_src.iter().zip(&out_fields) {
                    gather(nodes, src, &mut s_loc);
                    laplacian_local(mesh, &s_loc, &mut g1, &mut g2, &mut lap);
                    let block = &mut acc[fi * n..(fi + 1) * n];
                    for (&g, v) in nodes.iter().zip(&lap) {
                        block[g] += nu * v;
                    }
                }
            }
        }
        for k in 0..nf {
            apply_inverse_mass(mesh, &mut acc[k * n..(k + 1) * n]);
        }

        // buoyancy and sponge act pointwise on the vertical momentum
        let wi = Field::Vel(dim - 1).index(dim);
        let eps = c.eps();
        let qc = fld(Field::Qc);
        let qr = fld(Field::Qr);
        let w = fld(Field::Vel(dim - 1));
        for i in 0..n {
            let b = rho_p[i] / rho_tot[i] - eps * qv_p[i] + qc[i] + qr[i];
            acc[wi * n + i] -= c.g * b + self.sponge[i] * w[i];
        }
        self.mask_slice(acc);
        Ok(())
    }

    /// Linearization about the reference at rest: acoustic, gravity,
    /// buoyancy, background-gradient advection and sponge terms.
    pub fn linear(&self, q: &PrognosticState, out: &mut PrognosticState) {
        self.linear_slice(q.as_slice(), out.as_mut_slice());
    }

    /// [`Self::linear`] on flat state vectors (field-major, as in
    /// [`PrognosticState::as_slice`]).
    pub fn linear_slice(&self, q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if !self.enabled {
            return;
        }
        let mesh = &*self.mesh;
        let r = &*self.reference;
        let c = &self.constants;
        let dim = mesh.dim;
        let n = mesh.n_global();
        let nl = mesh.n_local();
        let fld = |f: Field| &q[f.index(dim) * n..(f.index(dim) + 1) * n];
        let rho_p = fld(Field::Rho);
        let th_p = fld(Field::Theta);
        let p_lin: Vec<f64> = (0..n).map(|i| r.dp_drho[i] * rho_p[i] + r.dp_dtheta[i] * th_p[i]).collect();
        let flux: Vec<Vec<f64>> =
            (0..dim).map(|a| fld(Field::Vel(a)).iter().zip(&r.rho).map(|(u, rho)| u * rho).collect()).collect();

        let acc = out;
        let (mut s_loc, mut d, mut t_loc, mut rho_loc) = (vec![0.0; nl], vec![0.0; nl], vec![0.0; nl], vec![0.0; nl]);
        for e in 0..mesh.n_elements() {
            let nodes = mesh.element_nodes(e);
            t_loc.iter_mut().for_each(|v| *v = 0.0);
            for (a, f) in flux.iter().enumerate() {
                gather(nodes, f, &mut s_loc);
                diff_local(mesh, a, &s_loc, &mut d);
                for (t, dv) in t_loc.iter_mut().zip(&d) {
                    *t -= dv;
                }
            }
            scatter_weighted(mesh, nodes, &t_loc, &mut acc[0..n]);
            gather(nodes, &p_lin, &mut s_loc);
            gather(nodes, &r.rho, &mut rho_loc);
            for a in 0..dim {
                diff_local(mesh, a, &s_loc, &mut d);
                for l in 0..nl {
                    d[l] = -d[l] / rho_loc[l];
                }
                let fi = Field::Vel(a).index(dim);
                scatter_weighted(mesh, nodes, &d, &mut acc[fi * n..(fi + 1) * n]);
            }
        }
        for k in 0..=dim {
            apply_inverse_mass(mesh, &mut acc[k * n..(k + 1) * n]);
        }
        let wi = Field::Vel(dim - 1).index(dim);
        let ti = Field::Theta.index(dim);
        let qi = Field::Qv.index(dim);
        let w = fld(Field::Vel(dim - 1));
        for i in 0..n {
            acc[wi * n + i] -= c.g * rho_p[i] / r.rho[i] + self.sponge[i] * w[i];
            acc[ti * n + i] = -w[i] * r.dtheta_dz[i];
            acc[qi * n + i] = -w[i] * r.dqv_dz[i];
        }
        self.mask_slice(acc);
    }
}

fn normal_velocity_mask(mesh: &Mesh) -> Vec<Vec<bool>> {
    let dim = mesh.dim;
    let sizes: Vec<usize> = mesh.axes.iter().map(|a| a.n_global).collect();
    (0..dim)
        .map(|a| {
            let ax = &mesh.axes[a];
            let stride: usize = sizes[..a].iter().product();
            (0..mesh.n_global())
                .map(|i| {
                    let k = (i / stride) % sizes[a];
                    !ax.periodic && (k == 0 || k + 1 == sizes[a])
                })
                .collect()
        })
        .collect()
}

/// `S(q)` as a free function over an explicit mesh/reference pair.
pub fn evaluate_rhs(
    state: &PrognosticState,
    reference: &ReferenceState,
    mesh: &Mesh,
    constants: &PhysConstants,
) -> Result<PrognosticState> {
    let model = DynamicsModel::new(Arc::new(mesh.clone()), Arc::new(reference.clone()), *constants, None);
    let mut out = PrognosticState::for_mesh(mesh);
    model.rhs(state, &mut out)?;
    Ok(out)
}

/// Order of the Boyd-Vandeven erfc-log transfer function.
pub const FILTER_ORDER: f64 = 12.0;

/// Boyd-Vandeven transfer `sigma(eta)` for normalized mode number `eta = k/N`.
pub fn boyd_vandeven(eta: f64, order: f64) -> f64 {
    if eta <= 0.0 {
        return 1.0;
    }
    if eta >= 1.0 {
        return 0.0;
    }
    let t = eta - 0.5;
    let chi = if t.abs() < 1e-8 { 1.0 } else { (-(1.0 - 4.0 * t * t).ln() / (4.0 * t * t)).sqrt() };
    0.5 * libm::erfc(2.0 * order.sqrt() * chi * t)
}

/// Per-axis nodal filter matrix `V diag((1-mu) + mu sigma) V^-1`.
pub(crate) fn filter_matrix(rule: &LglRule, strength: f64) -> Vec<f64> {
    let n = rule.order;
    let np = n + 1;
    let mut vander = vec![0.0; np * np];
    for i in 0..np {
        for k in 0..np {
            vander[i * np + k] = legendre(k, rule.points[i]).0;
        }
    }
    let inv = crate::linalg::invert(&vander, np).expect("Legendre Vandermonde on LGL nodes is invertible");
    let mut scaled = vander.clone();
    for i in 0..np {
        for k in 0..np {
            let sigma = boyd_vandeven(k as f64 / n as f64, FILTER_ORDER);
            scaled[i * np + k] *= (1.0 - strength) + strength * sigma;
        }
    }
    crate::linalg::matmul(&scaled, &inv, np, np, np)
}

/// Element-wise modal filter followed by mass-weighted reassembly.
pub fn apply_filter(state: &PrognosticState, strength: f64, mesh: &Mesh) -> Result<PrognosticState> {
    if !(0.0..=1.0).contains(&strength) {
        return config_err(format!("filter strength {strength} outside [0, 1]"));
    }
    if strength == 0.0 {
        return Ok(state.clone());
    }
    let mats: Vec<Vec<f64>> = mesh.axes.iter().map(|a| filter_matrix(&a.rule, strength)).collect();
    let nl = mesh.n_local();
    let nla = mesh.n_local_axis().to_vec();
    let n = mesh.n_global();
    let mut out = state.clone();
    let (mut loc, mut tmp) = (vec![0.0; nl], vec![0.0; nl]);
    for k in 0..state.n_fields() {
        let src = state.field_by_index(k);
        let mut acc = vec![0.0; n];
        for e in 0..mesh.n_elements() {
            let nodes = mesh.element_nodes(e);
            gather(nodes, src, &mut loc);
            for (a, mat) in mats.iter().enumerate() {
                let np = nla[a];
                let stride: usize = nla[..a].iter().product();
                for l in 0..nl {
                    let ia = (l / stride) % np;
                    let base = l - ia * stride;
                    tmp[l] = (0..np).map(|m| mat[ia * np + m] * loc[base + m * stride]).sum();
                }
                std::mem::swap(&mut loc, &mut tmp);
            }
            scatter_weighted(mesh, nodes, &loc, &mut acc);
        }
        apply_inverse_mass(mesh, &mut acc);
        out.as_mut_slice()[k * n..(k + 1) * n].copy_from_slice(&acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxSpec;
    use crate::operators::integrate;

    struct FnProfile<T: Fn(f64) -> f64> {
        theta: T,
        top: f64,
    }

    impl<T: Fn(f64) -> f64> Profile for FnProfile<T> {
        fn theta(&self, z: f64) -> Result<f64> {
            Ok((self.theta)(z))
        }
        fn qv(&self, _z: f64) -> Result<f64> {
            Ok(0.0)
        }
        fn wind(&self, _z: f64) -> Result<(f64, f64)> {
            Ok((0.0, 0.0))
        }
        fn surface_pressure(&self) -> f64 {
            1.0e5
        }
        fn top(&self) -> f64 {
            self.top
        }
    }

    fn column(lz: f64, nez: usize, n: usize) -> Mesh {
        Mesh::build_box(&BoxSpec::slab_2d(1000.0, lz, 1, nez, n, true)).unwrap()
    }

    #[test]
    fn gas_law_examples() {
        let c = PhysConstants::default();
        assert!((c.pressure_from_temperature(1.0, 300.0, 0.0).unwrap() - 86100.0).abs() < 1e-9);
        assert!((c.virtual_temperature(300.0, 0.01) - 301.824).abs() < 0.01);
        assert!((c.eps() - 0.608).abs() < 0.002);
        assert_eq!(c.virtual_temperature(287.0, 0.0), 287.0);
        assert!(c.pressure_from_temperature(0.0, 300.0, 0.0).is_err());
        assert!(c.pressure_from_theta_v(-1.0, 300.0).is_err());
        let p = c.pressure_from_theta_v(1.1, 301.0).unwrap();
        assert!((c.density_from_theta_v(p, 301.0) - 1.1).abs() < 1e-14);
    }

    #[test]
    fn isothermal_reference() {
        let c = PhysConstants::default();
        let t0 = 300.0;
        let prof = FnProfile { theta: move |z: f64| t0 * (c.g * z / (c.cp * t0)).exp(), top: 10_000.0 };
        let mesh = column(10_000.0, 10, 4);
        let r = build_reference(&prof, &mesh, &c).unwrap();
        assert_eq!(r.level_p[0], 1.0e5);
        let k = r.level_z.iter().position(|&z| (z - 1000.0).abs() < 1e-9).unwrap();
        let exact = 1.0e5 * (-c.g * 1000.0 / (c.r_d * t0)).exp();
        assert!((r.level_p[k] - exact).abs() < 1.0, "{} vs {exact}", r.level_p[k]);
    }

    #[test]
    fn adiabatic_reference_matches_polytrope() {
        let c = PhysConstants::default();
        let prof = FnProfile { theta: |_z: f64| 300.0, top: 24_000.0 };
        let mesh = column(24_000.0, 15, 4);
        let r = build_reference(&prof, &mesh, &c).unwrap();
        for (z, p) in r.level_z.iter().zip(&r.level_p) {
            let pi = 1.0 - c.g * z / (c.cp * 300.0);
            let exact = c.p00 * pi.powf(c.cp / c.r_d);
            assert!((p - exact).abs() / exact < 1e-6);
        }
    }

    #[test]
    fn reference_is_discretely_hydrostatic() {
        let c = PhysConstants::default();
        let prof = FnProfile { theta: |z: f64| 300.0 * (1e-4 * z / 9.81).exp(), top: 10_000.0 };
        let mesh = column(10_000.0, 25, 6);
        let r = build_reference(&prof, &mesh, &c).unwrap();
        let dp = weak_gradient(&mesh, &r.p).pop().unwrap();
        for i in 0..mesh.n_global() {
            if mesh.is_boundary_level(mesh.level_of(i)) {
                continue;
            }
            let target = -r.rho[i] * c.g;
            assert!(((dp[i] - target) / target).abs() < 1e-6, "{} {}", dp[i], target);
        }
    }

    #[test]
    fn short_sounding_is_rejected() {
        let s = Sounding::new(vec![0.0, 5000.0], vec![300.0, 310.0], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], 1e5)
            .unwrap();
        assert!(build_reference(&s, &column(10_000.0, 5, 4), &PhysConstants::default()).is_err());
        assert!(s.theta(6000.0).is_err());
    }

    #[test]
    fn sounding_text_round_trip() {
        let text = "z theta qv u v\n0 300 0.014 -5 0 99000\n1000 301 0.01 0 0\n24000 400 0 10 0\n";
        let s = Sounding::parse(text).unwrap();
        assert_eq!(s.p_surf, 99000.0);
        assert_eq!(Sounding::parse(&s.to_text()).unwrap(), s);
        assert!((s.theta(1000.0).unwrap() - 301.0).abs() < 1e-12);
        assert!(Sounding::parse("h\n0 300 0 0\n").is_err());
    }

    #[test]
    fn sponge_examples() {
        let cfg = SpongeConfig::new(18_000.0, 24_000.0, 0.25).unwrap();
        assert_eq!(sponge_profile(18_000.0, &cfg), 0.0);
        assert_eq!(sponge_profile(1_000.0, &cfg), 0.0);
        assert_eq!(sponge_profile(24_000.0, &cfg), 0.25);
        assert_eq!(sponge_profile(21_000.0, &cfg), 0.125);
        assert!(SpongeConfig::new(5.0, 4.0, 1.0).is_err());
    }

    #[test]
    fn filter_transfer_values() {
        assert_eq!(boyd_vandeven(0.0, FILTER_ORDER), 1.0);
        assert!(boyd_vandeven(1.0, FILTER_ORDER) < 1e-3);
        assert!((boyd_vandeven(0.5, FILTER_ORDER) - 0.5).abs() < 1e-12);
        let vals: Vec<f64> = (0..=8).map(|k| boyd_vandeven(k as f64 / 8.0, FILTER_ORDER)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn filter_examples() {
        let mesh = Mesh::build_box(&BoxSpec::slab_2d(3.0, 2.0, 3, 2, 4, true)).unwrap();
        let n = mesh.n_global();
        let mut s = PrognosticState::for_mesh(&mesh);
        for (i, v) in s.as_mut_slice().iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 50.0 - 1.0;
        }
        assert_eq!(apply_filter(&s, 0.0, &mesh).unwrap(), s);

        let mut c = PrognosticState::for_mesh(&mesh);
        c.as_mut_slice().iter_mut().for_each(|v| *v = 2.5);
        let fc = apply_filter(&c, 0.7, &mesh).unwrap();
        assert!(fc.as_slice().iter().all(|v| (v - 2.5).abs() < 1e-13));

        let f = apply_filter(&s, 0.3, &mesh).unwrap();
        for k in 0..s.n_fields() {
            let a = s.field_by_index(k);
            let b = f.field_by_index(k);
            let na: f64 = (0..n).map(|i| mesh.mass()[i] * a[i] * a[i]).sum();
            let nb: f64 = (0..n).map(|i| mesh.mass()[i] * b[i] * b[i]).sum();
            assert!(nb <= na + 1e-14);
            assert!((integrate(&mesh, a) - integrate(&mesh, b)).abs() < 1e-12);
        }
        assert!(apply_filter(&s, 1.5, &mesh).is_err());
    }

    fn model_2d(lx: f64, lz: f64, nex: usize, nez: usize, n: usize, theta: f64) -> DynamicsModel {
        let c = PhysConstants::default();
        let mesh = Mesh::build_box(&BoxSpec::slab_2d(lx, lz, nex, nez, n, true)).unwrap();
        let prof = FnProfile { theta: move |_z: f64| theta, top: lz };
        let r = build_reference(&prof, &mesh, &c).unwrap();
        DynamicsModel::new(Arc::new(mesh), Arc::new(r), c, None)
    }

    #[test]
    fn rest_state_has_zero_tendency() {
        let m = model_2d(10_000.0, 10_000.0, 4, 10, 4, 300.0);
        let q = PrognosticState::for_mesh(&m.mesh);
        let mut t = q.clone();
        m.rhs(&q, &mut t).unwrap();
        assert!(t.as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn uniform_flow_does_not_advect_constants() {
        let m = model_2d(10_000.0, 2_000.0, 4, 2, 4, 300.0);
        let mut q = PrognosticState::for_mesh(&m.mesh);
        q.field_mut(Field::Vel(0)).iter_mut().for_each(|v| *v = 10.0);
        q.field_mut(Field::Qc).iter_mut().for_each(|v| *v = 1e-3);
        let mut t = q.clone();
        m.rhs(&q, &mut t).unwrap();
        assert!(t.field(Field::Qc).iter().all(|v| v.abs() < 1e-14));
        assert!(t.field(Field::Rho).iter().all(|v| v.abs() < 1e-12));
        assert!(t.field(Field::Vel(0)).iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn acoustic_limit_matches_linear_analytic() {
        let lx = 10_000.0;
        let m = model_2d(lx, 100.0, 10, 1, 4, 300.0);
        let r = &m.reference;
        let k = 2.0 * std::f64::consts::PI / lx;
        let amp = 1e-6;
        let mut q = PrognosticState::for_mesh(&m.mesh);
        for i in 0..q.len() {
            q.field_mut(Field::Rho)[i] = amp * (k * m.mesh.coords(i)[0]).sin();
        }
        let mut t = q.clone();
        m.rhs(&q, &mut t).unwrap();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..q.len() {
            let x = m.mesh.coords(i)[0];
            let exact = -r.dp_drho[i] / r.rho[i] * amp * k * (k * x).cos();
            worst = worst.max((t.field(Field::Vel(0))[i] - exact).abs());
            scale = scale.max(exact.abs());
        }
        assert!(worst < 0.01 * scale, "{worst} vs {scale}");
        let mut lin = q.clone();
        m.linear(&q, &mut lin);
        let diff =
            lin.field(Field::Vel(0)).iter().zip(t.field(Field::Vel(0))).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3 * scale);
    }

    #[test]
    fn buoyancy_signs() {
        let m = model_2d(10_000.0, 4_000.0, 4, 4, 4, 300.0);
        let mid = m.mesh.node(m.mesh.n_columns() / 2, m.mesh.n_levels() / 2);
        let mut warm = PrognosticState::for_mesh(&m.mesh);
        warm.field_mut(Field::Rho)[mid] = -1e-3;
        let mut t = warm.clone();
        m.rhs(&warm, &mut t).unwrap();
        assert!(t.w()[mid] > 0.0);
        let mut loaded = PrognosticState::for_mesh(&m.mesh);
        loaded.field_mut(Field::Qc)[mid] = 1e-3;
        m.rhs(&loaded, &mut t).unwrap();
        assert!(t.w()[mid] < 0.0);
    }

    #[test]
    fn vacuum_is_a_state_error() {
        let m = model_2d(10_000.0, 2_000.0, 2, 2, 3, 300.0);
        let mut q = PrognosticState::for_mesh(&m.mesh);
        q.field_mut(Field::Rho)[3] = -10.0;
        let mut t = q.clone();
        assert!(matches!(m.rhs(&q, &mut t), Err(MmfError::State(_))));
    }

    #[test]
    fn sponge_leaves_continuity_untouched() {
        let mut m = model_2d(10_000.0, 6_000.0, 3, 3, 4, 300.0);
        let mut q = PrognosticState::for_mesh(&m.mesh);
        for i in 0..q.len() {
            let [x, _, z] = m.mesh.coords(i);
            q.field_mut(Field::Vel(1))[i] = (x / 1000.0).sin() * (std::f64::consts::PI * z / 6000.0).sin();
            q.field_mut(Field::Vel(0))[i] = (z / 1000.0).cos();
        }
        let mut a = q.clone();
        m.rhs(&q, &mut a).unwrap();
        m.sponge = (0..q.len())
            .map(|i| sponge_profile(m.mesh.z(i), &SpongeConfig::new(3000.0, 6000.0, 0.25).unwrap()))
            .collect();
        let mut b = q.clone();
        m.rhs(&q, &mut b).unwrap();
        assert_eq!(a.field(Field::Rho), b.field(Field::Rho));
        assert!(integrate(&m.mesh, a.field(Field::Rho)).abs() < 1e-9);
    }

    #[test]
    fn linear_operator_is_linear() {
        let m = model_2d(10_000.0, 6_000.0, 3, 3, 4, 300.0);
        let mut q = PrognosticState::for_mesh(&m.mesh);
        for (i, v) in q.as_mut_slice().iter_mut().enumerate() {
            *v = ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5;
        }
        let mut q2 = q.clone();
        q2.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
        let (mut a, mut b) = (q.clone(), q.clone());
        m.linear(&q, &mut a);
        m.linear(&q2, &mut b);
        let scale = a.as_slice().iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * scale);
        }
        let zero = PrognosticState::for_mesh(&m.mesh);
        m.linear(&zero, &mut a);
        assert!(a.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_damps_highest_mode() {
        let rule = LglRule::new(6).unwrap();
        let mat = filter_matrix(&rule, 1.0);
        let np = 7;
        let mode: Vec<f64> = rule.points.iter().map(|&x| legendre(6, x).0).collect();
        let out: Vec<f64> = (0..np).map(|i| (0..np).map(|j| mat[i * np + j] * mode[j]).sum()).collect();
        let ratio = out.iter().map(|v| v.abs()).fold(0.0, f64::max) / mode.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(ratio < 1e-3, "{ratio}");
    }
}
