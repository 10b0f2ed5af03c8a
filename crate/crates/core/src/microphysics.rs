//! Column-based Kessler warm-rain microphysics.
//!
//! Each grid column is processed independently: rain sedimentation,
//! autoconversion, accretion, saturation adjustment and rain evaporation.
//! Density and pressure are held fixed over a call; the latent heating
//! updates the dry potential temperature, from which `theta_v` is rebuilt.

use crate::dynamics::{DynamicsModel, PhysConstants};
use crate::error::{config_err, MmfError, Result};
use crate::operators::{Field, PrognosticState};

/// Tolerance below which negative mixing ratios are treated as rounding.
pub const NEGATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KesslerParams {
    /// Autoconversion rate (1/s).
    pub k1: f64,
    /// Autoconversion threshold (kg/kg).
    pub a: f64,
    /// Accretion rate (1/s).
    pub k2: f64,
    pub accretion_exp: f64,
    /// Terminal velocity `V_r = c (rho q_r)^e sqrt(rho_surf / rho)`, with `rho`
    /// in g/cm^3 inside the power law.
    pub vr_coef: f64,
    pub vr_exp: f64,
    /// Tetens `e_s = e0 exp(b (T - t0) / (T - t1))`.
    pub tetens_e0: f64,
    pub tetens_b: f64,
    pub tetens_t0: f64,
    pub tetens_t1: f64,
}

impl Default for KesslerParams {
    fn default() -> Self {
        Self {
            k1: 0.001,
            a: 0.001,
            k2: 2.2,
            accretion_exp: 0.875,
            vr_coef: 36.34,
            vr_exp: 0.1364,
            tetens_e0: 610.78,
            tetens_b: 17.27,
            tetens_t0: 273.15,
            tetens_t1: 35.86,
        }
    }
}

impl KesslerParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.k1, self.a, self.k2, self.accretion_exp, self.vr_coef, self.vr_exp, self.tetens_e0];
        if rates.iter().any(|v| !(*v >= 0.0)) {
            return config_err("Kessler rates and coefficients must be non-negative");
        }
        Ok(())
    }

    pub fn vapor_pressure(&self, t: f64) -> f64 {
        self.tetens_e0 * (self.tetens_b * (t - self.tetens_t0) / (t - self.tetens_t1)).exp()
    }

    /// Rain terminal velocity (m/s).
    pub fn terminal_velocity(&self, rho: f64, qr: f64, rho_surf: f64) -> f64 {
        if qr <= 0.0 {
            return 0.0;
        }
        self.vr_coef * (0.001 * rho * qr).powf(self.vr_exp) * (rho_surf / rho).sqrt()
    }
}

/// Saturation mixing ratio over liquid water.
pub fn saturation_mixing_ratio(p: f64, t: f64, params: &KesslerParams, c: &PhysConstants) -> Result<f64> {
    let es = params.vapor_pressure(t);
    if !(p > es) {
        return Err(MmfError::State(format!("pressure {p} Pa not above saturation vapor pressure {es} Pa")));
    }
    Ok(c.r_d / c.r_v * es / (p - es))
}

/// One vertical column of thermodynamic state, levels ascending in height.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnView {
    pub z: Vec<f64>,
    /// Vertical quadrature weight (m) of each level.
    pub dz: Vec<f64>,
    /// Total air density.
    pub rho: Vec<f64>,
    /// Total pressure.
    pub p: Vec<f64>,
    /// Total virtual potential temperature.
    pub theta_v: Vec<f64>,
    /// Total vapor mixing ratio.
    pub qv: Vec<f64>,
    pub qc: Vec<f64>,
    pub qr: Vec<f64>,
}

impl ColumnView {
    pub fn n_levels(&self) -> usize {
        self.z.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.z.len();
        let lens = [
            self.dz.len(),
            self.rho.len(),
            self.p.len(),
            self.theta_v.len(),
            self.qv.len(),
            self.qc.len(),
            self.qr.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(MmfError::Shape("column arrays must share a non-zero length".into()));
        }
        if self.z.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MmfError::Shape("column heights must be strictly increasing".into()));
        }
        for (name, v) in [("q_v", &self.qv), ("q_c", &self.qc), ("q_r", &self.qr)] {
            if let Some(x) = v.iter().find(|&&x| x < -NEGATIVE_TOL || !x.is_finite()) {
                return Err(MmfError::State(format!("invalid {name} = {x} entering microphysics")));
            }
        }
        Ok(())
    }

    /// Column water mass per unit area, `sum dz rho (q_v + q_c + q_r)`.
    pub fn water_path(&self) -> f64 {
        (0..self.n_levels()).map(|k| self.dz[k] * self.rho[k] * (self.qv[k] + self.qc[k] + self.qr[k])).sum()
    }
}

/// Upwind flux-form rain fall with CFL-limited substeps; returns the mass
/// (kg/m^2, equal to mm of water) leaving through the bottom.
fn sediment(col: &mut ColumnView, dt: f64, params: &KesslerParams) -> f64 {
    let n = col.n_levels();
    let rho_surf = col.rho[0];
    let mut t = 0.0;
    let mut rain = 0.0;
    let mut flux = vec![0.0; n];
    while t < dt {
        let mut dt_sub = dt - t;
        for k in 0..n {
            let v = params.terminal_velocity(col.rho[k], col.qr[k], rho_surf);
            flux[k] = col.rho[k] * col.qr[k] * v;
            if v > 0.0 {
                dt_sub = dt_sub.min(col.dz[k] / v);
            }
        }
        if flux.iter().all(|&f| f == 0.0) {
            break;
        }
        for k in 0..n {
            let inflow = if k + 1 < n { flux[k + 1] } else { 0.0 };
            let mass = col.dz[k] * col.rho[k] * col.qr[k] + dt_sub * (inflow - flux[k]);
            col.qr[k] = (mass / (col.dz[k] * col.rho[k])).max(0.0);
        }
        rain += dt_sub * flux[0];
        t += dt_sub;
    }
    rain
}

/// `1 + (L_v / c_p) dq_vs/dT`: converts a vapor excess at fixed pressure into
/// the condensate that restores saturation after latent heating.
fn latent_factor(t: f64, qvs: f64, params: &KesslerParams, c: &PhysConstants) -> f64 {
    let dqs_dt = qvs * params.tetens_b * (params.tetens_t0 - params.tetens_t1) / (t - params.tetens_t1).powi(2);
    1.0 + c.lv / c.cp * dqs_dt
}

/// Newton-iterated condensation/evaporation of cloud water toward
/// saturation at fixed pressure. Returns the net condensed amount per level.
pub fn saturation_adjustment(col: &mut ColumnView, params: &KesslerParams, c: &PhysConstants) -> Result<Vec<f64>> {
    col.check()?;
    let eps = c.eps();
    let mut net = vec![0.0; col.n_levels()];
    for k in 0..col.n_levels() {
        let pi = c.exner(col.p[k]);
        let mut theta = col.theta_v[k] / (1.0 + eps * col.qv[k]);
        for _ in 0..50 {
            let t = theta * pi;
            let qvs = saturation_mixing_ratio(col.p[k], t, params, c)?;
            let prod = (col.qv[k] - qvs) / latent_factor(t, qvs, params, c);
            let cond = prod.max(-col.qc[k]);
            if cond.abs() < 1e-16 {
                break;
            }
            col.qv[k] -= cond;
            col.qc[k] += cond;
            theta += c.lv / (c.cp * pi) * cond;
            net[k] += cond;
            if cond.abs() < 1e-14 {
                break;
            }
        }
        if net[k] != 0.0 {
            col.qc[k] = col.qc[k].max(0.0);
            col.theta_v[k] = theta * (1.0 + eps * col.qv[k]);
        }
    }
    Ok(net)
}

/// Advance one column by `dt`; returns surface rain (mm) for the step.
pub fn kessler_column_step(col: &mut ColumnView, dt: f64, params: &KesslerParams, c: &PhysConstants) -> Result<f64> {
    if !(dt > 0.0) {
        return config_err(format!("microphysics time step {dt} must be positive"));
    }
    col.check()?;
    let n = col.n_levels();
    for k in 0..n {
        col.qc[k] = col.qc[k].max(0.0);
        col.qr[k] = col.qr[k].max(0.0);
    }
    let rain = sediment(col, dt, params);

    for k in 0..n {
        let auto = dt * params.k1 * (col.qc[k] - params.a).max(0.0);
        let accr =
            if col.qr[k] > 0.0 { dt * params.k2 * col.qc[k] * col.qr[k].powf(params.accretion_exp) } else { 0.0 };
        let conv = (auto + accr).min(col.qc[k]);
        col.qc[k] -= conv;
        col.qr[k] += conv;
    }

    let eps = c.eps();
    saturation_adjustment(col, params, c)?;

    for k in 0..n {
        if col.qr[k] <= 0.0 {
            continue;
        }
        let pi = c.exner(col.p[k]);
        let mut theta = col.theta_v[k] / (1.0 + eps * col.qv[k]);
        let t = theta * pi;
        let qvs = saturation_mixing_ratio(col.p[k], t, params, c)?;
        if col.qv[k] >= qvs {
            continue;
        }
        // Rain evaporation: rho in g/cm^3 and p in mb inside the rate law.
        let rho_g = 0.001 * col.rho[k];
        let rqr = rho_g * col.qr[k];
        let vent = 1.6 + 124.9 * rqr.powf(0.2046);
        let p_mb = 0.01 * col.p[k];
        let rate = vent * rqr.powf(0.525) / (5.4e5 + 2.55e6 / (p_mb * qvs)) * (qvs - col.qv[k]) / (rho_g * qvs);
        let deficit = (qvs - col.qv[k]) / latent_factor(t, qvs, params, c);
        let ern = (dt * rate).min(deficit).min(col.qr[k]).max(0.0);
        col.qr[k] -= ern;
        col.qv[k] += ern;
        theta -= c.lv / (c.cp * pi) * ern;
        col.theta_v[k] = theta * (1.0 + eps * col.qv[k]);
    }
    Ok(rain)
}

/// Apply the column physics to every grid column of a simulator state.
/// Returns the surface rain (mm) of this call per grid column.
pub fn apply_microphysics(
    state: &mut PrognosticState,
    model: &DynamicsModel,
    dt: f64,
    params: &KesslerParams,
) -> Result<Vec<f64>> {
    let mesh = &*model.mesh;
    let r = &*model.reference;
    let c = &model.constants;
    let nz = mesh.n_levels();
    let dz = mesh.vertical().mass.clone();
    let z = mesh.vertical().coords.clone();
    let p_pert = model.pressure_perturbation(state)?;
    let mut precip = vec![0.0; mesh.n_columns()];
    let mut col = ColumnView {
        z,
        dz,
        rho: vec![0.0; nz],
        p: vec![0.0; nz],
        theta_v: vec![0.0; nz],
        qv: vec![0.0; nz],
        qc: vec![0.0; nz],
        qr: vec![0.0; nz],
    };
    for (column, rain) in precip.iter_mut().enumerate() {
        for k in 0..nz {
            let i = mesh.node(column, k);
            col.rho[k] = r.rho[i] + state.field(Field::Rho)[i];
            col.p[k] = r.p[i] + p_pert[i];
            col.theta_v[k] = r.theta_v[i] + state.field(Field::Theta)[i];
            // Negative condensate from transport is returned to the vapor
            // field so total water is unchanged.
            let (mut qv, mut qc, mut qr) =
                (r.qv[i] + state.field(Field::Qv)[i], state.field(Field::Qc)[i], state.field(Field::Qr)[i]);
            if qc < 0.0 {
                qv += qc;
                qc = 0.0;
            }
            if qr < 0.0 {
                qv += qr;
                qr = 0.0;
            }
            col.qv[k] = qv;
            col.qc[k] = qc;
            col.qr[k] = qr;
        }
        let untouched = col.qc.iter().chain(&col.qr).all(|&v| v == 0.0) && is_subsaturated(&col, params, c)?;
        if untouched {
            continue;
        }
        *rain = kessler_column_step(&mut col, dt, params, c)?;
        for k in 0..nz {
            let i = mesh.node(column, k);
            state.field_mut(Field::Theta)[i] = col.theta_v[k] - r.theta_v[i];
            state.field_mut(Field::Qv)[i] = col.qv[k] - r.qv[i];
            state.field_mut(Field::Qc)[i] = col.qc[k];
            state.field_mut(Field::Qr)[i] = col.qr[k];
        }
    }
    Ok(precip)
}

fn is_subsaturated(col: &ColumnView, params: &KesslerParams, c: &PhysConstants) -> Result<bool> {
    let eps = c.eps();
    for k in 0..col.n_levels() {
        if col.qv[k] < -NEGATIVE_TOL {
            return Err(MmfError::State(format!("negative total vapor {} at level {k}", col.qv[k])));
        }
        let t = col.theta_v[k] / (1.0 + eps * col.qv[k]) * c.exner(col.p[k]);
        if col.qv[k] >= saturation_mixing_ratio(col.p[k], t, params, c)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> (KesslerParams, PhysConstants) {
        (KesslerParams::default(), PhysConstants::default())
    }

    /// Adiabatic column with surface temperature 300 K and given relative humidity.
    fn column(nz: usize, rh: f64) -> ColumnView {
        let (kp, c) = params();
        let top = 10_000.0;
        let h = top / (nz - 1) as f64;
        let z: Vec<f64> = (0..nz).map(|k| k as f64 * h).collect();
        let mut dz = vec![h; nz];
        dz[0] = 0.5 * h;
        dz[nz - 1] = 0.5 * h;
        let mut col = ColumnView {
            z: z.clone(),
            dz,
            rho: vec![0.0; nz],
            p: vec![0.0; nz],
            theta_v: vec![0.0; nz],
            qv: vec![0.0; nz],
            qc: vec![0.0; nz],
            qr: vec![0.0; nz],
        };
        for k in 0..nz {
            let pi = 1.0 - c.g * z[k] / (c.cp * 300.0);
            let p = c.p00 * pi.powf(1.0 / c.kappa());
            let t = 300.0 * pi;
            let qv = rh * saturation_mixing_ratio(p, t, &kp, &c).unwrap();
            col.p[k] = p;
            col.qv[k] = qv;
            col.theta_v[k] = 300.0 * (1.0 + c.eps() * qv);
            col.rho[k] = p / (c.r_d * t * (1.0 + c.eps() * qv));
        }
        col
    }

    #[test]
    fn tetens_examples() {
        let (kp, c) = params();
        assert!((kp.vapor_pressure(273.15) - 610.78).abs() < 1e-12);
        let q = saturation_mixing_ratio(1e5, 273.15, &kp, &c).unwrap();
        let oracle = 287.0 / 461.5 * 610.78 / (1e5 - 610.78);
        assert!((q - oracle).abs() < 1e-15);
        assert!((q - 0.00382).abs() < 1e-5);
        let cold = saturation_mixing_ratio(1e5, 233.0, &kp, &c).unwrap();
        let es = 610.78 * (17.27f64 * (233.0 - 273.15) / (233.0 - 35.86)).exp();
        assert!((cold - 287.0 / 461.5 * es / (1e5 - es)).abs() < 1e-17);
        assert!(cold < 1.2e-4 && cold < 0.05 * saturation_mixing_ratio(1e5, 300.0, &kp, &c).unwrap());
        for t in (230..320).map(|t| t as f64) {
            assert!(
                saturation_mixing_ratio(1e5, t + 1.0, &kp, &c).unwrap()
                    > saturation_mixing_ratio(1e5, t, &kp, &c).unwrap()
            );
        }
        assert!(saturation_mixing_ratio(500.0, 300.0, &kp, &c).is_err());
    }

    #[test]
    fn subsaturated_column_is_untouched() {
        let (kp, c) = params();
        let mut col = column(21, 0.7);
        let orig = col.clone();
        let rain = kessler_column_step(&mut col, 2.0, &kp, &c).unwrap();
        assert_eq!(rain, 0.0);
        assert_eq!(col, orig);
    }

    #[test]
    fn autoconversion_threshold() {
        let (kp, c) = params();
        let mut col = column(11, 0.999);
        col.qc.iter_mut().for_each(|q| *q = 0.0005);
        kessler_column_step(&mut col, 1.0, &kp, &c).unwrap();
        assert!(col.qr.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn condensation_conserves_water_and_warms() {
        let (kp, c) = params();
        let mut col = column(11, 1.05);
        let orig = col.clone();
        let net = saturation_adjustment(&mut col, &kp, &c).unwrap();
        for k in 0..11 {
            assert!(net[k] > 0.0);
            assert!(((col.qv[k] + col.qc[k]) - (orig.qv[k] + orig.qc[k])).abs() < 1e-14);
            let th0 = orig.theta_v[k] / (1.0 + c.eps() * orig.qv[k]);
            let th1 = col.theta_v[k] / (1.0 + c.eps() * col.qv[k]);
            assert!(th1 > th0);
        }
        let again = col.clone();
        saturation_adjustment(&mut col, &kp, &c).unwrap();
        for k in 0..11 {
            assert!((col.qv[k] - again.qv[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rain_falls_out_and_budget_closes() {
        let (kp, c) = params();
        let mut col = column(41, 1.02);
        for k in 10..25 {
            col.qc[k] = 3e-3;
            col.qr[k] = 1e-3;
        }
        let mut total_rain = 0.0;
        for _ in 0..300 {
            let w0 = col.water_path();
            let rain = kessler_column_step(&mut col, 2.0, &kp, &c).unwrap();
            assert!(rain >= 0.0);
            let w1 = col.water_path();
            assert!((w0 - w1 - rain).abs() <= 1e-8 * w0);
            assert!(col.qc.iter().chain(&col.qr).all(|&q| q >= 0.0));
            total_rain += rain;
        }
        assert!(total_rain > 0.0);
    }

    #[test]
    fn rain_evaporates_in_dry_air() {
        let (kp, c) = params();
        let mut col = column(11, 0.5);
        col.qr[5] = 1e-4;
        let orig = col.clone();
        kessler_column_step(&mut col, 1.0, &kp, &c).unwrap();
        let th0 = orig.theta_v[5] / (1.0 + c.eps() * orig.qv[5]);
        let th1 = col.theta_v[5] / (1.0 + c.eps() * col.qv[5]);
        assert!(col.qv[5] > orig.qv[5]);
        assert!(th1 < th0);
    }

    #[test]
    fn negative_input_is_rejected() {
        let (kp, c) = params();
        let mut col = column(5, 0.5);
        col.qc[2] = -1e-9;
        assert!(matches!(kessler_column_step(&mut col, 1.0, &kp, &c), Err(MmfError::State(_))));
        col.qc[2] = -1e-13;
        assert!(kessler_column_step(&mut col, 1.0, &kp, &c).is_ok());
        assert!(kessler_column_step(&mut col, 0.0, &kp, &c).is_err());
    }
}
