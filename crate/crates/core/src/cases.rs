//! Initial conditions for the squall-line (2D) and supercell (3D) storms:
//! thermal bubbles, seeded SSP noise, an idealized sounding and presets.

use std::path::PathBuf;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coupling::{spawn_ssp_instances, MmfConfig, MmfSystem, SspInstance, SspSettings};
use crate::dynamics::{
    balanced_density_perturbation, build_reference, DynamicsModel, PhysConstants, Profile, Sounding, SpongeConfig,
};
use crate::error::{config_err, MmfError, Result};
use crate::grid::{BoxSpec, Mesh};
use crate::microphysics::{saturation_mixing_ratio, KesslerParams};
use crate::operators::{Field, PrognosticState};
use crate::timeint::{GmresConfig, Simulator};

/// Cosine-squared warm bubble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleSpec {
    /// Peak amplitude (K).
    pub theta_c: f64,
    pub r_c: f64,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub dim: usize,
}

impl BubbleSpec {
    pub fn validate(&self) -> Result<()> {
        let radii = if self.dim == 2 { vec![self.radii[0], self.radii[2]] } else { self.radii.to_vec() };
        if !(self.r_c > 0.0) || radii.iter().any(|r| !(*r > 0.0)) || !(self.dim == 2 || self.dim == 3) {
            return config_err(format!("invalid bubble {self:?}"));
        }
        Ok(())
    }

    /// Normalized elliptic distance; `x[1]` is ignored in 2D.
    pub fn radius(&self, x: [f64; 3]) -> f64 {
        let sq = |k: usize| ((x[k] - self.center[k]) / self.radii[k]).powi(2);
        if self.dim == 2 {
            (sq(0) + sq(2)).sqrt()
        } else {
            (sq(0) + sq(1) + sq(2)).sqrt()
        }
    }
}

/// `theta_c cos^2(pi r / 2)` inside `r < r_c`, zero outside.
pub fn bubble_theta(x: [f64; 3], spec: &BubbleSpec) -> f64 {
    let r = spec.radius(x);
    if r >= spec.r_c {
        return 0.0;
    }
    let c = (0.5 * std::f64::consts::PI * r).cos();
    spec.theta_c * c * c
}

/// Seeded noise added to each SSP's temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Bound on the noise (K).
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { amplitude: 0.3, seed: 0 }
    }
}

/// Uniform variate on `[-1, 1)` from the top 53 bits of one output word.
fn uniform_symmetric(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

/// Generator for one instance: ChaCha8 keyed by the seed, stream = instance id.
pub fn instance_rng(seed: u64, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance);
    rng
}

/// `amplitude * (theta0 / theta_c) * U` per node, one draw per node in order.
pub fn random_theta_perturbation(
    spec: &PerturbationSpec,
    theta0: &[f64],
    theta_c: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    theta0
        .iter()
        .map(|&t| {
            let u = uniform_symmetric(rng);
            if t == 0.0 {
                0.0
            } else {
                spec.amplitude * (t / theta_c) * u
            }
        })
        .collect()
}

/// Analytic convective sounding for self-contained runs. It is not taken
/// from observations: constant-stability layers below and above a
/// tropopause, a moist boundary layer and a linear shear layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealizedSounding {
    pub theta_surface: f64,
    pub p_surface: f64,
    /// Brunt-Vaisala frequency below and above the tropopause (1/s).
    pub n_troposphere: f64,
    pub n_stratosphere: f64,
    pub z_tropopause: f64,
    /// Relative humidity inside the boundary layer (saturated by default).
    pub rh_boundary: f64,
    pub z_boundary: f64,
    /// Relative humidity reached at the tropopause and kept above it.
    pub rh_top: f64,
    /// Wind speed reached at `z_shear`, constant above.
    pub u_shear: f64,
    pub z_shear: f64,
    pub v_shear: f64,
    pub top: f64,
    pub dz: f64,
}

impl Default for IdealizedSounding {
    fn default() -> Self {
        Self {
            theta_surface: 300.0,
            p_surface: 1.0e5,
            n_troposphere: 0.01,
            n_stratosphere: 0.02,
            z_tropopause: 12_000.0,
            rh_boundary: 1.0,
            z_boundary: 1_200.0,
            rh_top: 0.3,
            u_shear: 12.0,
            z_shear: 2_500.0,
            v_shear: 0.0,
            top: 24_000.0,
            dz: 50.0,
        }
    }
}

impl IdealizedSounding {
    pub fn theta(&self, z: f64, g: f64) -> f64 {
        let n2t = self.n_troposphere * self.n_troposphere;
        if z <= self.z_tropopause {
            self.theta_surface * (n2t * z / g).exp()
        } else {
            let n2s = self.n_stratosphere * self.n_stratosphere;
            self.theta_surface * (n2t * self.z_tropopause / g).exp() * (n2s * (z - self.z_tropopause) / g).exp()
        }
    }

    pub fn relative_humidity(&self, z: f64) -> f64 {
        if z <= self.z_boundary {
            self.rh_boundary
        } else if z >= self.z_tropopause {
            self.rh_top
        } else {
            let s = (z - self.z_boundary) / (self.z_tropopause - self.z_boundary);
            self.rh_boundary + s * (self.rh_top - self.rh_boundary)
        }
    }

    pub fn wind(&self, z: f64) -> (f64, f64) {
        let s = (z / self.z_shear).min(1.0);
        (self.u_shear * s, self.v_shear * s)
    }

    /// Tabulate by integrating the hydrostatic Exner equation upward and
    /// setting `q_v = RH q_vs(p, T)` at every level.
    pub fn tabulate(&self, c: &PhysConstants, params: &KesslerParams) -> Result<Sounding> {
        if !(self.dz > 0.0) || !(self.top > self.dz) {
            return config_err("idealized sounding needs 0 < dz < top");
        }
        let n = (self.top / self.dz).ceil() as usize;
        let h = self.top / n as f64;
        let qv_at = |z: f64, pi: f64| -> Result<f64> {
            let theta = self.theta(z, c.g);
            let p = c.p00 * pi.powf(1.0 / c.kappa());
            Ok(self.relative_humidity(z) * saturation_mixing_ratio(p, theta * pi, params, c)?)
        };
        let dpi = |z: f64, pi: f64| -> Result<f64> {
            let qv = qv_at(z, pi)?;
            Ok(-c.g / (c.cp * self.theta(z, c.g) * (1.0 + c.eps() * qv)))
        };
        let (mut z, mut th, mut qv, mut u, mut v) = (vec![], vec![], vec![], vec![], vec![]);
        let mut pi = c.exner(self.p_surface);
        for k in 0..=n {
            let zk = k as f64 * h;
            z.push(zk);
            th.push(self.theta(zk, c.g));
            qv.push(qv_at(zk, pi)?);
            let (uk, vk) = self.wind(zk);
            u.push(uk);
            v.push(vk);
            if k < n {
                // Classical RK4 on the Exner equation.
                let k1 = dpi(zk, pi)?;
                let k2 = dpi(zk + 0.5 * h, pi + 0.5 * h * k1)?;
                let k3 = dpi(zk + 0.5 * h, pi + 0.5 * h * k2)?;
                let k4 = dpi(zk + h, pi + h * k3)?;
                pi += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        Sounding::new(z, th, qv, u, v, self.p_surface)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseId {
    Squall,
    Supercell,
}

impl CaseId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squall" => Ok(Self::Squall),
            "supercell" => Ok(Self::Supercell),
            _ => config_err(format!("unknown case '{s}' (expected squall or supercell)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Squall => "squall",
            Self::Supercell => "supercell",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::Squall => 2,
            Self::Supercell => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Fine,
    Coarse,
    Mmf,
}

impl Tier {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Self::Fine),
            "coarse" => Ok(Self::Coarse),
            "mmf" => Ok(Self::Mmf),
            _ => config_err(format!("unknown resolution tier '{s}' (expected fine, coarse or mmf)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fine => "fine",
            Self::Coarse => "coarse",
            Self::Mmf => "mmf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SoundingSource {
    Idealized(IdealizedSounding),
    File(PathBuf),
}

impl SoundingSource {
    pub fn load(&self, c: &PhysConstants, params: &KesslerParams) -> Result<Sounding> {
        match self {
            Self::Idealized(s) => s.tabulate(c, params),
            Self::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| MmfError::Config(format!("cannot read sounding file {}: {e}", path.display())))?;
                Sounding::parse(&text)
            }
        }
    }
}

/// Everything needed to build a case; presets fill it and any field can be
/// overridden before [`build_case`].
#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub case: CaseId,
    pub tier: Tier,
    /// Domain extents `(x, y, z)`; `y` is unused in 2D.
    pub extent: [f64; 3],
    pub order: usize,
    /// Elements per direction of the standard (or LSP) mesh.
    pub elements: [usize; 3],
    pub dt: f64,
    pub duration: f64,
    pub constants: PhysConstants,
    pub filter: f64,
    /// Filter strength inside the SSPs.
    pub ssp_filter: f64,
    pub sponge_thickness: f64,
    /// Zero disables the sponge.
    pub sponge_r_max: f64,
    pub microphysics: Option<KesslerParams>,
    pub bubble: Option<BubbleSpec>,
    /// Initialize the velocity with the sounding wind.
    pub background_wind: bool,
    pub perturbation: PerturbationSpec,
    pub mmf: MmfConfig,
    pub sounding: SoundingSource,
    pub implicit: bool,
    pub gmres: GmresConfig,
}

fn elements_for(length: f64, order: usize, spacing: f64) -> usize {
    ((length / (order as f64 * spacing)).round() as usize).max(1)
}

impl CaseConfig {
    /// Full-size setup: 150 km long (100 km wide for the supercell), 24 km tall.
    pub fn paper(case: CaseId, tier: Tier) -> Self {
        let extent = match case {
            CaseId::Squall => [150_000.0, 0.0, 24_000.0],
            CaseId::Supercell => [150_000.0, 100_000.0, 24_000.0],
        };
        let duration = match case {
            CaseId::Squall => 28_800.0,
            CaseId::Supercell => 9_600.0,
        };
        Self::with_extent(case, tier, extent, duration)
    }

    /// Desk-scale setup: 50 km long (and wide for the supercell), 24 km
    /// tall, 20 minutes, with every non-dimensional setting kept.
    pub fn desk(case: CaseId, tier: Tier) -> Self {
        let extent = match case {
            CaseId::Squall => [50_000.0, 0.0, 24_000.0],
            CaseId::Supercell => [50_000.0, 50_000.0, 24_000.0],
        };
        Self::with_extent(case, tier, extent, 1_200.0)
    }

    fn with_extent(case: CaseId, tier: Tier, extent: [f64; 3], duration: f64) -> Self {
        let order = 4;
        // (horizontal, vertical) spacing and time step per tier.
        let (fine, coarse, dt_fine, dt_coarse, filter, substeps, ssp_dx) = match case {
            CaseId::Squall => ((200.0, 200.0), (4_200.0, 400.0), 0.2, 2.0, 0.01, 10, 200.0),
            CaseId::Supercell => ((500.0, 500.0), (2_500.0, 500.0), 0.5, 2.0, 0.04, 4, 500.0),
        };
        let ((dh, dz), dt) = match tier {
            Tier::Fine => (fine, dt_fine),
            Tier::Coarse | Tier::Mmf => (coarse, dt_coarse),
        };
        let dim = case.dim();
        let elements = [
            elements_for(extent[0], order, dh),
            if dim == 3 { elements_for(extent[1], order, dh) } else { 1 },
            elements_for(extent[2], order, dz),
        ];
        let ssp_length = 8_000.0;
        let mmf = MmfConfig {
            ssp_length,
            ssp_elements_x: elements_for(ssp_length, order, ssp_dx),
            n_sl: ((coarse.1 / fine.1).round() as usize).max(1),
            substeps,
            ..MmfConfig::default()
        };
        let (radii, z_c) = match case {
            CaseId::Squall => ([10_000.0, 10_000.0, 1_500.0], 2_000.0),
            CaseId::Supercell => ([10_000.0, 10_000.0, 2_000.0], 2_000.0),
        };
        let bubble = BubbleSpec { theta_c: 3.0, r_c: 1.0, center: [0.5 * extent[0], 0.5 * extent[1], z_c], radii, dim };
        Self {
            case,
            tier,
            extent,
            order,
            elements,
            dt,
            duration,
            constants: PhysConstants { nu: 200.0, ..PhysConstants::default() },
            filter,
            ssp_filter: 0.0,
            sponge_thickness: 6_000.0,
            sponge_r_max: 0.25,
            microphysics: Some(KesslerParams::default()),
            bubble: Some(bubble),
            background_wind: true,
            perturbation: PerturbationSpec::default(),
            mmf,
            sounding: SoundingSource::Idealized(IdealizedSounding::default()),
            implicit: true,
            gmres: GmresConfig::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.case.dim()
    }

    pub fn n_steps(&self) -> usize {
        (self.duration / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.duration >= 0.0) {
            return config_err("dt must be positive and duration non-negative");
        }
        if self.order == 0 || self.elements.contains(&0) {
            return config_err("order and element counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.filter) || !(0.0..=1.0).contains(&self.ssp_filter) {
            return config_err("filter strengths must lie in [0, 1]");
        }
        if !(self.perturbation.amplitude >= 0.0) {
            return config_err("perturbation amplitude must be non-negative");
        }
        if let Some(b) = &self.bubble {
            b.validate()?;
            if b.dim != self.dim() {
                return config_err("bubble dimensionality does not match the case");
            }
        }
        if let Some(k) = &self.microphysics {
            k.validate()?;
        }
        self.gmres.validate()?;
        if self.tier == Tier::Mmf {
            self.mmf.validate()?;
        }
        Ok(())
    }

    fn sponge(&self) -> Result<Option<SpongeConfig>> {
        if self.sponge_r_max > 0.0 {
            let top = self.extent[2];
            Ok(Some(SpongeConfig::new((top - self.sponge_thickness).max(0.0), top, self.sponge_r_max)?))
        } else {
            Ok(None)
        }
    }

    fn mesh_spec(&self) -> BoxSpec {
        let [lx, ly, lz] = self.extent;
        let [ex, ey, ez] = self.elements;
        if self.dim() == 2 {
            BoxSpec::slab_2d(lx, lz, ex, ez, self.order, true)
        } else {
            BoxSpec::box_3d([lx, ly, lz], [ex, ey, ez], self.order, [true, true])
        }
    }
}

/// A built case ready to step.
#[derive(Debug)]
pub enum BuiltCase {
    Standard(Simulator),
    Mmf(MmfSystem),
}

#[derive(Debug)]
pub struct CaseBuild {
    pub case: BuiltCase,
    pub sounding: Sounding,
    pub warnings: Vec<String>,
}

/// Standard simulator with the bubble (`theta_v' = theta' (1 + eps q_v0)`),
/// the sounding wind and a density perturbation in pressure balance.
fn build_standard(cfg: &CaseConfig, sounding: &Sounding) -> Result<Simulator> {
    let c = cfg.constants;
    let mesh = Arc::new(Mesh::build_box(&cfg.mesh_spec())?);
    let reference = Arc::new(build_reference(sounding, &mesh, &c)?);
    let model = DynamicsModel::new(mesh.clone(), reference.clone(), c, cfg.sponge()?);
    let dim = mesh.dim;
    let mut state = PrognosticState::for_mesh(&mesh);
    if cfg.background_wind {
        for i in 0..mesh.n_global() {
            let (u, v) = sounding.wind(mesh.z(i))?;
            state.field_mut(Field::Vel(0))[i] = u;
            if dim == 3 {
                state.field_mut(Field::Vel(1))[i] = v;
            }
        }
    }
    if let Some(b) = &cfg.bubble {
        let th = state.field_mut(Field::Theta);
        for (i, t) in th.iter_mut().enumerate() {
            *t = bubble_theta(mesh.coords(i), b) * (1.0 + c.eps() * reference.qv[i]);
        }
    }
    let rho = balanced_density_perturbation(&reference, &c, state.field(Field::Theta));
    state.field_mut(Field::Rho).copy_from_slice(&rho);
    model.enforce_no_flux(&mut state);
    let mut sim = Simulator::new(model, state, cfg.dt);
    sim.filter = cfg.filter;
    sim.microphysics = cfg.microphysics;
    sim.gmres = cfg.gmres;
    sim.implicit = cfg.implicit;
    Ok(sim)
}

/// Add the seeded noise to one SSP, shaped by the bubble at its anchor.
pub fn perturb_ssp(instance: &mut SspInstance, bubble: &BubbleSpec, spec: &PerturbationSpec) {
    let mesh = instance.sim.model.mesh.clone();
    let reference = instance.sim.model.reference.clone();
    let c = instance.sim.model.constants;
    let theta0: Vec<f64> = (0..mesh.n_global())
        .map(|i| bubble_theta([instance.anchor[0], instance.anchor[1], mesh.z(i)], bubble))
        .collect();
    let mut rng = instance_rng(spec.seed, instance.id as u64);
    let noise = random_theta_perturbation(spec, &theta0, bubble.theta_c, &mut rng);
    let state = &mut instance.sim.state;
    for (t, n) in state.field_mut(Field::Theta).iter_mut().zip(&noise) {
        *t += n;
    }
    let rho = balanced_density_perturbation(&reference, &c, state.field(Field::Theta));
    state.field_mut(Field::Rho).copy_from_slice(&rho);
}

pub fn build_case(cfg: &CaseConfig) -> Result<CaseBuild> {
    cfg.validate()?;
    let params = cfg.microphysics.unwrap_or_default();
    let sounding = cfg.sounding.load(&cfg.constants, &params)?;
    if sounding.top() < cfg.extent[2] {
        return config_err(format!("sounding top {} m is below the domain top {} m", sounding.top(), cfg.extent[2]));
    }
    let mut sim = build_standard(cfg, &sounding)?;
    let mut warnings = Vec::new();
    let case = match cfg.tier {
        Tier::Fine | Tier::Coarse => BuiltCase::Standard(sim),
        Tier::Mmf => {
            let settings = SspSettings {
                constants: cfg.constants,
                sponge: cfg.sponge()?,
                filter: cfg.ssp_filter,
                microphysics: cfg.microphysics,
                gmres: cfg.gmres,
                implicit: cfg.implicit,
            };
            let (mut ssps, w) = spawn_ssp_instances(&sim, &cfg.mmf, &sounding, &settings)?;
            warnings.extend(w);
            if let Some(b) = &cfg.bubble {
                for inst in &mut ssps {
                    perturb_ssp(inst, b, &cfg.perturbation);
                }
            }
            // Cloud physics lives in the SSPs; the LSP only sees it through the forcing.
            sim.microphysics = None;
            BuiltCase::Mmf(MmfSystem::new(sim, ssps, cfg.mmf.clone())?)
        }
    };
    Ok(CaseBuild { case, sounding, warnings })
}
