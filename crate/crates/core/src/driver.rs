//! Run configuration, orchestration of standard, MMF and analysis runs,
//! diagnostics and snapshot files.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cases::{build_case, BubbleSpec, BuiltCase, CaseConfig, CaseId, IdealizedSounding, SoundingSource, Tier};
use crate::complexity::{CostModelInput, CostReport};
use crate::coupling::{horizontal_average, CoupledVar, CouplingReport, Granularity, MmfSystem};
use crate::dynamics::ReferenceState;
use crate::error::{config_err, MmfError, Result};
use crate::grid::{BoxSpec, Mesh};
use crate::microphysics::KesslerParams;
use crate::operators::{integrate, Field, PrognosticState};
use crate::timeint::Simulator;

/// Environment variable overriding the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "MMF_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Standard,
    Mmf,
    Analyze,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "mmf" => Ok(Self::Mmf),
            "analyze" => Ok(Self::Analyze),
            _ => config_err(format!("unknown mode '{s}' (expected standard, mmf or analyze)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Mmf => "mmf",
            Self::Analyze => "analyze",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => config_err(format!("unknown preset '{s}' (expected desk or paper)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub preset: Option<Preset>,
    pub mode: Option<RunMode>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

/// Full run configuration. Serialized as flat `section.key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub preset: Preset,
    /// Case settings; its bubble, microphysics and sounding are taken from
    /// the fields below by [`RunConfig::case_config`].
    pub case: CaseConfig,
    pub bubble_enabled: bool,
    pub bubble: BubbleSpec,
    pub microphysics_enabled: bool,
    pub kessler: KesslerParams,
    pub sounding_file: Option<PathBuf>,
    pub idealized: IdealizedSounding,
    pub output_dir: PathBuf,
    /// Snapshot cadence in simulated seconds. The first and last states are
    /// always written; 0 writes only those.
    pub snapshot_interval: f64,
    /// Cadence of the per-level coupling residual file (0 writes every step).
    pub coupling_interval: f64,
    pub seed: u64,
    pub cost: CostModelInput,
}

fn tier_for(mode: RunMode, tier: Option<Tier>) -> Result<Tier> {
    match (mode, tier) {
        (RunMode::Mmf, None | Some(Tier::Mmf)) => Ok(Tier::Mmf),
        (RunMode::Mmf, Some(t)) => config_err(format!("run.tier={} is not valid with mode mmf", t.name())),
        (_, Some(Tier::Mmf)) => config_err("run.tier=mmf requires mode mmf"),
        (_, Some(t)) => Ok(t),
        (_, None) => Ok(Tier::Coarse),
    }
}

fn pf(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| MmfError::Config(format!("{key}: '{v}' is not a number")))
}

fn pu(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| MmfError::Config(format!("{key}: '{v}' is not a non-negative integer")))
}

fn pb(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => config_err(format!("{key}: '{v}' is not true/false")),
    }
}

fn granularity_name(g: Granularity) -> &'static str {
    match g {
        Granularity::ElementColumn => "element",
        Granularity::GridColumn => "grid",
    }
}

impl RunConfig {
    pub fn new(mode: RunMode, preset: Preset, case: CaseId, tier: Tier) -> Self {
        let case_cfg = match preset {
            Preset::Desk => CaseConfig::desk(case, tier),
            Preset::Paper => CaseConfig::paper(case, tier),
        };
        let bubble = case_cfg.bubble.expect("presets define a bubble");
        let idealized = match &case_cfg.sounding {
            SoundingSource::Idealized(s) => *s,
            SoundingSource::File(_) => IdealizedSounding::default(),
        };
        Self {
            mode,
            preset,
            bubble_enabled: true,
            bubble,
            microphysics_enabled: case_cfg.microphysics.is_some(),
            kessler: case_cfg.microphysics.unwrap_or_default(),
            sounding_file: None,
            idealized,
            case: case_cfg,
            output_dir: PathBuf::from("output"),
            snapshot_interval: 300.0,
            coupling_interval: 60.0,
            seed: 0,
            cost: CostModelInput::default(),
        }
    }

    /// The case settings with bubble, physics, sounding and seed applied.
    pub fn case_config(&self) -> CaseConfig {
        let mut c = self.case.clone();
        c.bubble = self.bubble_enabled.then_some(self.bubble);
        c.microphysics = self.microphysics_enabled.then_some(self.kessler);
        c.sounding = match &self.sounding_file {
            Some(p) => SoundingSource::File(p.clone()),
            None => SoundingSource::Idealized(self.idealized),
        };
        c.perturbation.seed = self.seed;
        c
    }

    /// Parse a config file. The preset, case, mode and tier keys pick the
    /// defaults; every other key overrides one value. Unknown keys fail.
    pub fn parse(text: &str, cli: &CliOverrides) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MmfError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.iter().any(|p| p.0 == k) {
                return config_err(format!("line {}: duplicate key {k}", n + 1));
            }
            pairs.push((k, v));
        }
        let take = |key: &str| pairs.iter().find(|p| p.0 == key).map(|p| p.1.clone());
        let preset = match (cli.preset, take("run.preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => Preset::parse(&v)?,
            (None, None) => Preset::Desk,
        };
        let mode = match (cli.mode, take("run.mode")) {
            (Some(m), _) => m,
            (None, Some(v)) => RunMode::parse(&v)?,
            (None, None) => RunMode::Standard,
        };
        let case = take("run.case").map(|v| CaseId::parse(&v)).transpose()?.unwrap_or(CaseId::Squall);
        let tier = tier_for(mode, take("run.tier").map(|v| Tier::parse(&v)).transpose()?)?;
        let mut cfg = Self::new(mode, preset, case, tier);
        for (k, v) in &pairs {
            if matches!(k.as_str(), "run.preset" | "run.mode" | "run.case" | "run.tier") {
                continue;
            }
            cfg.set(k, v)?;
        }
        if let Some(w) = cli.workers {
            cfg.case.mmf.workers = w;
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snapshot_interval >= 0.0) || !(self.coupling_interval >= 0.0) {
            return config_err("output intervals must be non-negative");
        }
        self.cost.validate()?;
        if self.mode != RunMode::Analyze {
            self.case_config().validate()?;
        }
        Ok(())
    }

    /// Set one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.case;
        match key {
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.snapshot_interval" => self.snapshot_interval = pf(key, v)?,
            "output.coupling_interval" => self.coupling_interval = pf(key, v)?,
            "run.seed" => self.seed = v.parse().map_err(|_| MmfError::Config(format!("{key}: '{v}' is not a u64")))?,
            "mesh.order" => c.order = pu(key, v)?,
            "mesh.lx" => c.extent[0] = pf(key, v)?,
            "mesh.ly" => c.extent[1] = pf(key, v)?,
            "mesh.lz" => c.extent[2] = pf(key, v)?,
            "mesh.nex" => c.elements[0] = pu(key, v)?,
            "mesh.ney" => c.elements[1] = pu(key, v)?,
            "mesh.nez" => c.elements[2] = pu(key, v)?,
            "time.dt" => c.dt = pf(key, v)?,
            "time.duration" => c.duration = pf(key, v)?,
            "time.implicit" => c.implicit = pb(key, v)?,
            "physics.g" => c.constants.g = pf(key, v)?,
            "physics.r_d" => c.constants.r_d = pf(key, v)?,
            "physics.r_v" => c.constants.r_v = pf(key, v)?,
            "physics.cp" => c.constants.cp = pf(key, v)?,
            "physics.p00" => c.constants.p00 = pf(key, v)?,
            "physics.nu" => c.constants.nu = pf(key, v)?,
            "physics.lv" => c.constants.lv = pf(key, v)?,
            "filter.strength" => c.filter = pf(key, v)?,
            "filter.ssp_strength" => c.ssp_filter = pf(key, v)?,
            "sponge.thickness" => c.sponge_thickness = pf(key, v)?,
            "sponge.r_max" => c.sponge_r_max = pf(key, v)?,
            "microphysics.enabled" => self.microphysics_enabled = pb(key, v)?,
            "microphysics.k1" => self.kessler.k1 = pf(key, v)?,
            "microphysics.a" => self.kessler.a = pf(key, v)?,
            "microphysics.k2" => self.kessler.k2 = pf(key, v)?,
            "microphysics.accretion_exp" => self.kessler.accretion_exp = pf(key, v)?,
            "microphysics.vr_coef" => self.kessler.vr_coef = pf(key, v)?,
            "microphysics.vr_exp" => self.kessler.vr_exp = pf(key, v)?,
            "microphysics.tetens_e0" => self.kessler.tetens_e0 = pf(key, v)?,
            "microphysics.tetens_b" => self.kessler.tetens_b = pf(key, v)?,
            "microphysics.tetens_t0" => self.kessler.tetens_t0 = pf(key, v)?,
            "microphysics.tetens_t1" => self.kessler.tetens_t1 = pf(key, v)?,
            "bubble.enabled" => self.bubble_enabled = pb(key, v)?,
            "bubble.theta_c" => self.bubble.theta_c = pf(key, v)?,
            "bubble.r_c" => self.bubble.r_c = pf(key, v)?,
            "bubble.xc" => self.bubble.center[0] = pf(key, v)?,
            "bubble.yc" => self.bubble.center[1] = pf(key, v)?,
            "bubble.zc" => self.bubble.center[2] = pf(key, v)?,
            "bubble.rx" => self.bubble.radii[0] = pf(key, v)?,
            "bubble.ry" => self.bubble.radii[1] = pf(key, v)?,
            "bubble.rz" => self.bubble.radii[2] = pf(key, v)?,
            "init.background_wind" => c.background_wind = pb(key, v)?,
            "perturbation.amplitude" => c.perturbation.amplitude = pf(key, v)?,
            "sounding.file" => self.sounding_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "sounding.theta_surface" => self.idealized.theta_surface = pf(key, v)?,
            "sounding.p_surface" => self.idealized.p_surface = pf(key, v)?,
            "sounding.n_troposphere" => self.idealized.n_troposphere = pf(key, v)?,
            "sounding.n_stratosphere" => self.idealized.n_stratosphere = pf(key, v)?,
            "sounding.z_tropopause" => self.idealized.z_tropopause = pf(key, v)?,
            "sounding.rh_boundary" => self.idealized.rh_boundary = pf(key, v)?,
            "sounding.z_boundary" => self.idealized.z_boundary = pf(key, v)?,
            "sounding.rh_top" => self.idealized.rh_top = pf(key, v)?,
            "sounding.u_shear" => self.idealized.u_shear = pf(key, v)?,
            "sounding.v_shear" => self.idealized.v_shear = pf(key, v)?,
            "sounding.z_shear" => self.idealized.z_shear = pf(key, v)?,
            "sounding.top" => self.idealized.top = pf(key, v)?,
            "sounding.dz" => self.idealized.dz = pf(key, v)?,
            "mmf.ssp_length" => c.mmf.ssp_length = pf(key, v)?,
            "mmf.ssp_elements_x" => c.mmf.ssp_elements_x = pu(key, v)?,
            "mmf.n_sl" => c.mmf.n_sl = pu(key, v)?,
            "mmf.substeps" => c.mmf.substeps = pu(key, v)?,
            "mmf.workers" => c.mmf.workers = pu(key, v)?,
            "mmf.granularity" => {
                c.mmf.granularity = match v {
                    "element" => Granularity::ElementColumn,
                    "grid" => Granularity::GridColumn,
                    _ => return config_err(format!("{key}: expected element or grid, got '{v}'")),
                }
            }
            "mmf.mask" => {
                c.mmf.mask = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(CoupledVar::parse)
                    .collect::<Result<Vec<_>>>()?
            }
            "gmres.tol" => c.gmres.tol = pf(key, v)?,
            "gmres.restart" => c.gmres.restart = pu(key, v)?,
            "gmres.max_iter" => c.gmres.max_iter = pu(key, v)?,
            "cost.n_p" => self.cost.n_p = pu(key, v)?,
            "cost.lx" => self.cost.lx = pf(key, v)?,
            "cost.ly" => self.cost.ly = pf(key, v)?,
            "cost.lz" => self.cost.lz = pf(key, v)?,
            "cost.dx" => self.cost.dx = pf(key, v)?,
            "cost.dy" => self.cost.dy = pf(key, v)?,
            "cost.dz" => self.cost.dz = pf(key, v)?,
            "cost.duration" => self.cost.duration = pf(key, v)?,
            "cost.dt" => self.cost.dt = pf(key, v)?,
            "cost.r_t" => self.cost.r_t = pf(key, v)?,
            "cost.r_x" => self.cost.r_x = pf(key, v)?,
            "cost.r_z" => self.cost.r_z = pf(key, v)?,
            "cost.n_rx" => self.cost.n_rx = pu(key, v)?,
            "cost.n_ry" => self.cost.n_ry = pu(key, v)?,
            _ => return config_err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.case;
        let k = &self.kessler;
        let b = &self.bubble;
        let s = &self.idealized;
        let q = &self.cost;
        let mask: Vec<&str> = c.mmf.mask.iter().map(|v| v.name()).collect();
        vec![
            ("run.mode", self.mode.name().into()),
            ("run.preset", self.preset.name().into()),
            ("run.case", c.case.name().into()),
            ("run.tier", c.tier.name().into()),
            ("run.seed", self.seed.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("output.snapshot_interval", self.snapshot_interval.to_string()),
            ("output.coupling_interval", self.coupling_interval.to_string()),
            ("mesh.order", c.order.to_string()),
            ("mesh.lx", c.extent[0].to_string()),
            ("mesh.ly", c.extent[1].to_string()),
            ("mesh.lz", c.extent[2].to_string()),
            ("mesh.nex", c.elements[0].to_string()),
            ("mesh.ney", c.elements[1].to_string()),
            ("mesh.nez", c.elements[2].to_string()),
            ("time.dt", c.dt.to_string()),
            ("time.duration", c.duration.to_string()),
            ("time.implicit", c.implicit.to_string()),
            ("physics.g", c.constants.g.to_string()),
            ("physics.r_d", c.constants.r_d.to_string()),
            ("physics.r_v", c.constants.r_v.to_string()),
            ("physics.cp", c.constants.cp.to_string()),
            ("physics.p00", c.constants.p00.to_string()),
            ("physics.nu", c.constants.nu.to_string()),
            ("physics.lv", c.constants.lv.to_string()),
            ("filter.strength", c.filter.to_string()),
            ("filter.ssp_strength", c.ssp_filter.to_string()),
            ("sponge.thickness", c.sponge_thickness.to_string()),
            ("sponge.r_max", c.sponge_r_max.to_string()),
            ("microphysics.enabled", self.microphysics_enabled.to_string()),
            ("microphysics.k1", k.k1.to_string()),
            ("microphysics.a", k.a.to_string()),
            ("microphysics.k2", k.k2.to_string()),
            ("microphysics.accretion_exp", k.accretion_exp.to_string()),
            ("microphysics.vr_coef", k.vr_coef.to_string()),
            ("microphysics.vr_exp", k.vr_exp.to_string()),
            ("microphysics.tetens_e0", k.tetens_e0.to_string()),
            ("microphysics.tetens_b", k.tetens_b.to_string()),
            ("microphysics.tetens_t0", k.tetens_t0.to_string()),
            ("microphysics.tetens_t1", k.tetens_t1.to_string()),
            ("bubble.enabled", self.bubble_enabled.to_string()),
            ("bubble.theta_c", b.theta_c.to_string()),
            ("bubble.r_c", b.r_c.to_string()),
            ("bubble.xc", b.center[0].to_string()),
            ("bubble.yc", b.center[1].to_string()),
            ("bubble.zc", b.center[2].to_string()),
            ("bubble.rx", b.radii[0].to_string()),
            ("bubble.ry", b.radii[1].to_string()),
            ("bubble.rz", b.radii[2].to_string()),
            ("init.background_wind", c.background_wind.to_string()),
            ("perturbation.amplitude", c.perturbation.amplitude.to_string()),
            ("sounding.file", self.sounding_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("sounding.theta_surface", s.theta_surface.to_string()),
            ("sounding.p_surface", s.p_surface.to_string()),
            ("sounding.n_troposphere", s.n_troposphere.to_string()),
            ("sounding.n_stratosphere", s.n_stratosphere.to_string()),
            ("sounding.z_tropopause", s.z_tropopause.to_string()),
            ("sounding.rh_boundary", s.rh_boundary.to_string()),
            ("sounding.z_boundary", s.z_boundary.to_string()),
            ("sounding.rh_top", s.rh_top.to_string()),
            ("sounding.u_shear", s.u_shear.to_string()),
            ("sounding.v_shear", s.v_shear.to_string()),
            ("sounding.z_shear", s.z_shear.to_string()),
            ("sounding.top", s.top.to_string()),
            ("sounding.dz", s.dz.to_string()),
            ("mmf.ssp_length", c.mmf.ssp_length.to_string()),
            ("mmf.ssp_elements_x", c.mmf.ssp_elements_x.to_string()),
            ("mmf.n_sl", c.mmf.n_sl.to_string()),
            ("mmf.substeps", c.mmf.substeps.to_string()),
            ("mmf.workers", c.mmf.workers.to_string()),
            ("mmf.granularity", granularity_name(c.mmf.granularity).into()),
            ("mmf.mask", mask.join(",")),
            ("gmres.tol", c.gmres.tol.to_string()),
            ("gmres.restart", c.gmres.restart.to_string()),
            ("gmres.max_iter", c.gmres.max_iter.to_string()),
            ("cost.n_p", q.n_p.to_string()),
            ("cost.lx", q.lx.to_string()),
            ("cost.ly", q.ly.to_string()),
            ("cost.lz", q.lz.to_string()),
            ("cost.dx", q.dx.to_string()),
            ("cost.dy", q.dy.to_string()),
            ("cost.dz", q.dz.to_string()),
            ("cost.duration", q.duration.to_string()),
            ("cost.dt", q.dt.to_string()),
            ("cost.r_t", q.r_t.to_string()),
            ("cost.r_x", q.r_x.to_string()),
            ("cost.r_z", q.r_z.to_string()),
            ("cost.n_rx", q.n_rx.to_string()),
            ("cost.n_ry", q.n_ry.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Domain-mean kinetic energy density `int 1/2 rho |u|^2 / int 1`.
pub fn compute_kinetic_energy(state: &PrognosticState, reference: &ReferenceState, mesh: &Mesh) -> f64 {
    let rho: Vec<f64> = state.field(Field::Rho).iter().zip(&reference.rho).map(|(p, r)| p + r).collect();
    let vel: Vec<&[f64]> = (0..mesh.dim).map(|k| state.field(Field::Vel(k))).collect();
    kinetic_energy_density(mesh, &rho, &vel)
}

/// `int 1/2 rho |u|^2 / int 1` for a total density and velocity components.
pub fn kinetic_energy_density(mesh: &Mesh, rho: &[f64], vel: &[&[f64]]) -> f64 {
    let ke: Vec<f64> = (0..rho.len()).map(|i| 0.5 * rho[i] * vel.iter().map(|u| u[i] * u[i]).sum::<f64>()).collect();
    integrate(mesh, &ke) / mesh.measure()
}

/// Total water `int rho (q_v + q_c + q_r)`.
pub fn total_water(state: &PrognosticState, reference: &ReferenceState, mesh: &Mesh) -> f64 {
    let (rp, qv, qc, qr) =
        (state.field(Field::Rho), state.field(Field::Qv), state.field(Field::Qc), state.field(Field::Qr));
    let w: Vec<f64> =
        (0..rp.len()).map(|i| (reference.rho[i] + rp[i]) * (reference.qv[i] + qv[i] + qc[i] + qr[i])).collect();
    integrate(mesh, &w)
}

/// Column-weighted mean of a per-column field.
fn column_mean(mesh: &Mesh, values: &[f64]) -> f64 {
    let (mut s, mut w) = (0.0, 0.0);
    for (c, v) in values.iter().enumerate() {
        let cw = mesh.column_weight(c);
        s += cw * v;
        w += cw;
    }
    s / w
}

/// One row of `diagnostics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub kinetic_energy: f64,
    /// `int rho'`.
    pub mass: f64,
    pub total_water: f64,
    /// Mean accumulated surface rain (mm).
    pub precip_mean: f64,
    pub gmres_iterations: usize,
    /// Max relative coupling residual per coupled variable (MMF only).
    pub residuals: Vec<(CoupledVar, f64)>,
}

impl DiagnosticsRecord {
    fn standard(sim: &Simulator, gmres_iterations: usize) -> Self {
        let mesh = &sim.model.mesh;
        let reference = &sim.model.reference;
        Self {
            time: sim.time,
            kinetic_energy: compute_kinetic_energy(&sim.state, reference, mesh),
            mass: integrate(mesh, sim.state.field(Field::Rho)),
            total_water: total_water(&sim.state, reference, mesh),
            precip_mean: column_mean(mesh, &sim.precip),
            gmres_iterations,
            residuals: Vec::new(),
        }
    }

    fn mmf(sys: &MmfSystem, report: &CouplingReport, gmres_iterations: usize) -> Self {
        let mut rec = Self::standard(&sys.lsp, gmres_iterations);
        rec.precip_mean = ssp_precip(sys).iter().map(|p| p.1).sum::<f64>() / sys.ssps.len().max(1) as f64;
        rec.residuals = sys.cfg.mask.iter().map(|&v| (v, report.max_rel(v))).collect();
        rec
    }

    fn header(residual_vars: &[CoupledVar]) -> String {
        let mut h = String::from("time,kinetic_energy,mass_perturbation,total_water,precip_mean_mm,gmres_iterations");
        for v in residual_vars {
            let _ = write!(h, ",max_rel_residual_{}", v.name());
        }
        h
    }

    fn to_csv(&self) -> String {
        let mut s = format!(
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            self.time, self.kinetic_energy, self.mass, self.total_water, self.precip_mean, self.gmres_iterations
        );
        for (_, r) in &self.residuals {
            let _ = write!(s, ",{r:.17e}");
        }
        s
    }
}

/// Mean accumulated rain of each SSP with its anchor `x`.
fn ssp_precip(sys: &MmfSystem) -> Vec<([f64; 3], f64)> {
    sys.ssps.iter().map(|inst| (inst.anchor, column_mean(&inst.sim.model.mesh, &inst.sim.precip))).collect()
}

/// A line-oriented output file that can be closed with a truncation marker.
struct Sink {
    out: BufWriter<File>,
}

impl Sink {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        Ok(Self { out })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")?;
        Ok(())
    }

    fn truncate(&mut self, err: &MmfError) {
        let _ = writeln!(self.out, "# TRUNCATED: {err}");
        let _ = self.out.flush();
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Self-describing nodal snapshot of one simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub dim: usize,
    pub extent: [f64; 3],
    pub elements: [usize; 3],
    pub order: usize,
    pub periodic: [bool; 2],
    pub time: f64,
    /// Prognostic fields in state order.
    pub fields: Vec<(String, Vec<f64>)>,
}

impl Snapshot {
    pub fn capture(mesh: &Mesh, state: &PrognosticState, time: f64) -> Self {
        let dim = mesh.dim;
        let ax = &mesh.axes;
        let (extent, elements, periodic) = if dim == 2 {
            ([ax[0].length, 0.0, ax[1].length], [ax[0].n_elem, 1, ax[1].n_elem], [ax[0].periodic, false])
        } else {
            (
                [ax[0].length, ax[1].length, ax[2].length],
                [ax[0].n_elem, ax[1].n_elem, ax[2].n_elem],
                [ax[0].periodic, ax[1].periodic],
            )
        };
        let fields = Field::all(dim).into_iter().map(|f| (f.name(dim).to_string(), state.field(f).to_vec())).collect();
        Self { dim, extent, elements, order: ax[0].order(), periodic, time, fields }
    }

    pub fn mesh(&self) -> Result<Mesh> {
        let spec = if self.dim == 2 {
            BoxSpec::slab_2d(
                self.extent[0],
                self.extent[2],
                self.elements[0],
                self.elements[2],
                self.order,
                self.periodic[0],
            )
        } else {
            BoxSpec::box_3d(self.extent, self.elements, self.order, self.periodic)
        };
        Mesh::build_box(&spec)
    }

    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|f| f.0 == name).map(|f| f.1.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("mmf-snapshot 1\n");
        let _ = writeln!(s, "dim {}", self.dim);
        let _ = writeln!(s, "extent {:e} {:e} {:e}", self.extent[0], self.extent[1], self.extent[2]);
        let _ = writeln!(s, "elements {} {} {}", self.elements[0], self.elements[1], self.elements[2]);
        let _ = writeln!(s, "order {}", self.order);
        let _ = writeln!(s, "periodic {} {}", self.periodic[0], self.periodic[1]);
        let _ = writeln!(s, "time {:e}", self.time);
        let names: Vec<&str> = self.fields.iter().map(|f| f.0.as_str()).collect();
        let _ = writeln!(s, "fields {}", names.join(" "));
        let _ = writeln!(s, "nodes {}", self.fields.first().map_or(0, |f| f.1.len()));
        for (name, values) in &self.fields {
            let _ = writeln!(s, "field {name}");
            for v in values {
                let _ = writeln!(s, "{v:e}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| MmfError::Config(format!("malformed snapshot: {m}"));
        let mut lines = text.lines();
        let header = |lines: &mut std::str::Lines, tag: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {tag}")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(bad(&format!("expected '{tag}', got '{line}'")));
            }
            Ok(parts.map(String::from).collect())
        };
        let magic = header(&mut lines, "mmf-snapshot")?;
        if magic != ["1"] {
            return Err(bad("unsupported version"));
        }
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(v));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad(v));
        let boolean = |v: &str| v.parse::<bool>().map_err(|_| bad(v));
        let dim = int(&header(&mut lines, "dim")?[0])?;
        let e = header(&mut lines, "extent")?;
        let extent = [num(&e[0])?, num(&e[1])?, num(&e[2])?];
        let e = header(&mut lines, "elements")?;
        let elements = [int(&e[0])?, int(&e[1])?, int(&e[2])?];
        let order = int(&header(&mut lines, "order")?[0])?;
        let p = header(&mut lines, "periodic")?;
        let periodic = [boolean(&p[0])?, boolean(&p[1])?];
        let time = num(&header(&mut lines, "time")?[0])?;
        let names = header(&mut lines, "fields")?;
        let n = int(&header(&mut lines, "nodes")?[0])?;
        let mut fields = Vec::with_capacity(names.len());
        for name in names {
            let tag = header(&mut lines, "field")?;
            if tag != [name.clone()] {
                return Err(bad(&format!("expected field {name}")));
            }
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let line = lines.next().ok_or_else(|| bad("truncated field data"))?;
                values.push(num(line.trim())?);
            }
            fields.push((name, values));
        }
        Ok(Self { dim, extent, elements, order, periodic, time, fields })
    }

    /// Checksums listed in the `.meta` file: the whole file, then each field
    /// as little-endian `f64` bytes.
    pub fn meta(&self, text: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "time {:e}", self.time);
        let _ = writeln!(s, "file sha256 {}", hex(&Sha256::digest(text.as_bytes())));
        for (name, values) in &self.fields {
            let mut h = Sha256::new();
            for v in values {
                h.update(v.to_le_bytes());
            }
            let _ = writeln!(s, "field {name} sha256 {}", hex(&h.finalize()));
        }
        s
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `path` and `path.meta`.
pub fn write_snapshot(snapshot: &Snapshot, path: &Path) -> Result<()> {
    let text = snapshot.to_text();
    fs::write(path, &text)?;
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta");
    fs::write(PathBuf::from(meta), snapshot.meta(&text))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    Snapshot::parse(&fs::read_to_string(path)?)
}

/// Per-level profiles averaged over time and the horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedProfiles {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Time mean over the snapshots, then horizontal quadrature mean per level.
pub fn averaged_profiles(snapshots: &[Snapshot]) -> Result<AveragedProfiles> {
    let first = snapshots.first().ok_or_else(|| MmfError::Config("no snapshots to average".into()))?;
    let mesh = first.mesh()?;
    let n = mesh.n_global();
    let (mut u, mut th) = (vec![0.0; n], vec![0.0; n]);
    for s in snapshots {
        if (s.dim, s.extent, s.elements, s.order) != (first.dim, first.extent, first.elements, first.order) {
            return Err(MmfError::Shape("snapshots come from different meshes".into()));
        }
        let su = s.field("u").ok_or_else(|| MmfError::Config("snapshot lacks u".into()))?;
        let st = s.field("theta_vp").ok_or_else(|| MmfError::Config("snapshot lacks theta_vp".into()))?;
        for i in 0..n {
            u[i] += su[i];
            th[i] += st[i];
        }
    }
    let k = snapshots.len() as f64;
    u.iter_mut().chain(th.iter_mut()).for_each(|x| *x /= k);
    Ok(AveragedProfiles {
        z: (0..mesh.n_levels()).map(|l| mesh.z(mesh.node(0, l))).collect(),
        u: horizontal_average(&mesh, &u),
        theta: horizontal_average(&mesh, &th),
    })
}

impl AveragedProfiles {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("z,u,theta_v_perturbation\n");
        for i in 0..self.z.len() {
            let _ = writeln!(s, "{:.17e},{:.17e},{:.17e}", self.z[i], self.u[i], self.theta[i]);
        }
        s
    }
}

/// Largest absolute difference per field, or an error if the snapshots
/// do not describe the same grid.
pub fn diff_snapshots(a: &Snapshot, b: &Snapshot) -> Result<Vec<(String, f64)>> {
    if (a.dim, a.extent, a.elements, a.order) != (b.dim, b.extent, b.elements, b.order)
        || a.fields.len() != b.fields.len()
    {
        return Err(MmfError::Shape("snapshots have different layouts".into()));
    }
    a.fields
        .iter()
        .zip(&b.fields)
        .map(|((na, va), (nb, vb))| {
            if na != nb || va.len() != vb.len() {
                return Err(MmfError::Shape(format!("field mismatch {na} / {nb}")));
            }
            Ok((na.clone(), va.iter().zip(vb).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))))
        })
        .collect()
}

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub steps: usize,
    pub final_record: Option<DiagnosticsRecord>,
    pub cost: Option<CostReport>,
    pub warnings: Vec<String>,
}

/// The directory outputs go to: the environment override, else the config.
pub fn resolve_output_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone())
}

fn due(time: f64, next: f64, dt: f64) -> bool {
    time >= next - 1e-6 * dt
}

/// Execute one run and write its artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = resolve_output_dir(cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    if cfg.mode == RunMode::Analyze {
        let report = CostReport::new(cfg.cost)?;
        fs::write(dir.join("cost_report.txt"), report.to_text())?;
        fs::write(dir.join("cost_report.csv"), report.to_csv())?;
        return Ok(RunSummary {
            output_dir: dir,
            steps: 0,
            final_record: None,
            cost: Some(report),
            warnings: Vec::new(),
        });
    }
    let case = cfg.case_config();
    let build = build_case(&case)?;
    fs::write(dir.join("sounding.txt"), build.sounding.to_text())?;
    let mut summary =
        RunSummary { output_dir: dir.clone(), steps: 0, final_record: None, cost: None, warnings: build.warnings };
    match build.case {
        BuiltCase::Standard(sim) => run_standard(sim, cfg, &case, &dir, &mut summary)?,
        BuiltCase::Mmf(sys) => run_mmf(sys, cfg, &case, &dir, &mut summary)?,
    }
    Ok(summary)
}

fn check_finite(state: &PrognosticState, time: f64) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(MmfError::State(format!("non-finite state at t = {time} s")))
    }
}

/// Snapshot bookkeeping shared by both run kinds.
struct Snapshots {
    dir: PathBuf,
    interval: f64,
    next: f64,
    count: usize,
    kept: Vec<Snapshot>,
}

impl Snapshots {
    fn new(dir: &Path, interval: f64) -> Self {
        Self { dir: dir.to_path_buf(), interval, next: 0.0, count: 0, kept: Vec::new() }
    }

    fn maybe(&mut self, mesh: &Mesh, state: &PrognosticState, time: f64, dt: f64, last: bool) -> Result<()> {
        let take = last || if self.interval > 0.0 { due(time, self.next, dt) } else { self.count == 0 };
        if !take {
            return Ok(());
        }
        let snap = Snapshot::capture(mesh, state, time);
        write_snapshot(&snap, &self.dir.join(format!("snapshot_{:05}.txt", self.count)))?;
        self.count += 1;
        if self.interval > 0.0 {
            while due(time, self.next, dt) {
                self.next += self.interval;
            }
        }
        self.kept.push(snap);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if !self.kept.is_empty() {
            fs::write(self.dir.join("profiles.csv"), averaged_profiles(&self.kept)?.to_csv())?;
        }
        Ok(())
    }
}

fn run_standard(
    mut sim: Simulator,
    cfg: &RunConfig,
    case: &CaseConfig,
    dir: &Path,
    summary: &mut RunSummary,
) -> Result<()> {
    let mut diag = Sink::create(&dir.join("diagnostics.csv"), &DiagnosticsRecord::header(&[]))?;
    let mut snaps = Snapshots::new(dir, cfg.snapshot_interval);
    let n = case.n_steps();
    let result = (|| -> Result<DiagnosticsRecord> {
        let mut rec = DiagnosticsRecord::standard(&sim, 0);
        diag.line(&rec.to_csv())?;
        snaps.maybe(&sim.model.mesh, &sim.state, sim.time, sim.dt, n == 0)?;
        for step in 0..n {
            let stats = sim.step(None)?;
            check_finite(&sim.state, sim.time)?;
            rec = DiagnosticsRecord::standard(&sim, stats.gmres_iterations);
            diag.line(&rec.to_csv())?;
            snaps.maybe(&sim.model.mesh, &sim.state, sim.time, sim.dt, step + 1 == n)?;
            summary.steps = step + 1;
        }
        Ok(rec)
    })();
    match result {
        Ok(rec) => {
            diag.finish()?;
            snaps.finish()?;
            let mesh = &sim.model.mesh;
            let mut s = String::from("column,x,y,precip_mm\n");
            for (c, p) in sim.precip.iter().enumerate() {
                let x = mesh.coords(mesh.node(c, 0));
                let _ = writeln!(s, "{c},{:.17e},{:.17e},{p:.17e}", x[0], x[1]);
            }
            fs::write(dir.join("precip.csv"), s)?;
            summary.final_record = Some(rec);
            Ok(())
        }
        Err(e) => {
            diag.truncate(&e);
            Err(e)
        }
    }
}

fn run_mmf(mut sys: MmfSystem, cfg: &RunConfig, case: &CaseConfig, dir: &Path, summary: &mut RunSummary) -> Result<()> {
    let mask = sys.cfg.mask.clone();
    let mut diag = Sink::create(&dir.join("diagnostics.csv"), &DiagnosticsRecord::header(&mask))?;
    let mut coupling = Sink::create(&dir.join("coupling.csv"), "time,ssp,level,var,abs,rel")?;
    let mut snaps = Snapshots::new(dir, cfg.snapshot_interval);
    let n = case.n_steps();
    let dt = sys.lsp.dt;
    let mut next_coupling = 0.0;
    let result = (|| -> Result<DiagnosticsRecord> {
        let mut report = sys.residuals()?;
        let mut rec = DiagnosticsRecord::mmf(&sys, &report, 0);
        diag.line(&rec.to_csv())?;
        snaps.maybe(&sys.lsp.model.mesh, &sys.lsp.state, sys.time(), dt, n == 0)?;
        for step in 0..=n {
            if cfg.coupling_interval == 0.0 || due(sys.time(), next_coupling, dt) {
                for r in &report.rows {
                    coupling.line(&format!(
                        "{:.17e},{},{},{},{:.17e},{:.17e}",
                        report.time,
                        r.ssp,
                        r.level,
                        r.var.name(),
                        r.abs,
                        r.rel
                    ))?;
                }
                while cfg.coupling_interval > 0.0 && due(sys.time(), next_coupling, dt) {
                    next_coupling += cfg.coupling_interval;
                }
            }
            if step == n {
                break;
            }
            let stepped = sys.step()?;
            check_finite(&sys.lsp.state, sys.time())?;
            for inst in &sys.ssps {
                check_finite(&inst.sim.state, sys.time())?;
            }
            report = sys.residuals()?;
            rec = DiagnosticsRecord::mmf(&sys, &report, stepped.gmres_iterations);
            diag.line(&rec.to_csv())?;
            snaps.maybe(&sys.lsp.model.mesh, &sys.lsp.state, sys.time(), dt, step + 1 == n)?;
            summary.steps = step + 1;
        }
        Ok(rec)
    })();
    match result {
        Ok(rec) => {
            diag.finish()?;
            coupling.finish()?;
            snaps.finish()?;
            let mut s = String::from("ssp,x,y,precip_mm\n");
            for (id, (anchor, p)) in ssp_precip(&sys).into_iter().enumerate() {
                let _ = writeln!(s, "{id},{:.17e},{:.17e},{p:.17e}", anchor[0], anchor[1]);
            }
            fs::write(dir.join("precip.csv"), s)?;
            summary.final_record = Some(rec);
            Ok(())
        }
        Err(e) => {
            diag.truncate(&e);
            coupling.truncate(&e);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PhysConstants;

    fn unit_square() -> Mesh {
        Mesh::build_box(&BoxSpec::slab_2d(1.0, 1.0, 3, 2, 4, false)).unwrap()
    }

    #[test]
    fn kinetic_energy_oracles() {
        let mesh = unit_square();
        let n = mesh.n_global();
        let ones = vec![1.0; n];
        let zero = vec![0.0; n];
        assert_eq!(kinetic_energy_density(&mesh, &ones, &[&zero, &zero]), 0.0);
        let two = vec![2.0; n];
        assert!((kinetic_energy_density(&mesh, &ones, &[&two, &zero]) - 2.0).abs() < 1e-12);
        let x: Vec<f64> = (0..n).map(|i| mesh.coords(i)[0]).collect();
        assert!((kinetic_energy_density(&mesh, &ones, &[&x, &zero]) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let mut cfg = RunConfig::new(RunMode::Mmf, Preset::Desk, CaseId::Squall, Tier::Mmf);
        cfg.seed = 99;
        cfg.case.dt = 1.5;
        cfg.case.mmf.mask = vec![CoupledVar::U, CoupledVar::Theta];
        cfg.sounding_file = Some("/tmp/s.txt".into());
        cfg.kessler.k1 = 0.1 + 0.2;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text, &CliOverrides::default()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        let err = RunConfig::parse("mesh.bogus = 1\n", &CliOverrides::default());
        assert!(matches!(err, Err(MmfError::Config(_))));
        assert!(RunConfig::parse("time.dt = 1\ntime.dt = 2\n", &CliOverrides::default()).is_err());
        assert!(RunConfig::parse("run.mode = mmf\nrun.tier = fine\n", &CliOverrides::default()).is_err());
        // Every emitted key is settable.
        let mut probe = cfg.clone();
        for (k, v) in cfg.entries() {
            if !k.starts_with("run.") || k == "run.seed" {
                probe.set(k, &v).unwrap();
            }
        }
    }

    #[test]
    fn cli_overrides_take_precedence() {
        let cli =
            CliOverrides { preset: Some(Preset::Paper), mode: Some(RunMode::Mmf), workers: Some(8), seed: Some(5) };
        let cfg = RunConfig::parse("run.preset = desk\nrun.seed = 1\nmmf.workers = 2\n", &cli).unwrap();
        assert_eq!((cfg.preset, cfg.mode, cfg.case.mmf.workers, cfg.seed), (Preset::Paper, RunMode::Mmf, 8, 5));
        assert_eq!(cfg.case.extent[0], 150_000.0);
        assert_eq!(cfg.case_config().perturbation.seed, 5);
    }

    fn sample_snapshot() -> (Mesh, Snapshot) {
        let mesh = Mesh::build_box(&BoxSpec::slab_2d(1000.0, 500.0, 2, 2, 3, true)).unwrap();
        let mut state = PrognosticState::for_mesh(&mesh);
        for (i, x) in state.as_mut_slice().iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin() * 1e-3 + 1.0 / 3.0;
        }
        let snap = Snapshot::capture(&mesh, &state, 12.5);
        (mesh, snap)
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, snap) = sample_snapshot();
        assert_eq!(snap.fields.len(), 5 + 2);
        let path = dir.path().join("s.txt");
        write_snapshot(&snap, &path).unwrap();
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.time, 12.5);
        let meta = fs::read_to_string(dir.path().join("s.txt.meta")).unwrap();
        assert!(meta.lines().count() == 2 + snap.fields.len());
        assert!(diff_snapshots(&back, &snap).unwrap().iter().all(|d| d.1 == 0.0));
        assert!(matches!(read_snapshot(&dir.path().join("missing.txt")), Err(MmfError::Io(_))));
    }

    #[test]
    fn averaged_profile_examples() {
        let (mesh, snap) = sample_snapshot();
        let n = mesh.n_global();
        let with = |u: Vec<f64>, th: Vec<f64>, t: f64| {
            let mut s = snap.clone();
            s.time = t;
            for (name, v) in s.fields.iter_mut() {
                match name.as_str() {
                    "u" => *v = u.clone(),
                    "theta_vp" => *v = th.clone(),
                    _ => {}
                }
            }
            s
        };
        let c = with(vec![2.5; n], vec![-1.0; n], 0.0);
        let p = averaged_profiles(std::slice::from_ref(&c)).unwrap();
        assert!(p.u.iter().all(|v| (v - 2.5).abs() < 1e-14));
        let neg = with(vec![-2.5; n], vec![1.0; n], 1.0);
        let p = averaged_profiles(&[c, neg]).unwrap();
        assert!(p.u.iter().chain(&p.theta).all(|v| v.abs() < 1e-14));
        let z: Vec<f64> = (0..n).map(|i| mesh.z(i)).collect();
        let p = averaged_profiles(&[with(z.clone(), z, 0.0)]).unwrap();
        for (a, b) in p.u.iter().zip(&p.z) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn analyze_writes_cost_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(RunMode::Analyze, Preset::Desk, CaseId::Squall, Tier::Coarse);
        cfg.output_dir = dir.path().to_path_buf();
        let s = run(&cfg).unwrap();
        let report = s.cost.unwrap();
        let (is, im) = report.simplified.unwrap();
        assert!((is / report.intensity_standard - 1.0).abs() < 1e-3);
        assert!((im / report.intensity_mmf - 1.0).abs() < 1e-3);
        let csv = fs::read_to_string(dir.path().join("cost_report.csv")).unwrap();
        assert!(csv.starts_with("n_p,"));
    }

    #[test]
    fn total_water_of_reference_only() {
        let mesh = unit_square();
        let c = PhysConstants::default();
        let levels = mesh.n_levels();
        let z: Vec<f64> = (0..levels).map(|l| mesh.z(mesh.node(0, l))).collect();
        let reference =
            ReferenceState::from_levels(&mesh, &c, z, vec![300.0; levels], vec![0.01; levels], vec![1.0e5; levels]);
        let state = PrognosticState::for_mesh(&mesh);
        let rho: Vec<f64> = reference.rho.iter().map(|r| r * 0.01).collect();
        assert!((total_water(&state, &reference, &mesh) - integrate(&mesh, &rho)).abs() < 1e-15);
    }
}
