//! Closed-form cost model comparing standard and MMF runs: floating-point
//! operations, inter-rank communication volume and arithmetic intensity,
//! plus a planner for column-preserving rank partitions.

use crate::error::{config_err, Result};

/// Per-point kernel constants of the flop model.
pub const FLOP_LINEAR: f64 = 816.0;
pub const FLOP_CONST: f64 = 4635.0;
/// Bytes per communicated boundary point per exchange, and the two-sided form.
pub const BYTES_PER_POINT: f64 = 784.0;
pub const BYTES_TWO_SIDED: f64 = 1568.0;
/// Coefficients of the simplified intensity, `816/1568` and `4635/1568` rounded.
pub const SIMPLIFIED_LINEAR: f64 = 0.520;
pub const SIMPLIFIED_CONST: f64 = 2.956;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Standard,
    Mmf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModelInput {
    /// Points per element per direction, `N + 1`.
    pub n_p: usize,
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    /// Simulated duration.
    pub duration: f64,
    pub dt: f64,
    pub r_t: f64,
    pub r_x: f64,
    pub r_z: f64,
    pub n_rx: usize,
    pub n_ry: usize,
}

impl Default for CostModelInput {
    fn default() -> Self {
        Self {
            n_p: 5,
            lx: 150_000.0,
            ly: 150_000.0,
            lz: 24_000.0,
            dx: 200.0,
            dy: 200.0,
            dz: 200.0,
            duration: 28_800.0,
            dt: 0.2,
            r_t: 10.0,
            r_x: 10.0,
            r_z: 1.0,
            n_rx: 4,
            n_ry: 4,
        }
    }
}

impl CostModelInput {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lx, self.ly, self.lz, self.dx, self.dy, self.dz, self.duration, self.dt];
        if self.n_p < 2 || positive.iter().any(|v| !(*v > 0.0)) {
            return config_err("cost model needs n_p >= 2 and positive lengths, spacings and times");
        }
        if [self.r_t, self.r_x, self.r_z].iter().any(|r| !(*r >= 1.0)) || self.n_rx == 0 || self.n_ry == 0 {
            return config_err("refinement ratios must be >= 1 and rank factors >= 1");
        }
        Ok(())
    }

    /// Polynomial order `N`.
    pub fn order(&self) -> f64 {
        (self.n_p - 1) as f64
    }

    pub fn n_ranks(&self) -> usize {
        self.n_rx * self.n_ry
    }

    /// Number of elements.
    pub fn n_elements(&self, mode: Mode) -> f64 {
        let n3 = self.order().powi(3);
        let base = self.lx * self.ly * self.lz / (n3 * self.dx * self.dy * self.dz);
        match mode {
            Mode::Standard => base,
            Mode::Mmf => base / (self.r_x * self.r_z),
        }
    }

    /// Number of time steps.
    pub fn n_steps(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Standard => self.duration / self.dt,
            Mode::Mmf => self.duration / (self.r_t * self.dt),
        }
    }

    /// Lateral boundary points of one rank's partition.
    pub fn boundary_points(&self, mode: Mode) -> f64 {
        let n = self.order();
        let np2 = (self.n_p * self.n_p) as f64;
        let ey = self.ly / (self.n_ry as f64 * n * self.dy);
        let (ex, ez) = match mode {
            Mode::Standard => (self.lx / (self.n_rx as f64 * n * self.dx), self.lz / (n * self.dz)),
            Mode::Mmf => (self.lx / (self.r_x * self.n_rx as f64 * n * self.dx), self.lz / (self.r_z * n * self.dz)),
        };
        2.0 * (ex + ey) * ez * np2
    }
}

fn kernel(n_p: f64) -> f64 {
    n_p.powi(3) * (FLOP_LINEAR * n_p + FLOP_CONST)
}

/// Total flops from step and element counts.
pub fn flops(input: &CostModelInput, mode: Mode) -> f64 {
    let n_p = input.n_p as f64;
    let factor = match mode {
        Mode::Standard => 1.0,
        Mode::Mmf => 1.0 + input.r_t * input.r_x * input.r_z * n_p,
    };
    input.n_steps(mode) * input.n_elements(mode) * factor * kernel(n_p)
}

/// Total flops from the grid-size closed form.
pub fn flops_closed_form(input: &CostModelInput, mode: Mode) -> f64 {
    let n_p = input.n_p as f64;
    let n3 = input.order().powi(3);
    let base = input.duration / input.dt * input.lx * input.ly * input.lz / (n3 * input.dx * input.dy * input.dz)
        * kernel(n_p);
    match mode {
        Mode::Standard => base,
        Mode::Mmf => base * (1.0 / (input.r_t * input.r_x * input.r_z) + n_p),
    }
}

/// Total bytes from step counts and boundary points.
pub fn bytes(input: &CostModelInput, mode: Mode) -> f64 {
    input.n_steps(mode) * input.n_ranks() as f64 * BYTES_PER_POINT * input.boundary_points(mode)
}

/// Total bytes from the grid-size closed form.
pub fn bytes_closed_form(input: &CostModelInput, mode: Mode) -> f64 {
    let n = input.order();
    let np2 = (input.n_p * input.n_p) as f64;
    let (nrx, nry) = (input.n_rx as f64, input.n_ry as f64);
    let y = input.ly / (nry * n * input.dy);
    let z = input.lz / (n * input.dz);
    let steps = input.duration / input.dt;
    let ranks = input.n_ranks() as f64;
    match mode {
        Mode::Standard => BYTES_TWO_SIDED * ranks * steps * (input.lx / (nrx * n * input.dx) + y) * z * np2,
        Mode::Mmf => {
            BYTES_TWO_SIDED * ranks / (input.r_t * input.r_z)
                * steps
                * (input.lx / (input.r_x * nrx * n * input.dx) + y)
                * z
                * np2
        }
    }
}

/// `(I^S, I^M)` as `F / B`.
pub fn arithmetic_intensity(input: &CostModelInput) -> (f64, f64) {
    (flops(input, Mode::Standard) / bytes(input, Mode::Standard), flops(input, Mode::Mmf) / bytes(input, Mode::Mmf))
}

/// `(I^S, I^M)` from the simplified closed form, which assumes square
/// partitions, `L_x = L_y`, `dx = dy`, `R_x = R_t = R` and `R_z = 1`; `L_x`
/// and `R_x` are used for `L` and `R`.
pub fn simplified_intensity(input: &CostModelInput) -> (f64, f64) {
    let n_p = input.n_p as f64;
    let r = input.r_x;
    let ratio = input.n_rx as f64 * input.order() * input.dx / input.lx;
    let k = n_p * (SIMPLIFIED_LINEAR * n_p + SIMPLIFIED_CONST);
    (k / (2.0 * ratio), (1.0 / r + r * n_p) / ((1.0 / r + 1.0) * ratio) * k)
}

/// Whether the simplified intensity's assumptions hold (to 1e-12 relative).
pub fn simplified_assumptions_hold(input: &CostModelInput) -> bool {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    input.n_rx == input.n_ry
        && close(input.lx, input.ly)
        && close(input.dx, input.dy)
        && close(input.r_x, input.r_t)
        && input.r_z == 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub input: CostModelInput,
    pub flops_standard: f64,
    pub flops_mmf: f64,
    pub bytes_standard: f64,
    pub bytes_mmf: f64,
    pub intensity_standard: f64,
    pub intensity_mmf: f64,
    /// Simplified-form intensities when their assumptions hold.
    pub simplified: Option<(f64, f64)>,
}

impl CostReport {
    pub fn new(input: CostModelInput) -> Result<Self> {
        input.validate()?;
        let flops_standard = flops(&input, Mode::Standard);
        let flops_mmf = flops(&input, Mode::Mmf);
        let bytes_standard = bytes(&input, Mode::Standard);
        let bytes_mmf = bytes(&input, Mode::Mmf);
        Ok(Self {
            input,
            flops_standard,
            flops_mmf,
            bytes_standard,
            bytes_mmf,
            intensity_standard: flops_standard / bytes_standard,
            intensity_mmf: flops_mmf / bytes_mmf,
            simplified: simplified_assumptions_hold(&input).then(|| simplified_intensity(&input)),
        })
    }

    pub fn flop_ratio(&self) -> f64 {
        self.flops_mmf / self.flops_standard
    }

    pub fn byte_ratio(&self) -> f64 {
        self.bytes_mmf / self.bytes_standard
    }

    pub fn intensity_ratio(&self) -> f64 {
        self.intensity_mmf / self.intensity_standard
    }

    fn rows(&self) -> Vec<(&'static str, f64)> {
        let i = &self.input;
        let mut rows = vec![
            ("n_p", i.n_p as f64),
            ("lx_m", i.lx),
            ("ly_m", i.ly),
            ("lz_m", i.lz),
            ("dx_m", i.dx),
            ("dy_m", i.dy),
            ("dz_m", i.dz),
            ("duration_s", i.duration),
            ("dt_s", i.dt),
            ("r_t", i.r_t),
            ("r_x", i.r_x),
            ("r_z", i.r_z),
            ("n_rx", i.n_rx as f64),
            ("n_ry", i.n_ry as f64),
            ("flops_standard", self.flops_standard),
            ("flops_mmf", self.flops_mmf),
            ("bytes_standard", self.bytes_standard),
            ("bytes_mmf", self.bytes_mmf),
            ("intensity_standard", self.intensity_standard),
            ("intensity_mmf", self.intensity_mmf),
            ("flop_ratio", self.flop_ratio()),
            ("byte_ratio", self.byte_ratio()),
            ("intensity_ratio", self.intensity_ratio()),
        ];
        if let Some((s, m)) = self.simplified {
            rows.push(("simplified_intensity_standard", s));
            rows.push(("simplified_intensity_mmf", m));
        }
        rows
    }

    pub fn to_text(&self) -> String {
        self.rows().iter().map(|(k, v)| format!("{k:<32} {v:.6e}\n")).collect()
    }

    pub fn to_csv(&self) -> String {
        let rows = self.rows();
        let header: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let values: Vec<String> = rows.iter().map(|r| format!("{:.17e}", r.1)).collect();
        format!("{}\n{}\n", header.join(","), values.join(","))
    }
}

/// Element counts of a box mesh relevant to partitioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshSummary {
    pub dim: usize,
    /// Elements along x, y (1 in 2D) and z.
    pub elements: [usize; 3],
    pub n_p: usize,
    pub periodic: [bool; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankLayout {
    pub rank: usize,
    pub x_elements: std::ops::Range<usize>,
    pub y_elements: std::ops::Range<usize>,
    /// Always the full vertical extent.
    pub z_elements: std::ops::Range<usize>,
    /// Points on lateral faces shared with another rank.
    pub boundary_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub ranks: Vec<RankLayout>,
}

impl PartitionPlan {
    pub fn total_boundary_points(&self) -> usize {
        self.ranks.iter().map(|r| r.boundary_points).sum()
    }
}

/// Split the lateral element grid into `n_rx x n_ry` equal rectangles that
/// keep whole columns, and count the points on faces between ranks.
pub fn plan_partition(mesh: &MeshSummary, n_rx: usize, n_ry: usize) -> Result<PartitionPlan> {
    let [ex, ey, ez] = mesh.elements;
    if n_rx == 0 || n_ry == 0 {
        return config_err("rank factors must be at least 1");
    }
    if mesh.dim == 2 && n_ry != 1 {
        return config_err("a 2D mesh can only be partitioned along x (use n_ry = 1)");
    }
    for (axis, e, n) in [("x", ex, n_rx), ("y", ey, n_ry)] {
        if e % n != 0 {
            let options: Vec<String> = (1..=e).filter(|d| e % d == 0).map(|d| d.to_string()).collect();
            return config_err(format!(
                "{e} elements along {axis} cannot be split over {n} ranks; use one of {}",
                options.join(", ")
            ));
        }
    }
    let (lx, ly) = (ex / n_rx, ey / n_ry);
    // Points on one element face: N_p^2 in 3D, N_p in 2D.
    let face = mesh.n_p.pow(mesh.dim as u32 - 1);
    let faces = |n: usize, idx: usize, periodic: bool| -> usize {
        match n {
            1 => 0,
            _ if periodic => 2,
            _ => usize::from(idx > 0) + usize::from(idx + 1 < n),
        }
    };
    let mut ranks = Vec::with_capacity(n_rx * n_ry);
    for j in 0..n_ry {
        for i in 0..n_rx {
            let x_faces = faces(n_rx, i, mesh.periodic[0]);
            let y_faces = faces(n_ry, j, mesh.periodic[1]);
            let points = (x_faces * ly + y_faces * lx) * ez * face;
            ranks.push(RankLayout {
                rank: j * n_rx + i,
                x_elements: i * lx..(i + 1) * lx,
                y_elements: j * ly..(j + 1) * ly,
                z_elements: 0..ez,
                boundary_points: points,
            });
        }
    }
    Ok(PartitionPlan { ranks })
}
