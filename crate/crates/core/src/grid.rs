//! Structured spectral-element box meshes on Legendre-Gauss-Lobatto nodes.
//!
//! Every mesh is a tensor product of 1D [`Axis`] grids. The vertical axis is
//! always the last one (`z` in 2D `(x, z)` slabs and 3D `(x, y, z)` boxes),
//! so a global node index decomposes as `column + n_columns * level`.

use crate::error::{config_err, Result};

/// Largest polynomial order accepted by [`LglRule::new`].
pub const MAX_ORDER: usize = 16;

/// Legendre polynomial `P_n(x)` and its derivative.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    let (mut d_prev, mut d) = (0.0, 1.0);
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        let d_next = d_prev + (2.0 * kf + 1.0) * p;
        p_prev = p;
        p = p_next;
        d_prev = d;
        d = d_next;
    }
    (p, d)
}

/// LGL points, weights and the nodal differentiation matrix of order `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LglRule {
    pub order: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row-major `(N+1) x (N+1)`; `diff[i][j] = h_j'(xi_i)`.
    pub diff: Vec<f64>,
    bary: Vec<f64>,
}

impl LglRule {
    /// Nodes are the roots of `(1 - x^2) P_N'(x)`, found by Newton iteration
    /// started from the Chebyshev-Gauss-Lobatto points.
    pub fn new(order: usize) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&order) {
            return config_err(format!("LGL order {order} outside 1..={MAX_ORDER}"));
        }
        let n = order;
        let nf = n as f64;
        let np = n + 1;
        let mut points = vec![0.0; np];
        for (i, p) in points.iter_mut().enumerate() {
            let mut x = -(std::f64::consts::PI * i as f64 / nf).cos();
            if i > 0 && i < n {
                for _ in 0..100 {
                    let (pn, _) = legendre(n, x);
                    let (pm, _) = legendre(n - 1, x);
                    // (1-x^2) P_N' = N (P_{N-1} - x P_N), whose derivative is -N(N+1) P_N
                    let f = nf * (pm - x * pn);
                    let df = -nf * (nf + 1.0) * pn;
                    let dx = f / df;
                    x -= dx;
                    if dx.abs() < 1e-15 {
                        break;
                    }
                }
            }
            *p = x;
        }
        points[0] = -1.0;
        points[n] = 1.0;
        // Enforce exact antisymmetry of the node set.
        for i in 0..np / 2 {
            let m = 0.5 * (points[n - i] - points[i]);
            points[i] = -m;
            points[n - i] = m;
        }
        if np % 2 == 1 {
            points[n / 2] = 0.0;
        }
        let weights: Vec<f64> = points
            .iter()
            .map(|&x| {
                let (pn, _) = legendre(n, x);
                2.0 / (nf * (nf + 1.0) * pn * pn)
            })
            .collect();

        let bary: Vec<f64> = (0..np)
            .map(|j| {
                let prod: f64 = (0..np).filter(|&k| k != j).map(|k| points[j] - points[k]).product();
                1.0 / prod
            })
            .collect();
        let mut diff = vec![0.0; np * np];
        for i in 0..np {
            let mut diag = 0.0;
            for j in 0..np {
                if i != j {
                    let v = bary[j] / bary[i] / (points[i] - points[j]);
                    diff[i * np + j] = v;
                    diag -= v;
                }
            }
            diff[i * np + i] = diag;
        }
        Ok(Self { order, points, weights, diff, bary })
    }

    pub fn n_points(&self) -> usize {
        self.order + 1
    }

    /// Values of all Lagrange basis functions at `x` (barycentric form).
    pub fn basis_at(&self, x: f64) -> Vec<f64> {
        let np = self.n_points();
        if let Some(k) = self.points.iter().position(|&p| p == x) {
            let mut out = vec![0.0; np];
            out[k] = 1.0;
            return out;
        }
        let terms: Vec<f64> = (0..np).map(|j| self.bary[j] / (x - self.points[j])).collect();
        let denom: f64 = terms.iter().sum();
        terms.into_iter().map(|t| t / denom).collect()
    }

    /// Interpolate nodal `values` at `x`.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        self.basis_at(x).iter().zip(values).map(|(b, v)| b * v).sum()
    }
}

/// One tensor direction of a box mesh.
#[derive(Debug, Clone)]
pub struct Axis {
    pub length: f64,
    pub n_elem: usize,
    pub periodic: bool,
    pub rule: LglRule,
    /// Element width.
    pub h: f64,
    /// Distinct grid points along the axis.
    pub n_global: usize,
    /// Coordinate of each distinct grid point.
    pub coords: Vec<f64>,
    /// Assembled 1D lumped mass (`w h / 2` summed over elements).
    pub mass: Vec<f64>,
}

impl Axis {
    pub fn new(length: f64, n_elem: usize, order: usize, periodic: bool) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return config_err(format!("axis length must be positive, got {length}"));
        }
        if n_elem == 0 {
            return config_err("element count must be at least 1");
        }
        let rule = LglRule::new(order)?;
        let h = length / n_elem as f64;
        let n_global = if periodic { n_elem * order } else { n_elem * order + 1 };
        let mut coords = vec![0.0; n_global];
        let mut mass = vec![0.0; n_global];
        for e in 0..n_elem {
            let x0 = e as f64 * h;
            for i in 0..=order {
                let g = Self::map(e, i, order, n_global, periodic);
                if !(periodic && e == n_elem - 1 && i == order) {
                    coords[g] = x0 + 0.5 * h * (rule.points[i] + 1.0);
                }
                mass[g] += rule.weights[i] * 0.5 * h;
            }
        }
        Ok(Self { length, n_elem, periodic, rule, h, n_global, coords, mass })
    }

    fn map(e: usize, i: usize, order: usize, n_global: usize, periodic: bool) -> usize {
        let g = e * order + i;
        if periodic {
            g % n_global
        } else {
            g
        }
    }

    pub fn order(&self) -> usize {
        self.rule.order
    }

    /// Global grid index of local node `i` in element `e`.
    pub fn global(&self, e: usize, i: usize) -> usize {
        Self::map(e, i, self.order(), self.n_global, self.periodic)
    }

    /// 1D direct stiffness summation of element-local values (`n_elem * (N+1)`).
    pub fn dss_sum(&self, local: &[f64]) -> Vec<f64> {
        let np = self.order() + 1;
        let mut out = vec![0.0; self.n_global];
        for e in 0..self.n_elem {
            for i in 0..np {
                out[self.global(e, i)] += local[e * np + i];
            }
        }
        out
    }

    pub fn scatter(&self, global: &[f64]) -> Vec<f64> {
        let np = self.order() + 1;
        let mut out = vec![0.0; self.n_elem * np];
        for e in 0..self.n_elem {
            for i in 0..np {
                out[e * np + i] = global[self.global(e, i)];
            }
        }
        out
    }
}

/// Parameters for [`Mesh::build_box`]. Vectors are ordered `(x, z)` in 2D
/// and `(x, y, z)` in 3D; `periodic` covers the lateral axes only.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSpec {
    pub extents: Vec<f64>,
    pub elements: Vec<usize>,
    pub orders: Vec<usize>,
    pub periodic: Vec<bool>,
}

impl BoxSpec {
    pub fn slab_2d(lx: f64, lz: f64, nex: usize, nez: usize, order: usize, periodic_x: bool) -> Self {
        Self { extents: vec![lx, lz], elements: vec![nex, nez], orders: vec![order, order], periodic: vec![periodic_x] }
    }

    pub fn box_3d(ext: [f64; 3], elems: [usize; 3], order: usize, periodic: [bool; 2]) -> Self {
        Self { extents: ext.to_vec(), elements: elems.to_vec(), orders: vec![order; 3], periodic: periodic.to_vec() }
    }
}

/// Affine tensor-product spectral-element mesh with its DSS map.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub dim: usize,
    pub axes: Vec<Axis>,
    n_local_axis: Vec<usize>,
    n_local: usize,
    n_elements: usize,
    l2g: Vec<usize>,
    n_global: usize,
    /// Constant Jacobian determinant of the reference-to-physical map.
    pub jacobian: f64,
    /// `d xi / d x` per axis.
    pub metric: Vec<f64>,
    /// `w * J` at each local node of any element.
    pub local_weights: Vec<f64>,
    mass: Vec<f64>,
    coords: Vec<[f64; 3]>,
}

impl Mesh {
    pub fn build_box(spec: &BoxSpec) -> Result<Self> {
        let dim = spec.extents.len();
        if dim != 2 && dim != 3 {
            return config_err(format!("mesh dimension must be 2 or 3, got {dim}"));
        }
        if spec.elements.len() != dim || spec.orders.len() != dim || spec.periodic.len() != dim - 1 {
            return config_err("box spec vectors have inconsistent lengths");
        }
        let axes = (0..dim)
            .map(|a| {
                let periodic = a < dim - 1 && spec.periodic[a];
                Axis::new(spec.extents[a], spec.elements[a], spec.orders[a], periodic)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_local_axis: Vec<usize> = axes.iter().map(|a| a.order() + 1).collect();
        let n_local: usize = n_local_axis.iter().product();
        let n_elements: usize = axes.iter().map(|a| a.n_elem).product();
        let n_global: usize = axes.iter().map(|a| a.n_global).product();

        let mut l2g = vec![0; n_elements * n_local];
        let mut e_idx = vec![0; dim];
        let mut l_idx = vec![0; dim];
        for e in 0..n_elements {
            unravel(e, axes.iter().map(|a| a.n_elem), &mut e_idx);
            for l in 0..n_local {
                unravel(l, n_local_axis.iter().copied(), &mut l_idx);
                let mut g = 0;
                let mut stride = 1;
                for a in 0..dim {
                    g += axes[a].global(e_idx[a], l_idx[a]) * stride;
                    stride *= axes[a].n_global;
                }
                l2g[e * n_local + l] = g;
            }
        }

        let jacobian: f64 = axes.iter().map(|a| 0.5 * a.h).product();
        let metric: Vec<f64> = axes.iter().map(|a| 2.0 / a.h).collect();
        let mut local_weights = vec![0.0; n_local];
        for (l, w) in local_weights.iter_mut().enumerate() {
            unravel(l, n_local_axis.iter().copied(), &mut l_idx);
            *w = jacobian * (0..dim).map(|a| axes[a].rule.weights[l_idx[a]]).product::<f64>();
        }

        let mut coords = vec![[0.0; 3]; n_global];
        let mut g_idx = vec![0; dim];
        for (g, c) in coords.iter_mut().enumerate() {
            unravel(g, axes.iter().map(|a| a.n_global), &mut g_idx);
            c[0] = axes[0].coords[g_idx[0]];
            if dim == 3 {
                c[1] = axes[1].coords[g_idx[1]];
            }
            c[2] = axes[dim - 1].coords[g_idx[dim - 1]];
        }

        let mut mesh = Self {
            dim,
            axes,
            n_local_axis,
            n_local,
            n_elements,
            l2g,
            n_global,
            jacobian,
            metric,
            local_weights,
            mass: Vec::new(),
            coords,
        };
        let local: Vec<f64> = (0..n_elements).flat_map(|_| mesh.local_weights.iter().copied()).collect();
        mesh.mass = mesh.dss_sum(&local);
        Ok(mesh)
    }

    pub fn n_global(&self) -> usize {
        self.n_global
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    /// Nodes per element.
    pub fn n_local(&self) -> usize {
        self.n_local
    }

    pub fn n_local_axis(&self) -> &[usize] {
        &self.n_local_axis
    }

    /// Global indices of the local nodes of element `e`.
    pub fn element_nodes(&self, e: usize) -> &[usize] {
        &self.l2g[e * self.n_local..(e + 1) * self.n_local]
    }

    pub fn vertical(&self) -> &Axis {
        &self.axes[self.dim - 1]
    }

    pub fn n_levels(&self) -> usize {
        self.vertical().n_global
    }

    pub fn n_columns(&self) -> usize {
        self.n_global / self.n_levels()
    }

    pub fn level_of(&self, node: usize) -> usize {
        node / self.n_columns()
    }

    pub fn column_of(&self, node: usize) -> usize {
        node % self.n_columns()
    }

    pub fn node(&self, column: usize, level: usize) -> usize {
        column + self.n_columns() * level
    }

    /// `(x, y, z)` of a global node; `y = 0` in 2D.
    pub fn coords(&self, node: usize) -> [f64; 3] {
        self.coords[node]
    }

    pub fn z(&self, node: usize) -> f64 {
        self.coords[node][2]
    }

    /// Domain measure (area in 2D, volume in 3D).
    pub fn measure(&self) -> f64 {
        self.axes.iter().map(|a| a.length).product()
    }

    /// Assembled diagonal mass, `M_I = DSS(w J)`.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Horizontal (lateral) mass weight of a grid column.
    pub fn column_weight(&self, column: usize) -> f64 {
        let first = self.axes[0].mass[column % self.axes[0].n_global];
        if self.dim == 3 {
            first * self.axes[1].mass[column / self.axes[0].n_global]
        } else {
            first
        }
    }

    pub fn is_boundary_level(&self, level: usize) -> bool {
        level == 0 || level + 1 == self.n_levels()
    }

    /// Sum local contributions into global nodes in a fixed element order.
    pub fn dss_sum(&self, local: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_global];
        self.dss_add(local, &mut out);
        out
    }

    pub(crate) fn dss_add(&self, local: &[f64], out: &mut [f64]) {
        debug_assert_eq!(local.len(), self.l2g.len());
        for (v, &g) in local.iter().zip(&self.l2g) {
            out[g] += v;
        }
    }

    pub fn scatter_to_elements(&self, global: &[f64]) -> Vec<f64> {
        self.l2g.iter().map(|&g| global[g]).collect()
    }

    /// Multiplicity of each global node (number of element copies).
    pub fn multiplicity(&self) -> Vec<f64> {
        self.dss_sum(&vec![1.0; self.l2g.len()])
    }
}

pub(crate) fn unravel(mut idx: usize, sizes: impl Iterator<Item = usize>, out: &mut [usize]) {
    for (o, n) in out.iter_mut().zip(sizes) {
        *o = idx % n;
        idx /= n;
    }
}
