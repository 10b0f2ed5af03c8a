//! Matrix-free element operators and the prognostic state container.
//!
//! All global operators follow the same pattern: gather element-local nodal
//! values, apply tensor-product differentiation, weight by `w J`, assemble
//! with DSS and divide by the diagonal mass.

use crate::grid::Mesh;

/// Prognostic variables `(rho', u.., theta_v', q_v', q_c, q_r)` stored as
/// contiguous field blocks of one global nodal vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct PrognosticState {
    dim: usize,
    n: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Rho,
    /// Velocity component; the last component is vertical.
    Vel(usize),
    Theta,
    Qv,
    Qc,
    Qr,
}

impl Field {
    pub fn index(self, dim: usize) -> usize {
        match self {
            Field::Rho => 0,
            Field::Vel(k) => {
                assert!(k < dim, "velocity component {k} out of range");
                1 + k
            }
            Field::Theta => 1 + dim,
            Field::Qv => 2 + dim,
            Field::Qc => 3 + dim,
            Field::Qr => 4 + dim,
        }
    }

    pub fn all(dim: usize) -> Vec<Field> {
        let mut v = vec![Field::Rho];
        v.extend((0..dim).map(Field::Vel));
        v.extend([Field::Theta, Field::Qv, Field::Qc, Field::Qr]);
        v
    }

    pub fn name(self, dim: usize) -> &'static str {
        match self {
            Field::Rho => "rho_p",
            Field::Vel(k) if k + 1 == dim => "w",
            Field::Vel(0) => "u",
            Field::Vel(_) => "v",
            Field::Theta => "theta_vp",
            Field::Qv => "qv_p",
            Field::Qc => "qc",
            Field::Qr => "qr",
        }
    }
}

impl PrognosticState {
    pub fn zeros(dim: usize, n: usize) -> Self {
        Self { dim, n, data: vec![0.0; (5 + dim) * n] }
    }

    pub fn for_mesh(mesh: &Mesh) -> Self {
        Self::zeros(mesh.dim, mesh.n_global())
    }

    pub fn from_vec(dim: usize, n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (5 + dim) * n);
        Self { dim, n, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of global nodes.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn n_fields(&self) -> usize {
        5 + self.dim
    }

    pub fn field(&self, f: Field) -> &[f64] {
        let i = f.index(self.dim);
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn field_mut(&mut self, f: Field) -> &mut [f64] {
        let i = f.index(self.dim);
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn field_by_index(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn w(&self) -> &[f64] {
        self.field(Field::Vel(self.dim - 1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Assembled lumped mass matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMass {
    pub entries: Vec<f64>,
}

impl DiagonalMass {
    pub fn total(&self) -> f64 {
        self.entries.iter().sum()
    }
}

pub fn build_mass(mesh: &Mesh) -> DiagonalMass {
    DiagonalMass { entries: mesh.mass().to_vec() }
}

/// LGL quadrature of a continuous nodal field, `<M, f>`.
pub fn integrate(mesh: &Mesh, field: &[f64]) -> f64 {
    mesh.mass().iter().zip(field).map(|(m, f)| m * f).sum()
}

/// Derivative of element-local values along `axis`, including the metric factor.
pub(crate) fn diff_local(mesh: &Mesh, axis: usize, f: &[f64], out: &mut [f64]) {
    apply_lines(mesh, axis, f, out, false);
}

/// Transposed derivative, `out_i = sum_q D_qi f_q` along `axis` (times metric).
pub(crate) fn diff_local_transpose(mesh: &Mesh, axis: usize, f: &[f64], out: &mut [f64]) {
    apply_lines(mesh, axis, f, out, true);
}

/// Longest 1D line handled on the stack.
const MAX_LINE: usize = 32;

/// Apply the 1D differentiation matrix (or its transpose) to every line of
/// the tensor-product element along `axis`.
fn apply_lines(mesh: &Mesh, axis: usize, f: &[f64], out: &mut [f64], transpose: bool) {
    let nla = mesh.n_local_axis();
    let n = nla[axis];
    assert!(n <= MAX_LINE, "polynomial order too high for the local kernels");
    let stride: usize = nla[..axis].iter().product();
    let block = n * stride;
    let d = &mesh.axes[axis].rule.diff;
    let scale = mesh.metric[axis];
    let mut line = [0.0; MAX_LINE];
    for start in (0..f.len()).step_by(block) {
        for inner in 0..stride {
            let base = start + inner;
            for (m, v) in line[..n].iter_mut().enumerate() {
                *v = f[base + m * stride];
            }
            for ia in 0..n {
                let mut s = 0.0;
                if transpose {
                    for m in 0..n {
                        s += d[m * n + ia] * line[m];
                    }
                } else {
                    let row = &d[ia * n..(ia + 1) * n];
                    for m in 0..n {
                        s += row[m] * line[m];
                    }
                }
                out[base + ia * stride] = s * scale;
            }
        }
    }
}

pub(crate) fn gather(nodes: &[usize], global: &[f64], local: &mut [f64]) {
    for (l, &g) in local.iter_mut().zip(nodes) {
        *l = global[g];
    }
}

/// Assemble `w J * local` into `acc`.
pub(crate) fn scatter_weighted(mesh: &Mesh, nodes: &[usize], local: &[f64], acc: &mut [f64]) {
    for ((&g, v), w) in nodes.iter().zip(local).zip(&mesh.local_weights) {
        acc[g] += w * v;
    }
}

pub(crate) fn apply_inverse_mass(mesh: &Mesh, acc: &mut [f64]) {
    for (a, m) in acc.iter_mut().zip(mesh.mass()) {
        *a /= m;
    }
}

/// `M^{-1} DSS(w J grad f)`: the element collocation gradient projected onto
/// the continuous space.
pub fn weak_gradient(mesh: &Mesh, field: &[f64]) -> Vec<Vec<f64>> {
    let nl = mesh.n_local();
    let mut out = vec![vec![0.0; mesh.n_global()]; mesh.dim];
    let mut loc = vec![0.0; nl];
    let mut d = vec![0.0; nl];
    for e in 0..mesh.n_elements() {
        let nodes = mesh.element_nodes(e);
        gather(nodes, field, &mut loc);
        for (a, acc) in out.iter_mut().enumerate() {
            diff_local(mesh, a, &loc, &mut d);
            scatter_weighted(mesh, nodes, &d, acc);
        }
    }
    for acc in out.iter_mut() {
        apply_inverse_mass(mesh, acc);
    }
    out
}

/// `M^{-1} DSS(w J div u)` for a vector field given by components.
pub fn weak_divergence(mesh: &Mesh, vector: &[Vec<f64>]) -> Vec<f64> {
    assert_eq!(vector.len(), mesh.dim);
    let nl = mesh.n_local();
    let mut acc = vec![0.0; mesh.n_global()];
    let mut loc = vec![0.0; nl];
    let mut d = vec![0.0; nl];
    let mut div = vec![0.0; nl];
    for e in 0..mesh.n_elements() {
        let nodes = mesh.element_nodes(e);
        div.iter_mut().for_each(|v| *v = 0.0);
        for (a, comp) in vector.iter().enumerate() {
            gather(nodes, comp, &mut loc);
            diff_local(mesh, a, &loc, &mut d);
            for (s, x) in div.iter_mut().zip(&d) {
                *s += x;
            }
        }
        scatter_weighted(mesh, nodes, &div, &mut acc);
    }
    apply_inverse_mass(mesh, &mut acc);
    acc
}

/// Element-local weak Laplacian contribution, `-sum_a D_a^T (w J D_a f)`,
/// accumulated (unassembled) into `out`.
pub(crate) fn laplacian_local(mesh: &Mesh, f: &[f64], grad: &mut [f64], tmp: &mut [f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for a in 0..mesh.dim {
        diff_local(mesh, a, f, grad);
        for (g, w) in grad.iter_mut().zip(&mesh.local_weights) {
            *g *= w;
        }
        diff_local_transpose(mesh, a, grad, tmp);
        for (o, t) in out.iter_mut().zip(tmp.iter()) {
            *o -= t;
        }
    }
}

/// Weak-form `nu * Laplacian(f)` with natural (zero-flux) boundaries.
pub fn laplacian_diffusion(mesh: &Mesh, field: &[f64], nu: f64) -> Vec<f64> {
    let mut acc = vec![0.0; mesh.n_global()];
    if nu == 0.0 {
        return acc;
    }
    let nl = mesh.n_local();
    let (mut loc, mut grad, mut tmp, mut out) = (vec![0.0; nl], vec![0.0; nl], vec![0.0; nl], vec![0.0; nl]);
    for e in 0..mesh.n_elements() {
        let nodes = mesh.element_nodes(e);
        gather(nodes, field, &mut loc);
        laplacian_local(mesh, &loc, &mut grad, &mut tmp, &mut out);
        for (&g, v) in nodes.iter().zip(&out) {
            acc[g] += v;
        }
    }
    for (a, m) in acc.iter_mut().zip(mesh.mass()) {
        *a *= nu / m;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxSpec;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn slab(lx: f64, lz: f64, nex: usize, nez: usize, n: usize, per: bool) -> Mesh {
        Mesh::build_box(&BoxSpec::slab_2d(lx, lz, nex, nez, n, per)).unwrap()
    }

    fn sample(mesh: &Mesh, f: impl Fn([f64; 3]) -> f64) -> Vec<f64> {
        (0..mesh.n_global()).map(|i| f(mesh.coords(i))).collect()
    }

    #[test]
    fn mass_examples() {
        let m = slab(2.0, 2.0, 1, 1, 1, false);
        let mass = build_mass(&m);
        assert!(mass.entries.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!((mass.total() - 4.0).abs() < 1e-14);

        let one = slab(1.0, 1.0, 1, 1, 2, false);
        let two = slab(2.0, 1.0, 2, 1, 2, false);
        let m1 = build_mass(&one);
        let m2 = build_mass(&two);
        // corner (x=1, z=0) of element 0 and element 1 merge
        let shared = two.node(2, 0);
        assert!((m2.entries[shared] - 2.0 * m1.entries[one.node(2, 0)]).abs() < 1e-15);

        let m4 = slab(1.0, 1.0, 1, 1, 4, false);
        assert!((build_mass(&m4).total() - 1.0).abs() < 1e-14);
        assert!(build_mass(&m4).entries.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn integrate_examples() {
        let big = slab(150e3, 24e3, 9, 15, 4, true);
        let ones = vec![1.0; big.n_global()];
        assert!((integrate(&big, &ones) - 3.6e9).abs() / 3.6e9 < 1e-13);

        let unit = slab(1.0, 1.0, 2, 3, 1, false);
        let x = sample(&unit, |c| c[0]);
        assert!((integrate(&unit, &x) - 0.5).abs() < 1e-14);

        // f = x^6 on [-1,1] times a unit-height slab, shifted into [0,2]
        let m = slab(2.0, 1.0, 1, 1, 4, false);
        let f = sample(&m, |c| (c[0] - 1.0).powi(6));
        assert!((integrate(&m, &f) - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_constant_and_linear() {
        let m = slab(3.0, 2.0, 3, 2, 4, false);
        let c = vec![5.0; m.n_global()];
        for g in weak_gradient(&m, &c) {
            assert!(g.iter().all(|v| v.abs() < 1e-12));
        }
        let x = sample(&m, |c| c[0]);
        let g = weak_gradient(&m, &x);
        assert!(g[0].iter().all(|v| (v - 1.0).abs() < 1e-11));
        assert!(g[1].iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn gradient_exact_for_global_polynomial() {
        let m = slab(2.0, 1.5, 2, 3, 4, false);
        let f = sample(&m, |c| c[0].powi(4) - 2.0 * c[0] * c[2].powi(3) + c[2]);
        let g = weak_gradient(&m, &f);
        for i in 0..m.n_global() {
            let [x, _, z] = m.coords(i);
            assert!((g[0][i] - (4.0 * x.powi(3) - 2.0 * z.powi(3))).abs() < 1e-10);
            assert!((g[1][i] - (-6.0 * x * z * z + 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn divergence_converges_spectrally() {
        let mut errs = Vec::new();
        for n in [2usize, 4, 6, 8] {
            let m = slab(2.0 * PI, 1.0, 4, 1, n, true);
            let u = sample(&m, |c| c[0].sin());
            let w = vec![0.0; m.n_global()];
            let div = weak_divergence(&m, &[u, w]);
            let err = (0..m.n_global()).map(|i| (div[i] - m.coords(i)[0].cos()).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        assert!(errs[3] < 1e-6);
    }

    #[test]
    fn laplacian_examples() {
        let m = slab(1.0, 1.0, 8, 1, 4, true);
        let c = vec![3.0; m.n_global()];
        assert!(laplacian_diffusion(&m, &c, 2.0).iter().all(|v| v.abs() < 1e-10));
        let k = 2.0 * PI;
        let f = sample(&m, |c| (k * c[0]).sin());
        assert!(laplacian_diffusion(&m, &f, 0.0).iter().all(|&v| v == 0.0));
        let lap = laplacian_diffusion(&m, &f, 1.0);
        let num: f64 = (0..m.n_global()).map(|i| (lap[i] + k * k * f[i]).powi(2)).sum::<f64>().sqrt();
        let den: f64 = f.iter().map(|v| (k * k * v).powi(2)).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "relative error {}", num / den);
    }

    #[test]
    fn divergence_integrates_to_zero_on_periodic_mesh() {
        let m = Mesh::build_box(&BoxSpec::box_3d([2.0, 3.0, 1.0], [2, 3, 2], 3, [true, true])).unwrap();
        let u = sample(&m, |c| (c[0] * PI).sin() * c[2] + c[1]);
        let v = sample(&m, |c| (c[1] * 2.0 * PI / 3.0).cos() * c[2] * c[2]);
        let w = sample(&m, |c| c[2] * (1.0 - c[2]) * (c[0] * PI).cos());
        let div = weak_divergence(&m, &[u.clone(), v, w]);
        let scale: f64 = integrate(&m, &u.iter().map(|x| x.abs()).collect::<Vec<_>>());
        assert!(integrate(&m, &div).abs() / scale < 1e-10);
    }

    proptest! {
        #[test]
        fn laplacian_symmetric_negative(seed in any::<u64>()) {
            use rand_chacha::rand_core::{RngCore, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = slab(3.0, 2.0, 3, 2, 3, true);
            let mut r = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            let f: Vec<f64> = (0..m.n_global()).map(|_| r()).collect();
            let g: Vec<f64> = (0..m.n_global()).map(|_| r()).collect();
            let lf = laplacian_diffusion(&m, &f, 1.0);
            let lg = laplacian_diffusion(&m, &g, 1.0);
            let mass = m.mass();
            let fg: f64 = (0..f.len()).map(|i| mass[i] * f[i] * lg[i]).sum();
            let gf: f64 = (0..f.len()).map(|i| mass[i] * g[i] * lf[i]).sum();
            let ff: f64 = (0..f.len()).map(|i| mass[i] * f[i] * lf[i]).sum();
            let norm: f64 = f.iter().map(|v| v * v).sum();
            prop_assert!((fg - gf).abs() < 1e-10 * fg.abs().max(1.0));
            prop_assert!(ff <= 1e-10 * norm);
        }
    }
}
