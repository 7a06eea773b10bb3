//! Uniform tensor meshes, nodal fields and the discrete elliptic operator
//! `A_h = Δ_h + c I` under Neumann or Dirichlet boundary conditions.
//!
//! Neumann meshes include the boundary nodes and use reflected ghost nodes,
//! Dirichlet meshes carry interior nodes only. Inner products use lumped
//! (trapezoidal) mass weights `M`, so `A_h` is self-adjoint in `(·,·)_M`
//! and `M A_h` is a symmetric matrix. Constant fields span the kernel of
//! the Neumann Laplacian.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Neumann,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L2,
    H1,
    /// Graph norm of `A_h`: `(A u, A v) + (u, v)`.
    DA,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMesh {
    dimension: usize,
    nodes_per_axis: usize,
    length: f64,
    bc: BoundaryCondition,
    h: f64,
    axis_weights: Vec<f64>,
    weights: Vec<f64>,
}

impl SpatialMesh {
    pub fn new(
        dimension: usize,
        nodes_per_axis: usize,
        length: f64,
        bc: BoundaryCondition,
    ) -> Result<Self> {
        if !(1..=2).contains(&dimension) {
            return Err(Error::Invalid(format!("dimension must be 1 or 2, got {dimension}")));
        }
        if nodes_per_axis < 2 {
            return Err(Error::Invalid("nodes_per_axis must be at least 2".into()));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Invalid("axis length must be positive".into()));
        }
        let n = nodes_per_axis;
        let h = match bc {
            BoundaryCondition::Neumann => length / (n - 1) as f64,
            BoundaryCondition::Dirichlet => length / (n + 1) as f64,
        };
        let mut axis_weights = vec![h; n];
        if bc == BoundaryCondition::Neumann {
            axis_weights[0] = 0.5 * h;
            axis_weights[n - 1] = 0.5 * h;
        }
        let weights = if dimension == 1 {
            axis_weights.clone()
        } else {
            let mut w = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    w.push(axis_weights[i] * axis_weights[j]);
                }
            }
            w
        };
        Ok(Self { dimension, nodes_per_axis, length, bc, h, axis_weights, weights })
    }

    /// Unit interval or unit square.
    pub fn unit(dimension: usize, nodes_per_axis: usize, bc: BoundaryCondition) -> Result<Self> {
        Self::new(dimension, nodes_per_axis, 1.0, bc)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis.pow(self.dimension as u32)
    }

    /// Lumped mass weights, one per node.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn axis_weights(&self) -> &[f64] {
        &self.axis_weights
    }

    fn axis_coordinate(&self, i: usize) -> f64 {
        match self.bc {
            BoundaryCondition::Neumann => i as f64 * self.h,
            BoundaryCondition::Dirichlet => (i + 1) as f64 * self.h,
        }
    }

    /// Coordinates of node `idx`; the second entry is zero in 1D.
    pub fn coordinates(&self, idx: usize) -> [f64; 2] {
        let n = self.nodes_per_axis;
        if self.dimension == 1 {
            [self.axis_coordinate(idx), 0.0]
        } else {
            [self.axis_coordinate(idx % n), self.axis_coordinate(idx / n)]
        }
    }

    /// Samples a function of the coordinates at every node.
    pub fn sample(&self, f: impl Fn([f64; 2]) -> f64) -> Field {
        Field::new((0..self.node_count()).map(|i| f(self.coordinates(i))).collect())
    }

    pub fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.node_count() {
            return Err(Error::MeshMismatch { expected: self.node_count(), found: v.len() });
        }
        Ok(())
    }

    /// `(u, v)_M`
    pub fn dot(&self, u: &[f64], v: &[f64]) -> f64 {
        self.weights.iter().zip(u).zip(v).map(|((w, a), b)| w * a * b).sum()
    }

    pub fn norm_l2(&self, u: &[f64]) -> f64 {
        self.dot(u, u).sqrt()
    }

    /// Gradient pairing from one-sided differences along each axis; Dirichlet
    /// meshes include the edges to the (zero) boundary values.
    pub fn grad_dot(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.nodes_per_axis;
        let h = self.h;
        let axis_sum = |get_u: &dyn Fn(isize) -> f64, get_v: &dyn Fn(isize) -> f64| -> f64 {
            let (lo, hi) = match self.bc {
                BoundaryCondition::Neumann => (0isize, n as isize - 1),
                BoundaryCondition::Dirichlet => (-1isize, n as isize),
            };
            let mut s = 0.0;
            for i in lo..hi {
                s += (get_u(i + 1) - get_u(i)) * (get_v(i + 1) - get_v(i));
            }
            s / h
        };
        let at = |x: &[f64], idx: isize, stride: usize, base: usize| -> f64 {
            if idx < 0 || idx >= n as isize {
                0.0
            } else {
                x[base + idx as usize * stride]
            }
        };
        if self.dimension == 1 {
            axis_sum(&|i| at(u, i, 1, 0), &|i| at(v, i, 1, 0))
        } else {
            let mut s = 0.0;
            for j in 0..n {
                let base = j * n;
                s += self.axis_weights[j] * axis_sum(&|i| at(u, i, 1, base), &|i| at(v, i, 1, base));
            }
            for i in 0..n {
                s += self.axis_weights[i] * axis_sum(&|j| at(u, j, n, i), &|j| at(v, j, n, i));
            }
            s
        }
    }

    pub fn h1_dot(&self, u: &[f64], v: &[f64]) -> f64 {
        self.dot(u, v) + self.grad_dot(u, v)
    }

    pub fn norm_h1(&self, u: &[f64]) -> f64 {
        self.h1_dot(u, u).max(0.0).sqrt()
    }
}

/// Nodal values on a mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Field {
    values: Vec<f64>,
}

impl Field {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn constant(len: usize, value: f64) -> Self {
        Self { values: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field::new(self.values.iter().map(|v| v * s).collect())
    }

    /// `self + s * other`
    pub fn add_scaled(&self, s: f64, other: &Field) -> Field {
        Field::new(self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect())
    }
}

impl From<Vec<f64>> for Field {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

impl std::ops::Deref for Field {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// Coercivity data `(rho, theta)`: `a(v,v) + rho |v|^2 >= theta ||v||_V^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coercivity {
    pub rho: f64,
    pub theta: f64,
}

/// `A_h = Δ_h + c I` as a per-axis tridiagonal stencil.
#[derive(Clone, Debug)]
pub struct EllipticOperator {
    mesh: SpatialMesh,
    shift: f64,
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
    coercivity: Coercivity,
}

pub fn assemble_operator(mesh: &SpatialMesh, c: f64) -> EllipticOperator {
    let n = mesh.nodes_per_axis;
    let ih2 = 1.0 / (mesh.h * mesh.h);
    let mut sub = vec![ih2; n];
    let diag = vec![-2.0 * ih2; n];
    let mut sup = vec![ih2; n];
    sub[0] = 0.0;
    sup[n - 1] = 0.0;
    if mesh.bc == BoundaryCondition::Neumann {
        // mirrored ghost nodes u_{-1} = u_1, u_n = u_{n-2}
        sup[0] = 2.0 * ih2;
        sub[n - 1] = 2.0 * ih2;
    }
    EllipticOperator {
        mesh: mesh.clone(),
        shift: c,
        sub,
        diag,
        sup,
        coercivity: Coercivity { rho: c.max(0.0) + 1.0, theta: 0.5 },
    }
}

impl EllipticOperator {
    pub fn mesh(&self) -> &SpatialMesh {
        &self.mesh
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn coercivity(&self) -> Coercivity {
        self.coercivity
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    fn axis_apply(&self, x: &[f64], out: &mut [f64], base: usize, stride: usize) {
        let n = self.mesh.nodes_per_axis;
        for i in 0..n {
            let mut s = self.diag[i] * x[base + i * stride];
            if i > 0 {
                s += self.sub[i] * x[base + (i - 1) * stride];
            }
            if i + 1 < n {
                s += self.sup[i] * x[base + (i + 1) * stride];
            }
            out[base + i * stride] += s;
        }
    }

    /// `out = A_h x`
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.mesh.nodes_per_axis;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.shift * xi;
        }
        if self.mesh.dimension == 1 {
            self.axis_apply(x, out, 0, 1);
        } else {
            for j in 0..n {
                self.axis_apply(x, out, j * n, 1);
            }
            for i in 0..n {
                self.axis_apply(x, out, i, n);
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    /// Dense `A_h` (row-major in node ordering).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let nn = self.node_count();
        let mut a = DMatrix::zeros(nn, nn);
        let mut e = vec![0.0; nn];
        let mut col = vec![0.0; nn];
        for j in 0..nn {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            for i in 0..nn {
                a[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        a
    }

    /// Max absolute row sum, an upper bound on the spectral radius.
    pub fn gershgorin_bound(&self) -> f64 {
        let axis = (0..self.mesh.nodes_per_axis)
            .map(|i| self.sub[i].abs() + self.diag[i].abs() + self.sup[i].abs())
            .fold(0.0, f64::max);
        axis * self.mesh.dimension as f64 + self.shift.abs()
    }

    /// Solves `(sigma I - A_h - diag(d)) x = rhs`.
    pub fn solve_shifted_diag(
        &self,
        sigma: f64,
        d: Option<&[f64]>,
        rhs: &[f64],
        tol: f64,
    ) -> Result<Vec<f64>> {
        self.mesh.check(rhs)?;
        if self.mesh.dimension == 1 {
            self.thomas(sigma, d, rhs)
        } else {
            self.pcg(sigma, d, rhs, tol)
        }
    }

    fn thomas(&self, sigma: f64, d: Option<&[f64]>, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = rhs.len();
        let scale = sigma.abs() + self.gershgorin_bound() + d.map_or(0.0, |d| d.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let diag = |i: usize| sigma - self.shift - self.diag[i] - d.map_or(0.0, |d| d[i]);
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        let mut b = diag(0);
        if b.abs() <= 1e-13 * scale {
            return Err(Error::Singular { sigma });
        }
        cp[0] = -self.sup[0] / b;
        dp[0] = rhs[0] / b;
        for i in 1..n {
            let a = -self.sub[i];
            b = diag(i) - a * cp[i - 1];
            if b.abs() <= 1e-13 * scale {
                return Err(Error::Singular { sigma });
            }
            cp[i] = if i + 1 < n { -self.sup[i] / b } else { 0.0 };
            dp[i] = (rhs[i] - a * dp[i - 1]) / b;
        }
        let mut x = dp;
        for i in (0..n - 1).rev() {
            x[i] -= cp[i] * x[i + 1];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular { sigma });
        }
        Ok(x)
    }

    /// Jacobi-preconditioned CG on the `M`-symmetrized system.
    fn pcg(&self, sigma: f64, d: Option<&[f64]>, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
        let n = rhs.len();
        let w = &self.mesh.weights;
        let nn = self.mesh.nodes_per_axis;
        let mut ax = vec![0.0; n];
        let op = |x: &[f64], ax: &mut Vec<f64>, out: &mut [f64]| {
            self.apply_into(x, ax);
            for i in 0..n {
                out[i] = w[i] * (sigma * x[i] - ax[i] - d.map_or(0.0, |d| d[i]) * x[i]);
            }
        };
        let diag: Vec<f64> = (0..n)
            .map(|k| {
                let (i, j) = (k % nn, k / nn);
                w[k] * (sigma - self.shift - self.diag[i] - self.diag[j] - d.map_or(0.0, |d| d[k]))
            })
            .collect();
        let b: Vec<f64> = (0..n).map(|i| w[i] * rhs[i]).collect();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b.clone();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut q = vec![0.0; n];
        let max_iter = 20 * n + 100;
        for _ in 0..max_iter {
            op(&p, &mut ax, &mut q);
            let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
            if !(pq > 0.0) {
                return Err(Error::Singular { sigma });
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= tol * bnorm {
                return Ok(x);
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        Err(Error::LinearSolve { residual: rnorm / bnorm, iterations: max_iter })
    }
}

/// Discrete realizations of the `Y`, `V` and `D(A)` inner products.
pub fn inner_product(op: &EllipticOperator, u: &[f64], v: &[f64], which: NormKind) -> Result<f64> {
    let mesh = op.mesh();
    mesh.check(u)?;
    mesh.check(v)?;
    Ok(match which {
        NormKind::L2 => mesh.dot(u, v),
        NormKind::H1 => mesh.h1_dot(u, v),
        NormKind::DA => mesh.dot(&op.apply(u), &op.apply(v)) + mesh.dot(u, v),
    })
}

/// `(sigma I - A_h) x = rhs`; 1D uses banded elimination, 2D uses CG to
/// `1e-12 ||rhs||`.
pub fn solve_shifted(op: &EllipticOperator, sigma: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    op.solve_shifted_diag(sigma, None, rhs, 1e-12)
}

/// Largest eigenvalue of `A_h` by power iteration on `A_h + s I`.
pub fn leading_eigenvalue(op: &EllipticOperator) -> Result<f64> {
    leading_eigenvalue_with(op, 1e-8, 2_000_000)
}

pub fn leading_eigenvalue_with(op: &EllipticOperator, tol: f64, max_iter: usize) -> Result<f64> {
    let mesh = op.mesh();
    let n = op.node_count();
    let s = op.gershgorin_bound();
    let mut x = vec![1.0; n];
    let nx = mesh.norm_l2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut y = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        op.apply_into(&x, &mut y);
        for i in 0..n {
            y[i] += s * x[i];
        }
        let mu = mesh.dot(&y, &x);
        let r: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - mu * b).collect();
        residual = mesh.norm_l2(&r);
        if residual <= tol * mu.abs().max(tol) {
            return Ok(mu - s);
        }
        let ny = mesh.norm_l2(&y);
        if ny == 0.0 {
            return Ok(-s);
        }
        for i in 0..n {
            x[i] = y[i] / ny;
        }
    }
    Err(Error::EigenNotConverged { residual, iterations: max_iter })
}
