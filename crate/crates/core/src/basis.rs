//! The orthonormal basis `{Psi_n}` on `[a1, a2]` obtained by Gram-Schmidt from
//! `alpha^n e^alpha`, together with the matrix `S_N` (`s_mn = <Psi_n', Psi_m>`)
//! and the triple-product tensor used by the quadratic part of the nonlinearity.
//!
//! Each `Psi_n` is stored as `e^alpha * sum_j c_nj P_j(t)` with `P_j` the
//! Legendre polynomials in `t = (2 alpha - a1 - a2) / (a2 - a1)`. The span of
//! `{P_j(t) e^alpha, j <= n}` equals that of `{alpha^j e^alpha, j <= n}`, so the
//! Gram-Schmidt output is the same family, and derivatives stay exact.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::quadrature::{legendre_with_derivative, GaussLegendre};
use crate::scalar::Real;

pub const DEFAULT_QUAD_ORDER: usize = 32;
pub const DEFAULT_N: usize = 4;

#[derive(Debug, Clone)]
pub struct BasisSet<T> {
    a1: f64,
    a2: f64,
    n: usize,
    /// `coeffs[n][j]`, lower triangular in `(n, j)`.
    coeffs: Vec<Vec<f64>>,
    pub quad: GaussLegendre<T>,
    /// `psi[n][i] = Psi_n(node_i)`.
    pub psi: Vec<Vec<T>>,
    pub dpsi: Vec<Vec<T>>,
    /// `s[m][n] = <Psi_n', Psi_m>`.
    pub s: Vec<Vec<T>>,
    pub s_inv: Vec<Vec<T>>,
    /// `triple[m][n][l] = int Psi_m Psi_n Psi_l' d alpha`.
    pub triple: Vec<Vec<Vec<T>>>,
}

impl<T: Real> BasisSet<T> {
    pub fn build(a1: f64, a2: f64, n: usize, quad_order: usize) -> Result<Self> {
        if !(a1 < a2) {
            return Err(Error::Config(format!("basis interval needs a1 < a2 (got {a1}, {a2})")));
        }
        if n == 0 {
            return Err(Error::Config("basis size N must be at least 1".into()));
        }
        check_quadrature(a1, a2, n, quad_order)?;
        let q64 = GaussLegendre::<f64>::new(quad_order, a1, a2);

        // primitive functions e^alpha P_j(t) at the nodes
        let prim: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                q64.nodes
                    .iter()
                    .map(|&a| a.exp() * legendre_with_derivative(j, to_t(a, a1, a2)).0)
                    .collect()
            })
            .collect();
        let gram: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| dot(&prim[i], &prim[j], &q64.weights)).collect())
            .collect();
        let inner = |u: &[f64], v: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..u.len() {
                if u[i] == 0.0 {
                    continue;
                }
                for j in 0..v.len() {
                    acc += u[i] * gram[i][j] * v[j];
                }
            }
            acc
        };

        let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut c = vec![0.0; n];
            c[k] = 1.0;
            let norm0 = inner(&c, &c).sqrt();
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for prev in &coeffs {
                    let proj = inner(prev, &c);
                    for j in 0..n {
                        c[j] -= proj * prev[j];
                    }
                }
            }
            let norm = inner(&c, &c).sqrt();
            if !(norm > 1e-12 * norm0) {
                return Err(Error::GramSchmidt(k));
            }
            // positive leading coefficient
            let sign = if c[k] < 0.0 { -1.0 } else { 1.0 };
            for v in c.iter_mut() {
                *v *= sign / norm;
            }
            coeffs.push(c);
        }

        let eval = |k: usize, a: f64| eval_psi(&coeffs[k], a, a1, a2);
        let psi64: Vec<Vec<f64>> =
            (0..n).map(|k| q64.nodes.iter().map(|&a| eval(k, a).0).collect()).collect();
        let dpsi64: Vec<Vec<f64>> =
            (0..n).map(|k| q64.nodes.iter().map(|&a| eval(k, a).1).collect()).collect();

        // Psi_j' lies in span{Psi_0..Psi_j}, so entries below the diagonal are
        // exact zeros; quadrature leaves ~1e-14 there, which the large
        // cofactors of S would amplify.
        let s64: Vec<Vec<f64>> = (0..n)
            .map(|m| (0..n).map(|j| if m > j { 0.0 } else { dot(&dpsi64[j], &psi64[m], &q64.weights) }).collect())
            .collect();
        let s_inv64 = invert(&s64);
        let mut triple = vec![vec![vec![T::zero(); n]; n]; n];
        for m in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let v: f64 = (0..q64.len())
                        .map(|i| q64.weights[i] * psi64[m][i] * psi64[j][i] * dpsi64[l][i])
                        .sum();
                    triple[m][j][l] = T::lit(v);
                }
            }
        }
        let conv = |a: &Vec<Vec<f64>>| -> Vec<Vec<T>> {
            a.iter().map(|r| r.iter().map(|&v| T::lit(v)).collect()).collect()
        };
        Ok(Self {
            a1,
            a2,
            n,
            quad: GaussLegendre::new(quad_order, a1, a2),
            psi: conv(&psi64),
            dpsi: conv(&dpsi64),
            s: conv(&s64),
            s_inv: conv(&s_inv64),
            triple,
            coeffs,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn interval(&self) -> (f64, f64) {
        (self.a1, self.a2)
    }

    /// `Psi_k(alpha)`.
    pub fn psi_at(&self, k: usize, alpha: f64) -> T {
        T::lit(eval_psi(&self.coeffs[k], alpha, self.a1, self.a2).0)
    }

    /// `Psi_k'(alpha)`.
    pub fn dpsi_at(&self, k: usize, alpha: f64) -> T {
        T::lit(eval_psi(&self.coeffs[k], alpha, self.a1, self.a2).1)
    }

    /// Gram matrix `<Psi_m, Psi_n>` under the stored quadrature.
    pub fn gram(&self) -> Vec<Vec<T>> {
        let w = &self.quad.weights;
        (0..self.n)
            .map(|m| {
                (0..self.n)
                    .map(|k| (0..w.len()).map(|i| w[i] * self.psi[m][i] * self.psi[k][i]).sum())
                    .collect()
            })
            .collect()
    }

    /// Coefficients of the orthogonal projection of `g` onto the span.
    pub fn project<F: Fn(T) -> T>(&self, g: F) -> Vec<T> {
        let vals: Vec<T> = self.quad.nodes.iter().map(|&a| g(a)).collect();
        (0..self.n)
            .map(|m| (0..vals.len()).map(|i| self.quad.weights[i] * vals[i] * self.psi[m][i]).sum())
            .collect()
    }

    /// Plain-text dump of `S_N` and the Gram matrix.
    pub fn audit_dump(&self) -> String {
        let mut out = String::new();
        let fmt = |out: &mut String, title: &str, m: &[Vec<T>]| {
            let _ = writeln!(out, "# {title}");
            for row in m {
                let line: Vec<String> = row.iter().map(|v| format!("{:+.15e}", v.as_f64())).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        let _ = writeln!(out, "# basis N={} on [{}, {}]", self.n, self.a1, self.a2);
        fmt(&mut out, "S_N", &self.s);
        fmt(&mut out, "Gram", &self.gram());
        out
    }
}

/// Compares the rule of `order` against a refined rule on the weighted
/// monomials `alpha^j e^{2 alpha}`, `j <= 2N + 2`.
fn check_quadrature(a1: f64, a2: f64, n: usize, order: usize) -> Result<()> {
    if order < n + 2 {
        return Err(Error::Quadrature { order, error: f64::INFINITY });
    }
    let q = GaussLegendre::<f64>::new(order, a1, a2);
    let fine = GaussLegendre::<f64>::new(order + 16, a1, a2);
    let mut worst = 0.0f64;
    for j in 0..=(2 * n + 2) {
        let f = |a: f64| to_t(a, a1, a2).powi(j as i32) * (2.0 * a).exp();
        let scale = fine.integrate(|a| to_t(a, a1, a2).abs().powi(j as i32) * (2.0 * a).exp());
        worst = worst.max((q.integrate(f) - fine.integrate(f)).abs() / scale);
    }
    if worst > 1e-12 {
        return Err(Error::Quadrature { order, error: worst });
    }
    Ok(())
}

#[inline]
fn to_t(a: f64, a1: f64, a2: f64) -> f64 {
    (2.0 * a - a1 - a2) / (a2 - a1)
}

fn eval_psi(c: &[f64], a: f64, a1: f64, a2: f64) -> (f64, f64) {
    let t = to_t(a, a1, a2);
    let dt = 2.0 / (a2 - a1);
    let (mut p, mut dp) = (0.0, 0.0);
    for (j, &cj) in c.iter().enumerate() {
        if cj == 0.0 {
            continue;
        }
        let (pj, dpj) = legendre_with_derivative(j, t);
        p += cj * pj;
        dp += cj * dpj * dt;
    }
    let e = a.exp();
    (e * p, e * (p + dp))
}

fn dot(u: &[f64], v: &[f64], w: &[f64]) -> f64 {
    (0..u.len()).map(|i| w[i] * u[i] * v[i]).sum()
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting. `S_N` is
/// unit upper triangular only up to round-off, so the full matrix is inverted.
fn invert(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = s.len();
    let mut a: Vec<Vec<f64>> = s.to_vec();
    let mut inv: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        a[i][j] -= f * a[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_function_is_normalized_exponential() {
        let b = BasisSet::<f64>::build(0.1, 0.6, 1, 32).unwrap();
        let norm = ((1.2f64.exp() - 0.2f64.exp()) / 2.0).sqrt();
        for a in [0.1, 0.33, 0.6] {
            assert_abs_diff_eq!(b.psi_at(0, a), a.exp() / norm, epsilon = 1e-13);
            assert_abs_diff_eq!(b.dpsi_at(0, a), b.psi_at(0, a), epsilon = 1e-13);
        }
        assert_abs_diff_eq!(b.s[0][0], 1.0, epsilon = 1e-13);
        // T000 = [Psi0^3]/3
        let exact = (b.psi_at(0, 0.6).powi(3) - b.psi_at(0, 0.1).powi(3)) / 3.0;
        assert_abs_diff_eq!(b.triple[0][0][0], exact, epsilon = 1e-12);
    }

    #[test]
    fn s_matrix_is_unit_upper_triangular() {
        let b = BasisSet::<f64>::build(0.1, 0.6, 4, 32).unwrap();
        let mut det = 1.0;
        for m in 0..4 {
            det *= b.s[m][m];
            assert_abs_diff_eq!(b.s[m][m], 1.0, epsilon = 1e-10);
            for k in 0..m {
                assert_abs_diff_eq!(b.s[m][k], 0.0, epsilon = 1e-10);
            }
        }
        assert_abs_diff_eq!(det, 1.0, epsilon = 1e-10);
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = (0..4).map(|k| b.s_inv[i][k] * b.s[k][j]).sum();
                assert_abs_diff_eq!(v, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn product_rule_identity_on_triple_tensor() {
        let b = BasisSet::<f64>::build(0.1, 0.6, 3, 32).unwrap();
        let (a1, a2) = b.interval();
        for m in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    // int Psi_m' Psi_j Psi_l by quadrature, independent of `triple`
                    let q = GaussLegendre::<f64>::new(40, a1, a2);
                    let third = q.integrate(|a| b.dpsi_at(m, a) * b.psi_at(j, a) * b.psi_at(l, a));
                    let boundary = b.psi_at(m, a2) * b.psi_at(j, a2) * b.psi_at(l, a2)
                        - b.psi_at(m, a1) * b.psi_at(j, a1) * b.psi_at(l, a1);
                    let sum = b.triple[m][j][l] + b.triple[m][l][j] + third;
                    assert_abs_diff_eq!(sum, boundary, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn sine_projection_with_six_functions() {
        let b = BasisSet::<f64>::build(0.1, 0.6, 6, 32).unwrap();
        let c = b.project(|a| a.sin());
        for i in 0..b.quad.len() {
            let a = b.quad.nodes[i];
            let rec: f64 = (0..6).map(|k| c[k] * b.psi[k][i]).sum();
            assert!((rec - a.sin()).abs() <= 1e-3);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(BasisSet::<f64>::build(0.6, 0.1, 2, 32).is_err());
        assert!(BasisSet::<f64>::build(0.1, 0.6, 0, 32).is_err());
        assert!(matches!(
            BasisSet::<f64>::build(0.1, 0.6, 8, 4),
            Err(Error::Quadrature { .. })
        ));
    }

    #[test]
    fn single_precision_instance() {
        let b = BasisSet::<f32>::build(0.1, 0.6, 3, 32).unwrap();
        let g = b.gram();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
            }
        }
        assert!(b.audit_dump().contains("S_N"));
    }
}
