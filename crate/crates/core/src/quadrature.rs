//! Gauss-Legendre quadrature on a finite interval.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> GaussLegendre<T> {
    /// Rule with `order` points on `[a, b]`. Nodes are computed in `f64` by
    /// Newton iteration on the Legendre polynomial and then converted.
    pub fn new(order: usize, a: f64, b: f64) -> Self {
        let (x, w) = legendre_nodes(order);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        Self {
            nodes: x.iter().map(|&t| T::lit(mid + half * t)).collect(),
            weights: w.iter().map(|&wi| T::lit(half * wi)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(T) -> T>(&self, f: F) -> T {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Nodes (ascending) and weights on `[-1, 1]`.
fn legendre_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pi = std::f64::consts::PI;
    for i in 0..(n + 1) / 2 {
        // Tricomi initial guess
        let mut t = (pi * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, t);
            dp = d;
            let dt = p / d;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, t);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - t * t) * dp * dp);
        x[i] = -t;
        x[n - 1 - i] = t;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// `P_n(t)` and `P_n'(t)` by the three-term recurrence.
pub(crate) fn legendre_with_derivative(n: usize, t: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p0, mut p1) = (1.0, t);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    let d = if (1.0 - t * t).abs() < 1e-300 {
        // endpoint value of the derivative
        0.5 * nf * (nf + 1.0) * t.powi(n as i32 + 1)
    } else {
        nf * (t * p1 - p0) / (t * t - 1.0)
    };
    (p1, d)
}
