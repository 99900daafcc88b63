//! Composite Gauss–Legendre quadrature on geometrically graded panels.
//!
//! Integrands in this crate are smooth after a change of variables but may
//! carry boundary layers of width `~1/sqrt(t)` at either end of the interval
//! (modes that decay slowly dominate late-time losses). Panels are halved
//! toward both endpoints `GRADING_DEPTH` times so a fixed-order rule resolves
//! those layers without adaptivity.

use std::f64::consts::PI;

/// Number of geometric halvings toward each endpoint.
pub const GRADING_DEPTH: usize = 30;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes by Newton iteration on the three-term Legendre recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

/// Breakpoints of `[a, b]` graded geometrically toward both ends.
pub fn graded_breakpoints(a: f64, b: f64, depth: usize) -> Vec<f64> {
    let half = 0.5 * (b - a);
    let mut points = Vec::with_capacity(2 * depth + 3);
    points.push(a);
    for k in (1..=depth).rev() {
        points.push(a + half * 0.5f64.powi(k as i32));
    }
    points.push(a + half);
    for k in 1..=depth {
        points.push(b - half * 0.5f64.powi(k as i32));
    }
    points.push(b);
    points.dedup();
    points
}

/// Nodes and weights of the composite rule: every graded panel is split into
/// `2^level` equal pieces, each integrated with `rule`.
pub fn composite_nodes(rule: &GaussLegendre, a: f64, b: f64, level: u32) -> (Vec<f64>, Vec<f64>) {
    let breaks = graded_breakpoints(a, b, GRADING_DEPTH);
    let pieces = 1usize << level;
    let mut xs = Vec::with_capacity(breaks.len() * pieces * rule.nodes.len());
    let mut ws = Vec::with_capacity(xs.capacity());
    for pair in breaks.windows(2) {
        let width = (pair[1] - pair[0]) / pieces as f64;
        for p in 0..pieces {
            let lo = pair[0] + width * p as f64;
            let half = 0.5 * width;
            let mid = lo + half;
            for (x, w) in rule.nodes.iter().zip(&rule.weights) {
                xs.push(mid + half * x);
                ws.push(w * half);
            }
        }
    }
    (xs, ws)
}
