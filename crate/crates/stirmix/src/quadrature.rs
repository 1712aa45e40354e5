//! Quadrature rules on the reference triangle and the reference segment.
//!
//! Conventions:
//! - the reference triangle has vertices (0,0), (1,0), (0,1) and measure 1/2;
//! - the reference segment is [0,1] with measure 1;
//! - rule weights sum to the reference measure.
//!
//! Two triangle rules are tabulated: a 7 point rule exact through degree 5
//! and a 16 point rule exact through degree 8 (both symmetric, all weights
//! positive, all points interior). Segment rules are Gauss-Legendre with
//! 3 points (exact through degree 5) or 16 points (exact through degree 31);
//! their nodes and weights are generated by Newton iteration on the Legendre
//! polynomial, so they are accurate to machine precision.

use crate::error::{Error, Result};
use std::sync::OnceLock;

/// Integration domain a rule applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Triangle,
    Segment,
}

/// Quadrature rule on the reference triangle (0,0), (1,0), (0,1).
#[derive(Debug, Clone)]
pub struct TriangleRule {
    /// Largest polynomial degree integrated exactly.
    pub degree: usize,
    /// Points in reference coordinates (x, y).
    pub points: Vec<[f64; 2]>,
    /// Weights; sum equals 1/2.
    pub weights: Vec<f64>,
}

/// Quadrature rule on the reference segment [0, 1].
#[derive(Debug, Clone)]
pub struct SegmentRule {
    /// Largest polynomial degree integrated exactly.
    pub degree: usize,
    /// Points in [0, 1].
    pub points: Vec<f64>,
    /// Weights; sum equals 1.
    pub weights: Vec<f64>,
}

/// Smallest tabulated triangle rule that integrates `min_degree` exactly.
pub fn triangle_rule(min_degree: usize) -> Result<&'static TriangleRule> {
    if min_degree <= 5 {
        Ok(triangle_rule_7())
    } else if min_degree <= 8 {
        Ok(triangle_rule_16())
    } else {
        Err(Error::QuadratureUnavailable {
            domain: "triangle",
            degree: min_degree,
        })
    }
}

/// Smallest tabulated segment rule that integrates `min_degree` exactly.
pub fn segment_rule(min_degree: usize) -> Result<&'static SegmentRule> {
    if min_degree <= 5 {
        Ok(segment_rule_3())
    } else if min_degree <= 31 {
        Ok(segment_rule_16())
    } else {
        Err(Error::QuadratureUnavailable {
            domain: "segment",
            degree: min_degree,
        })
    }
}

/// The 7 point, degree 5 triangle rule.
pub fn triangle_rule_7() -> &'static TriangleRule {
    static RULE: OnceLock<TriangleRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        push_orbit1(&mut points, &mut weights, 0.225);
        push_orbit3(
            &mut points,
            &mut weights,
            0.470_142_064_105_115,
            0.132_394_152_788_506,
        );
        push_orbit3(
            &mut points,
            &mut weights,
            0.101_286_507_323_456,
            0.125_939_180_544_827,
        );
        TriangleRule {
            degree: 5,
            points,
            weights,
        }
    })
}

/// The 16 point, degree 8 triangle rule.
pub fn triangle_rule_16() -> &'static TriangleRule {
    static RULE: OnceLock<TriangleRule> = OnceLock::new();
    RULE.get_or_init(|| {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        push_orbit1(&mut points, &mut weights, 0.144_315_607_677_787);
        push_orbit3(
            &mut points,
            &mut weights,
            0.459_292_588_292_723,
            0.095_091_634_267_285,
        );
        push_orbit3(
            &mut points,
            &mut weights,
            0.170_569_307_751_760,
            0.103_217_370_534_718,
        );
        push_orbit3(
            &mut points,
            &mut weights,
            0.050_547_228_317_031,
            0.032_458_497_623_198,
        );
        push_orbit6(
            &mut points,
            &mut weights,
            0.263_112_829_634_638,
            0.008_394_777_409_958,
            0.027_230_314_174_435,
        );
        TriangleRule {
            degree: 8,
            points,
            weights,
        }
    })
}

/// The 3 point Gauss-Legendre segment rule (degree 5).
pub fn segment_rule_3() -> &'static SegmentRule {
    static RULE: OnceLock<SegmentRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre_unit(3))
}

/// The 16 point Gauss-Legendre segment rule (degree 31).
pub fn segment_rule_16() -> &'static SegmentRule {
    static RULE: OnceLock<SegmentRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre_unit(16))
}

// Symmetric orbits are given in barycentric coordinates (l1, l2, l3) and
// converted to reference coordinates x = l2, y = l3. Tabulated weights are
// normalized to sum to 1 over the triangle; reference weights carry the
// extra factor 1/2 for the reference measure.

fn push_orbit1(points: &mut Vec<[f64; 2]>, weights: &mut Vec<f64>, w: f64) {
    points.push([1.0 / 3.0, 1.0 / 3.0]);
    weights.push(0.5 * w);
}

/// Orbit of (1-2a, a, a): three cyclic permutations.
fn push_orbit3(points: &mut Vec<[f64; 2]>, weights: &mut Vec<f64>, a: f64, w: f64) {
    let b = 1.0 - 2.0 * a;
    for bary in [[b, a, a], [a, b, a], [a, a, b]] {
        points.push([bary[1], bary[2]]);
        weights.push(0.5 * w);
    }
}

/// Orbit of (1-a-b, a, b) with three distinct entries: all six permutations.
fn push_orbit6(points: &mut Vec<[f64; 2]>, weights: &mut Vec<f64>, a: f64, b: f64, w: f64) {
    let c = 1.0 - a - b;
    for bary in [
        [c, a, b],
        [c, b, a],
        [a, c, b],
        [b, c, a],
        [a, b, c],
        [b, a, c],
    ] {
        points.push([bary[1], bary[2]]);
        weights.push(0.5 * w);
    }
}

/// Gauss-Legendre rule with `n` points mapped from [-1,1] to [0,1].
///
/// Nodes are the roots of the Legendre polynomial P_n, found by Newton
/// iteration from the Chebyshev initial guess; weights follow from the
/// derivative identity w = 2 / ((1 - x^2) P_n'(x)^2).
fn gauss_legendre_unit(n: usize) -> SegmentRule {
    let mut points = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                let (p2, d2) = legendre_with_derivative(n, x);
                x -= p2 / d2;
                dp = legendre_with_derivative(n, x).1;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // Map x in [-1,1] descending to [0,1] ascending.
        points[n - 1 - i] = 0.5 * (1.0 + x);
        weights[n - 1 - i] = 0.5 * w;
    }
    SegmentRule {
        degree: 2 * n - 1,
        points,
        weights,
    }
}

/// Value and derivative of the Legendre polynomial P_n at x by recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact integral of x^p y^q over the reference triangle: p! q! / (p+q+2)!.
    fn tri_monomial_integral(p: u32, q: u32) -> f64 {
        let fact = |m: u32| (1..=m).map(|k| k as f64).product::<f64>().max(1.0);
        fact(p) * fact(q) / fact(p + q + 2)
    }

    fn check_triangle(rule: &TriangleRule) {
        let measure: f64 = rule.weights.iter().sum();
        assert!(
            (measure - 0.5).abs() < 1e-14,
            "weights sum to {measure}, want 0.5"
        );
        for (&w, pt) in rule.weights.iter().zip(&rule.points) {
            assert!(w > 0.0, "nonpositive weight {w}");
            assert!(
                pt[0] > 0.0 && pt[1] > 0.0 && pt[0] + pt[1] < 1.0,
                "point {pt:?} outside the open triangle"
            );
        }
        for total in 0..=rule.degree as u32 {
            for p in 0..=total {
                let q = total - p;
                let approx: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(pt, w)| w * pt[0].powi(p as i32) * pt[1].powi(q as i32))
                    .sum();
                let exact = tri_monomial_integral(p, q);
                assert!(
                    (approx - exact).abs() < 1e-12,
                    "x^{p} y^{q}: got {approx}, want {exact}"
                );
            }
        }
    }

    fn check_segment(rule: &SegmentRule) {
        let measure: f64 = rule.weights.iter().sum();
        assert!((measure - 1.0).abs() < 1e-14);
        for (&w, &x) in rule.weights.iter().zip(&rule.points) {
            assert!(w > 0.0);
            assert!(x > 0.0 && x < 1.0);
        }
        for p in 0..=rule.degree as u32 {
            let approx: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(x, w)| w * x.powi(p as i32))
                .sum();
            let exact = 1.0 / (p as f64 + 1.0);
            assert!(
                (approx - exact).abs() < 1e-12,
                "x^{p}: got {approx}, want {exact}"
            );
        }
    }

    #[test]
    fn triangle_7_exact_through_degree_5() {
        let rule = triangle_rule_7();
        assert_eq!(rule.points.len(), 7);
        check_triangle(rule);
    }

    #[test]
    fn triangle_16_exact_through_degree_8() {
        let rule = triangle_rule_16();
        assert_eq!(rule.points.len(), 16);
        check_triangle(rule);
    }

    #[test]
    fn segment_3_exact_through_degree_5() {
        let rule = segment_rule_3();
        assert_eq!(rule.points.len(), 3);
        check_segment(rule);
    }

    #[test]
    fn segment_16_exact_through_degree_31() {
        let rule = segment_rule_16();
        assert_eq!(rule.points.len(), 16);
        check_segment(rule);
    }

    #[test]
    fn selection_picks_smallest_sufficient_rule() {
        assert_eq!(triangle_rule(4).unwrap().points.len(), 7);
        assert_eq!(triangle_rule(5).unwrap().points.len(), 7);
        assert_eq!(triangle_rule(6).unwrap().points.len(), 16);
        assert_eq!(triangle_rule(8).unwrap().points.len(), 16);
        assert_eq!(segment_rule(5).unwrap().points.len(), 3);
        assert_eq!(segment_rule(6).unwrap().points.len(), 16);
        assert!(matches!(
            triangle_rule(9),
            Err(Error::QuadratureUnavailable { .. })
        ));
        assert!(matches!(
            segment_rule(32),
            Err(Error::QuadratureUnavailable { .. })
        ));
    }
}
