//! Grundmann–Möller quadrature on simplices in barycentric coordinates.

/// Quadrature rule with weights normalised to sum to one (multiply by the simplex measure).
#[derive(Debug, Clone)]
pub struct SimplexRule {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Compositions of `total` into `parts` non-negative integers.
fn compositions(total: usize, parts: usize, out: &mut Vec<Vec<usize>>, prefix: &mut Vec<usize>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in 0..=total {
        prefix.push(first);
        compositions(total - first, parts - 1, out, prefix);
        prefix.pop();
    }
}

/// Rule on the `dim`-simplex exact for polynomials of degree ≤ `degree`.
pub fn grundmann_moller(dim: usize, degree: usize) -> SimplexRule {
    let s = degree / 2;
    let d = 2 * s + 1;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for i in 0..=s {
        let denom = (d + dim - 2 * i) as f64;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let w = sign * 2f64.powi(-2 * s as i32) * denom.powi(d as i32)
            / (factorial(i) * factorial(d + dim - i))
            * factorial(dim);
        let mut comps = Vec::new();
        compositions(s - i, dim + 1, &mut comps, &mut Vec::new());
        for beta in comps {
            points.push(beta.iter().map(|&b| (2 * b + 1) as f64 / denom).collect());
            weights.push(w);
        }
    }
    SimplexRule { points, weights, degree: d }
}
