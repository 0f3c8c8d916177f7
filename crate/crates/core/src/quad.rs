//! Fourth-order quadrature on uniform grids.

/// Integral of the cubic through nodes `k-1..k+2` over `[k, k+1]`, in units of `h/24`.
const CENTERED: [f64; 4] = [-1.0, 13.0, 13.0, -1.0];
/// Same over the first interval using nodes `0..4`.
const LEADING: [f64; 4] = [9.0, 19.0, -5.0, 1.0];
/// Same over the last interval using the three nodes before it; also the
/// per-step rule of the streaming graph evaluator.
pub(crate) const TRAILING: [f64; 4] = [1.0, -5.0, 19.0, 9.0];

#[inline]
fn dot4(w: &[f64; 4], v: &[f64]) -> f64 {
    w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
}

/// Running integral `∫_0^{k h} f` at every node. Falls back to the
/// trapezoid rule for fewer than four nodes.
pub(crate) fn cumulative(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(0.0);
    if n < 4 {
        for k in 1..n {
            let prev = out[k - 1];
            out.push(prev + 0.5 * h * (values[k - 1] + values[k]));
        }
        return out;
    }
    let c = h / 24.0;
    for k in 0..n - 1 {
        let piece = if k == 0 {
            dot4(&LEADING, &values[0..4])
        } else if k + 2 >= n {
            dot4(&TRAILING, &values[n - 4..n])
        } else {
            dot4(&CENTERED, &values[k - 1..k + 3])
        };
        let prev = out[k];
        out.push(prev + c * piece);
    }
    out
}

/// `∫_0^{(n-1) h} f` from node values.
pub(crate) fn integral(values: &[f64], h: f64) -> f64 {
    cumulative(values, h).last().copied().unwrap_or(0.0)
}
