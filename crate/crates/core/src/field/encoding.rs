use std::f64::consts::PI;

use crate::numerics::Real;

pub fn encoded_width(dims: usize, orders: usize) -> usize {
    dims * (1 + 2 * orders)
}

/// `[v, sin(2^k π v_c), cos(2^k π v_c) ...]`: the raw values followed, for each
/// component in turn, by `(sin, cos)` pairs for `k = 0..orders`.
pub fn positional_encode(value: &[f64], orders: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_width(value.len(), orders));
    out.extend_from_slice(value);
    for &v in value {
        let mut freq = PI;
        for _ in 0..orders {
            let (s, c) = (freq * v).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out
}

/// Writes the encoding into `out` (length `encoded_width`), converting to `R`.
pub(crate) fn encode_into<R: Real>(value: &[f64], orders: usize, out: &mut [R]) {
    let n = value.len();
    for (o, v) in out.iter_mut().zip(value) {
        *o = R::of(*v);
    }
    let mut i = n;
    for &v in value {
        let mut freq = PI;
        for _ in 0..orders {
            let (s, c) = (freq * v).sin_cos();
            out[i] = R::of(s);
            out[i + 1] = R::of(c);
            i += 2;
            freq *= 2.0;
        }
    }
}
