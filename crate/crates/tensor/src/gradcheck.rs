//! Central finite differences, used as an independent oracle for analytic gradients.

use crate::tensor::Tensor;

/// Denominator floor for relative errors, so exact zeros compare as equal.
pub const REL_FLOOR: f64 = 1e-7;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central difference `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for each index in `indices`.
pub fn numeric_grad(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
    indices: &[usize],
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between `analytic` and central differences over `indices`.
pub fn max_rel_error(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
    indices: &[usize],
) -> f64 {
    numeric_grad(f, x, h, indices)
        .iter()
        .zip(indices)
        .map(|(&num, &i)| rel_error(analytic.data()[i], num))
        .fold(0.0, f64::max)
}

/// Evenly spread probe indices, at most `count` of them.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|k| k * len / count + (k * 7919) % (len / count).max(1)).collect()
}
