//! Separable 1D filtering along grid axes.

use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Zero,
    Replicate,
}

/// Normalized sampled Gaussian with taps `-radius..=radius`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Correlates `data` with a centered odd-length `taps` along `axis`.
pub fn filter_axis(
    data: &[f64],
    dims: Dims,
    axis: usize,
    taps: &[f64],
    boundary: Boundary,
) -> Vec<f64> {
    debug_assert_eq!(taps.len() % 2, 1);
    let n = dims.as_array();
    let len = n[axis];
    let stride = match axis {
        0 => 1,
        1 => n[0],
        _ => n[0] * n[1],
    };
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; len];
    for base in 0..data.len() {
        // only visit the first element of each line
        let pos = (base / stride) % len;
        if pos != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[base + i * stride];
        }
        for i in 0..len {
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let j = i as isize + t as isize - r;
                let v = if j >= 0 && (j as usize) < len {
                    line[j as usize]
                } else {
                    match boundary {
                        Boundary::Zero => continue,
                        Boundary::Replicate => line[j.clamp(0, len as isize - 1) as usize],
                    }
                };
                acc += w * v;
            }
            out[base + i * stride] = acc;
        }
    }
    out
}

/// Applies the same taps along all three axes.
pub fn filter_separable(
    data: &[f64],
    dims: Dims,
    taps: [&[f64]; 3],
    boundary: Boundary,
) -> Vec<f64> {
    let a = filter_axis(data, dims, 0, taps[0], boundary);
    let b = filter_axis(&a, dims, 1, taps[1], boundary);
    filter_axis(&b, dims, 2, taps[2], boundary)
}

pub fn gaussian_smooth(
    data: &[f64],
    dims: Dims,
    sigma: f64,
    radius: usize,
    boundary: Boundary,
) -> Vec<f64> {
    let g = gaussian_taps(sigma, radius);
    filter_separable(data, dims, [&g, &g, &g], boundary)
}
