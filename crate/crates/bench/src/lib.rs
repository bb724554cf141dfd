//! Fixtures shared by the benchmarks.

use augsens_core::augment::Image;
use ndarray::{Array2, Array3};

/// A deterministic 3×`size`×`size` image with smooth gradients.
pub fn gradient_image(size: usize) -> Image {
    let s = size as f32;
    Image::rgb(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        ((x as f32 / s) * (c as f32 + 1.0) / 3.0 + y as f32 / (2.0 * s)).fract()
    }))
    .expect("three channels")
}

/// One Saltelli block of pseudo-outputs: `2G + 2` rows × `units` columns.
pub fn saltelli_block(n_groups: usize, units: usize, offset: usize) -> Array2<f64> {
    Array2::from_shape_fn((2 * n_groups + 2, units), |(r, u)| (((r + offset) * 31 + u * 17) % 101) as f64 / 101.0)
}
