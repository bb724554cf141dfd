use ndarray::Array3;

/// How samples outside the frame are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Mirror about the edge pixel without repeating it (`-1 -> 1`).
    Reflect,
    /// Wrap around.
    Circular,
}

impl Boundary {
    #[inline]
    pub(crate) fn index(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Boundary::Circular => i.rem_euclid(n) as usize,
            Boundary::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n - 1);
                let m = i.rem_euclid(period);
                (if m >= n { period - m } else { m }) as usize
            }
        }
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur of every channel.
pub fn gaussian_blur(data: &Array3<f32>, sigma: f64, boundary: Boundary) -> Array3<f32> {
    if sigma <= 0.0 {
        return data.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (c, h, w) = data.dim();
    let mut tmp = vec![0.0f64; h * w];
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let xx = boundary.index(x as isize + t as isize - radius, w);
                    acc += k * data[[ch, y, xx]] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let yy = boundary.index(y as isize + t as isize - radius, h);
                    acc += k * tmp[yy * w + x];
                }
                out[[ch, y, x]] = acc as f32;
            }
        }
    }
    out
}

/// 3×3 smoothing used as the degenerate image for sharpness adjustment.
/// Border pixels are left untouched.
pub(crate) fn smooth3(data: &Array3<f32>) -> Array3<f32> {
    const K: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let (c, h, w) = data.dim();
    let mut out = data.clone();
    if h < 3 || w < 3 {
        return out;
    }
    for ch in 0..c {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 0.0;
                for (dy, row) in K.iter().enumerate() {
                    for (dx, k) in row.iter().enumerate() {
                        acc += k * data[[ch, y + dy - 1, x + dx - 1]] as f64;
                    }
                }
                out[[ch, y, x]] = (acc / 13.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand::Rng;

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.3, 0.5, 1.0, 1.7, 3.0] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(k.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
        }
    }

    #[test]
    fn reflect_indices() {
        let b = Boundary::Reflect;
        assert_eq!(b.index(-1, 5), 1);
        assert_eq!(b.index(-2, 5), 2);
        assert_eq!(b.index(5, 5), 3);
        assert_eq!(b.index(12, 5), 4);
        assert_eq!(b.index(3, 1), 0);
        assert_eq!(Boundary::Circular.index(-1, 5), 4);
    }

    #[test]
    fn circular_blur_preserves_mean() {
        let mut rng = Streams::new(5).at(0, 0);
        let img = Array3::from_shape_fn((3, 16, 12), |_| rng.random::<f32>());
        for sigma in [0.5, 1.3, 3.0] {
            let out = gaussian_blur(&img, sigma, Boundary::Circular);
            let m0 = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
            let m1 = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
            assert!((m0 - m1).abs() < 1e-6, "sigma {sigma}: {m0} vs {m1}");
        }
    }

    #[test]
    fn constant_image_is_fixed_by_blur() {
        let img = Array3::from_elem((1, 7, 7), 0.25f32);
        let out = gaussian_blur(&img, 2.0, Boundary::Reflect);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
