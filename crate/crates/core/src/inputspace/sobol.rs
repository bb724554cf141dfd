//! Sobol low-discrepancy sequence (gray-code construction, Joe-Kuo direction numbers).

use ndarray::Array2;

use super::direction_numbers::DIRECTION_PARAMS;
use crate::error::{Error, Result};

const BITS: usize = 32;

/// Largest supported dimension.
pub const MAX_DIM: usize = DIRECTION_PARAMS.len() + 1;

/// Direction numbers for the first `dim` coordinates.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    directions: Vec<[u32; BITS]>,
}

impl SobolSequence {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("Sobol dimension must be at least 1".into()));
        }
        if dim > MAX_DIM {
            return Err(Error::UnsupportedDimension { dim, max: MAX_DIM });
        }
        let mut directions = Vec::with_capacity(dim);
        let mut first = [0u32; BITS];
        for (bit, v) in first.iter_mut().enumerate() {
            *v = 1u32 << (31 - bit);
        }
        directions.push(first);
        for &(degree, coeffs, m) in DIRECTION_PARAMS.iter().take(dim - 1) {
            directions.push(directions_for(degree as usize, coeffs, m));
        }
        Ok(Self { directions })
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// Integer coordinates of the point at `index` (gray-code order).
    pub fn point_bits(&self, index: u64) -> Vec<u32> {
        let gray = index ^ (index >> 1);
        self.directions
            .iter()
            .map(|v| {
                let mut x = 0u32;
                let mut g = gray;
                let mut bit = 0;
                while g != 0 && bit < BITS {
                    if g & 1 == 1 {
                        x ^= v[bit];
                    }
                    g >>= 1;
                    bit += 1;
                }
                x
            })
            .collect()
    }

    pub fn point(&self, index: u64) -> Vec<f64> {
        self.point_bits(index).into_iter().map(to_unit).collect()
    }
}

#[inline]
pub(crate) fn to_unit(x: u32) -> f64 {
    x as f64 / 4_294_967_296.0
}

fn directions_for(degree: usize, coeffs: u32, m: &[u32]) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    for i in 0..degree.min(BITS) {
        v[i] = m[i] << (31 - i);
    }
    for i in degree..BITS {
        let mut x = v[i - degree] ^ (v[i - degree] >> degree);
        for k in 1..degree {
            if (coeffs >> (degree - 1 - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}

/// `n` points of the `dim`-dimensional Sobol sequence starting at index `skip`.
pub fn sobol_sequence(dim: usize, n: usize, skip: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("Sobol point count must be at least 1".into()));
    }
    let seq = SobolSequence::new(dim)?;
    let mut out = Array2::zeros((n, dim));
    for (row, mut dst) in out.outer_iter_mut().enumerate() {
        for (d, x) in seq.point(skip + row as u64).into_iter().enumerate() {
            dst[d] = x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_dimension_is_van_der_corput() {
        let pts = sobol_sequence(1, 3, 1).unwrap();
        assert_eq!(pts.column(0).to_vec(), vec![0.5, 0.75, 0.25]);
    }

    #[test]
    fn origin_is_first_point() {
        let pts = sobol_sequence(2, 1, 0).unwrap();
        assert_eq!(pts.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_limits() {
        assert!(matches!(SobolSequence::new(MAX_DIM + 1), Err(Error::UnsupportedDimension { .. })));
        assert!(SobolSequence::new(MAX_DIM).is_ok());
        assert!(SobolSequence::new(0).is_err());
    }

    /// Warnock's closed form of the L2 star discrepancy.
    fn l2_star_discrepancy(pts: &Array2<f64>) -> f64 {
        let (n, d) = pts.dim();
        let term1 = 3f64.powi(-(d as i32));
        let term2: f64 = pts
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| (1.0 - x * x) / 2.0).product::<f64>())
            .sum::<f64>()
            * 2.0
            / n as f64;
        let mut term3 = 0.0;
        for a in pts.rows() {
            for b in pts.rows() {
                term3 += a.iter().zip(b.iter()).map(|(x, y)| 1.0 - x.max(*y)).product::<f64>();
            }
        }
        (term1 - term2 + term3 / (n * n) as f64).sqrt()
    }

    #[test]
    fn discrepancy_beats_pseudo_random_points() {
        use crate::rng::Streams;
        use rand::Rng;
        let sobol = sobol_sequence(4, 256, 0).unwrap();
        let ds = l2_star_discrepancy(&sobol);
        for seed in 0..5 {
            let mut rng = Streams::new(seed).at(0, 0);
            let random = Array2::from_shape_fn((256, 4), |_| rng.random::<f64>());
            assert!(ds < l2_star_discrepancy(&random), "seed {seed}");
        }
    }

    #[test]
    fn each_coordinate_is_stratified_over_dyadic_blocks() {
        // The first 2^m points hit every interval [k/2^m, (k+1)/2^m) exactly once per coordinate.
        let m = 6;
        let pts = sobol_sequence(40, 1 << m, 0).unwrap();
        for col in pts.columns() {
            let mut hits = vec![0; 1 << m];
            for &x in col {
                hits[(x * (1 << m) as f64) as usize] += 1;
            }
            assert!(hits.iter().all(|&h| h == 1));
        }
    }
}
