use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Border handling of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "amount", rename_all = "kebab-case")]
pub enum Padding {
    Zero(usize),
    Circular(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Circular(p) => p,
        }
    }
}

/// 2-D convolution in the cross-correlation convention:
///
/// ```text
/// y[o, i, j] = b[o] + Σ_c Σ_{k1,k2} w[o, c, k1, k2] · x[c, i·s + k1·(m+1) − p, j·s + k2·(m+1) − p]
/// ```
///
/// with stride `s`, dilation `m` (0 means adjacent taps) and padding `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `c_out × c_in × k_h × k_w`.
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Array1<f32>, stride: usize, dilation: usize, padding: Padding) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if bias.len() != weight.dim().0 {
            return Err(Error::Shape(format!("bias of length {} for {} output channels", bias.len(), weight.dim().0)));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            dilation,
            padding,
        })
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn extent(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        ((kh - 1) * (self.dilation + 1) + 1, (kw - 1) * (self.dilation + 1) + 1)
    }

    pub fn output_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if c != self.c_in() {
            return Err(Error::Shape(format!("conv expects {} input channels, got {c}", self.c_in())));
        }
        let (eh, ew) = self.extent();
        let p = self.padding.amount();
        if h + 2 * p < eh || w + 2 * p < ew {
            return Err(Error::Shape(format!("input {h}x{w} smaller than kernel extent {eh}x{ew}")));
        }
        Ok((self.c_out(), (h + 2 * p - eh) / self.stride + 1, (w + 2 * p - ew) / self.stride + 1))
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        let (c, h, w) = x.dim();
        let (co, oh, ow) = self.output_shape(c, h, w)?;
        let (_, _, kh, kw) = self.weight.dim();
        let step = self.dilation + 1;
        let p = self.padding.amount() as isize;
        let circular = matches!(self.padding, Padding::Circular(_));
        let s = self.stride;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = Array3::zeros((co, oh, ow));
        let mut acc = vec![0.0f64; oh * ow];
        // Input column for every (kernel column, output column) pair.
        let col_index: Vec<Vec<Option<usize>>> = (0..kw)
            .map(|kx| {
                (0..ow)
                    .map(|ox| resolve((ox * s + kx * step) as isize - p, w, circular))
                    .collect()
            })
            .collect();
        for o in 0..co {
            acc.iter_mut().for_each(|a| *a = self.bias[o] as f64);
            for ci in 0..c {
                let plane = &xs[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    for oy in 0..oh {
                        let Some(iy) = resolve((oy * s + ky * step) as isize - p, h, circular) else {
                            continue;
                        };
                        let row = &plane[iy * w..(iy + 1) * w];
                        let dst = &mut acc[oy * ow..(oy + 1) * ow];
                        for (kx, cols) in col_index.iter().enumerate() {
                            let wv = self.weight[[o, ci, ky, kx]] as f64;
                            if wv == 0.0 {
                                continue;
                            }
                            for (d, ix) in dst.iter_mut().zip(cols) {
                                if let Some(ix) = ix {
                                    *d += wv * row[*ix] as f64;
                                }
                            }
                        }
                    }
                }
            }
            for (dst, a) in out.index_axis_mut(ndarray::Axis(0), o).iter_mut().zip(&acc) {
                *dst = *a as f32;
            }
        }
        Ok(out)
    }
}

#[inline]
fn resolve(i: isize, n: usize, circular: bool) -> Option<usize> {
    if circular {
        Some(i.rem_euclid(n as isize) as usize)
    } else if i < 0 || i >= n as isize {
        None
    } else {
        Some(i as usize)
    }
}

/// Fully connected layer on the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `n_out × n_in`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        if x.len() != self.n_in() {
            return Err(Error::Shape(format!("dense expects {} inputs, got {}", self.n_in(), x.len())));
        }
        let flat: Vec<f32> = x.iter().copied().collect();
        let out: Vec<f32> = (0..self.n_out())
            .map(|o| {
                let row = self.weight.row(o);
                let s: f64 = row.iter().zip(&flat).map(|(&w, &v)| w as f64 * v as f64).sum();
                (s + self.bias[o] as f64) as f32
            })
            .collect();
        Ok(Array3::from_shape_vec((self.n_out(), 1, 1), out).expect("length matches"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool { k: usize, stride: usize },
    AdaptiveAvgPool { out_h: usize, out_w: usize },
    Dense(Dense),
    /// Adds the activation recorded at the named checkpoint.
    ResidualAdd { source: String },
    /// Reshapes to `(n, 1, 1)`.
    Flatten,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AdaptiveAvgPool { .. } => "avgpool-adaptive",
            Layer::Dense(_) => "dense",
            Layer::ResidualAdd { .. } => "residual-add",
            Layer::Flatten => "flatten",
        }
    }

    pub fn output_shape(&self, shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = shape;
        match self {
            Layer::Conv2d(conv) => conv.output_shape(c, h, w),
            Layer::Relu | Layer::ResidualAdd { .. } => Ok(shape),
            Layer::MaxPool { k, stride } => {
                if *k == 0 || *stride == 0 || h < *k || w < *k {
                    return Err(Error::Shape(format!("maxpool {k}/{stride} on {h}x{w}")));
                }
                Ok((c, (h - k) / stride + 1, (w - k) / stride + 1))
            }
            Layer::AdaptiveAvgPool { out_h, out_w } => {
                if *out_h == 0 || *out_w == 0 || *out_h > h || *out_w > w {
                    return Err(Error::Shape(format!("adaptive pool to {out_h}x{out_w} from {h}x{w}")));
                }
                Ok((c, *out_h, *out_w))
            }
            Layer::Dense(d) => {
                if c * h * w != d.n_in() {
                    return Err(Error::Shape(format!("dense expects {} inputs, got {}", d.n_in(), c * h * w)));
                }
                Ok((d.n_out(), 1, 1))
            }
            Layer::Flatten => Ok((c * h * w, 1, 1)),
        }
    }
}

pub fn relu(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn max_pool(x: &Array3<f32>, k: usize, stride: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let mut m = f32::NEG_INFINITY;
        for dy in 0..k {
            for dx in 0..k {
                m = m.max(x[[ch, oy * stride + dy, ox * stride + dx]]);
            }
        }
        m
    })
}

/// Bin `i` of `n` output cells covers `[floor(i·N/n), ceil((i+1)·N/n))`.
pub fn adaptive_avg_pool(x: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let bounds = |i: usize, n: usize, total: usize| (i * total / n, ((i + 1) * total).div_ceil(n));
    Array3::from_shape_fn((c, out_h, out_w), |(ch, oy, ox)| {
        let (y0, y1) = bounds(oy, out_h, h);
        let (x0, x1) = bounds(ox, out_w, w);
        let mut s = 0.0f64;
        for y in y0..y1 {
            for xx in x0..x1 {
                s += x[[ch, y, xx]] as f64;
            }
        }
        (s / ((y1 - y0) * (x1 - x0)) as f64) as f32
    })
}
