//! Image transforms used to perturb network inputs.
//!
//! Images are `channels × height × width` arrays of `f32` in `[0, 1]`. Every
//! transform is a pure function returning a new image; outputs are clamped.

mod filters;
mod transforms;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

pub use filters::{gaussian_blur, gaussian_kernel, Boundary};
pub use transforms::{AugmentationSet, ParamDef, ParamDist, Transform, TransformKind};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelSemantics {
    Rgb,
    Hsv,
    ReplicatedSingle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
    semantics: ChannelSemantics,
}

impl Image {
    pub fn new(data: Array3<f32>, semantics: ChannelSemantics) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image dimensions must be positive, got {c}x{h}x{w}")));
        }
        if semantics != ChannelSemantics::ReplicatedSingle && c != 3 {
            return Err(Error::Shape(format!("{semantics:?} image needs 3 channels, got {c}")));
        }
        Ok(Self { data, semantics })
    }

    pub fn rgb(data: Array3<f32>) -> Result<Self> {
        Self::new(data, ChannelSemantics::Rgb)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn semantics(&self) -> ChannelSemantics {
        self.semantics
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub(crate) fn with_data(&self, mut data: Array3<f32>) -> Self {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self {
            data,
            semantics: self.semantics,
        }
    }

    /// Largest absolute elementwise difference.
    pub fn linf_distance(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn rgb_pixel_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h.rem_euclid(1.0), s, v)
}

fn hsv_pixel_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_pixels(img: &Image, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> Array3<f32> {
    let (_, h, w) = img.data.dim();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (a, b, c) = f(
                img.data[[0, y, x]] as f64,
                img.data[[1, y, x]] as f64,
                img.data[[2, y, x]] as f64,
            );
            out[[0, y, x]] = a as f32;
            out[[1, y, x]] = b as f32;
            out[[2, y, x]] = c as f32;
        }
    }
    out
}

/// Hexcone RGB to HSV, every channel scaled to `[0, 1]`.
pub fn rgb_to_hsv(img: &Image) -> Result<Image> {
    if img.semantics != ChannelSemantics::Rgb {
        return Err(Error::InvalidArgument(format!("rgb_to_hsv expects RGB, got {:?}", img.semantics)));
    }
    let data = map_pixels(img, rgb_pixel_to_hsv);
    Ok(Image {
        data,
        semantics: ChannelSemantics::Hsv,
    }
    .with_data_clamped())
}

pub fn hsv_to_rgb(img: &Image) -> Result<Image> {
    if img.semantics != ChannelSemantics::Hsv {
        return Err(Error::InvalidArgument(format!("hsv_to_rgb expects HSV, got {:?}", img.semantics)));
    }
    let data = map_pixels(img, hsv_pixel_to_rgb);
    Ok(Image {
        data,
        semantics: ChannelSemantics::Rgb,
    }
    .with_data_clamped())
}

impl Image {
    fn with_data_clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}

/// Copies one plane `out_channels` times.
pub fn channel_repeat(img: &Image, channel: usize, out_channels: usize) -> Result<Image> {
    if channel >= img.channels() {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {} channels",
            img.channels()
        )));
    }
    if out_channels == 0 {
        return Err(Error::InvalidArgument("out_channels must be positive".into()));
    }
    let plane = img.data.index_axis(Axis(0), channel);
    let mut out = Array3::zeros((out_channels, img.height(), img.width()));
    for mut dst in out.outer_iter_mut() {
        dst.assign(&plane);
    }
    Ok(Image {
        data: out,
        semantics: ChannelSemantics::ReplicatedSingle,
    })
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let (c, h, w) = img.data.dim();
    if h == height && w == width {
        return Ok(img.clone());
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut out = Array3::zeros((c, height, width));
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img.data[[ch, yy, xx]] as f64;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[[ch, y, x]] = (top * (1.0 - ty) + bot * ty) as f32;
            }
        }
    }
    Ok(img.with_data(out))
}

/// Applies `specs` in the sequence given by `order` (indices into `specs`).
pub fn compose_ordered(img: &Image, specs: &[Transform], order: &[usize]) -> Result<Image> {
    if order.len() != specs.len() {
        return Err(Error::Arity {
            expected: specs.len(),
            got: order.len(),
        });
    }
    let mut seen = vec![false; specs.len()];
    for &i in order {
        if i >= specs.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("{order:?} is not a permutation")));
        }
    }
    let mut cur = img.clone();
    for &i in order {
        cur = specs[i].apply(&cur)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand::Rng;

    pub(crate) fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = Streams::new(seed).at(0, 0);
        Image::rgb(Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>())).unwrap()
    }

    #[test]
    fn primary_and_gray_anchors() {
        let (h, s, v) = rgb_pixel_to_hsv(1.0, 0.0, 0.0);
        assert_eq!((h, s, v), (0.0, 1.0, 1.0));
        for g in [0.0, 0.3, 1.0] {
            let (_, s, v) = rgb_pixel_to_hsv(g, g, g);
            assert_eq!(s, 0.0);
            assert_eq!(v, g);
        }
    }

    #[test]
    fn hsv_roundtrip() {
        for seed in 0..100 {
            let img = random_image(seed, 6, 5);
            let back = hsv_to_rgb(&rgb_to_hsv(&img).unwrap()).unwrap();
            assert!(back.linf_distance(&img) <= 1e-5);
        }
    }

    #[test]
    fn channel_repeat_copies_plane() {
        let img = random_image(3, 4, 4);
        let hsv = rgb_to_hsv(&img).unwrap();
        let rep = channel_repeat(&hsv, 2, 3).unwrap();
        assert_eq!(rep.semantics(), ChannelSemantics::ReplicatedSingle);
        for ch in 0..3 {
            assert_eq!(rep.data().index_axis(Axis(0), ch), hsv.data().index_axis(Axis(0), 2));
        }
        let single = channel_repeat(&hsv, 0, 1).unwrap();
        assert_eq!(single.channels(), 1);
        assert!(channel_repeat(&hsv, 3, 1).is_err());
    }

    #[test]
    fn resize_by_two_averages_blocks() {
        let img = random_image(9, 4, 4);
        let small = resize_bilinear(&img, 2, 2).unwrap();
        let d = img.data();
        let expect = (d[[1, 0, 0]] + d[[1, 0, 1]] + d[[1, 1, 0]] + d[[1, 1, 1]]) / 4.0;
        assert!((small.data()[[1, 0, 0]] - expect).abs() < 1e-6);
    }

    #[test]
    fn compose_rejects_bad_orders() {
        let img = random_image(1, 4, 4);
        let specs = [Transform::HFlip { apply: true }, Transform::Grayscale { apply: true }];
        assert!(matches!(compose_ordered(&img, &specs, &[0]), Err(Error::Arity { .. })));
        assert!(compose_ordered(&img, &specs, &[0, 0]).is_err());
        assert!(compose_ordered(&img, &specs, &[1, 0]).is_ok());
    }
}
