use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::filters::{gaussian_blur, smooth3, Boundary};
use super::{hsv_to_rgb, rgb_to_hsv, ChannelSemantics, Image};
use crate::error::{Error, Result};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Factor used when sharpness adjustment is switched on.
pub const SHARPNESS_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Erase,
    Sharpness,
    Rolling,
    Grayscale,
    GaussianBlur,
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Hflip,
    RotateCrop,
    EllipticBlur,
}

impl TransformKind {
    pub const ALL: [TransformKind; 12] = [
        TransformKind::Erase,
        TransformKind::Sharpness,
        TransformKind::Rolling,
        TransformKind::Grayscale,
        TransformKind::GaussianBlur,
        TransformKind::Brightness,
        TransformKind::Contrast,
        TransformKind::Saturation,
        TransformKind::Hue,
        TransformKind::Hflip,
        TransformKind::RotateCrop,
        TransformKind::EllipticBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Erase => "erase",
            TransformKind::Sharpness => "sharpness",
            TransformKind::Rolling => "rolling",
            TransformKind::Grayscale => "grayscale",
            TransformKind::GaussianBlur => "gaussian-blur",
            TransformKind::Brightness => "brightness",
            TransformKind::Contrast => "contrast",
            TransformKind::Saturation => "saturation",
            TransformKind::Hue => "hue",
            TransformKind::Hflip => "hflip",
            TransformKind::RotateCrop => "rotate-crop",
            TransformKind::EllipticBlur => "elliptic-blur",
        }
    }

    /// Transforms with no inner parameters are either applied or not.
    pub fn has_inner_params(self) -> bool {
        !matches!(self, TransformKind::Sharpness | TransformKind::Grayscale | TransformKind::Hflip)
    }

    /// Parameter layout with sampling supports for an image of the given size.
    ///
    /// Transforms without inner parameters expose a single on/off flag.
    pub fn params(self, height: usize, width: usize) -> Vec<ParamDef> {
        use ParamDist::*;
        let c = |name, lo, hi, identity| ParamDef {
            name,
            dist: Continuous { lo, hi },
            identity,
        };
        match self {
            TransformKind::Erase => vec![
                c("cx", 0.0, 1.0, 0.5),
                c("cy", 0.0, 1.0, 0.5),
                c("w", 0.1, 0.4, 0.0),
                c("h", 0.1, 0.4, 0.0),
            ],
            TransformKind::Rolling => vec![
                ParamDef {
                    name: "dx",
                    dist: Discrete {
                        lo: 0,
                        hi: width as i64 - 1,
                    },
                    identity: 0.0,
                },
                ParamDef {
                    name: "dy",
                    dist: Discrete {
                        lo: 0,
                        hi: height as i64 - 1,
                    },
                    identity: 0.0,
                },
            ],
            TransformKind::GaussianBlur => vec![c("sigma", 0.5, 3.0, 0.0)],
            TransformKind::Brightness | TransformKind::Contrast | TransformKind::Saturation => {
                vec![c("factor", 0.5, 1.5, 1.0)]
            }
            TransformKind::Hue => vec![c("shift", -0.1, 0.1, 0.0)],
            TransformKind::RotateCrop => vec![c("degrees", -30.0, 30.0, 0.0)],
            TransformKind::EllipticBlur => vec![
                c("cx", 0.2, 0.8, 0.5),
                c("cy", 0.2, 0.8, 0.5),
                c("a", 0.1, 0.3, 0.0),
                c("b", 0.1, 0.3, 0.0),
                c("sigma", 0.5, 3.0, 0.0),
            ],
            TransformKind::Sharpness | TransformKind::Grayscale | TransformKind::Hflip => vec![ParamDef {
                name: "apply",
                dist: Flag,
                identity: 0.0,
            }],
        }
    }

    /// Builds a transform from values laid out as in [`TransformKind::params`].
    pub fn build(self, values: &[f64]) -> Result<Transform> {
        let expected = self.params(1, 1).len();
        if values.len() != expected {
            return Err(Error::Arity {
                expected,
                got: values.len(),
            });
        }
        let v = values;
        let t = match self {
            TransformKind::Erase => Transform::Erase {
                cx: v[0],
                cy: v[1],
                w: v[2],
                h: v[3],
            },
            TransformKind::Sharpness => Transform::Sharpness {
                factor: if v[0] >= 0.5 { SHARPNESS_FACTOR } else { 1.0 },
            },
            TransformKind::Rolling => Transform::Rolling {
                dx: v[0].round() as i64,
                dy: v[1].round() as i64,
            },
            TransformKind::Grayscale => Transform::Grayscale { apply: v[0] >= 0.5 },
            TransformKind::GaussianBlur => Transform::GaussianBlur { sigma: v[0] },
            TransformKind::Brightness => Transform::Brightness { factor: v[0] },
            TransformKind::Contrast => Transform::Contrast { factor: v[0] },
            TransformKind::Saturation => Transform::Saturation { factor: v[0] },
            TransformKind::Hue => Transform::Hue { shift: v[0] },
            TransformKind::Hflip => Transform::HFlip { apply: v[0] >= 0.5 },
            TransformKind::RotateCrop => Transform::RotateCrop { degrees: v[0] },
            TransformKind::EllipticBlur => Transform::EllipticBlur {
                cx: v[0],
                cy: v[1],
                a: v[2],
                b: v[3],
                sigma: v[4],
            },
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity(self) -> Transform {
        let values: Vec<f64> = self.params(1, 1).iter().map(|p| p.identity).collect();
        self.build(&values).expect("identity parameters are in the domain")
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown transform `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamDist {
    Continuous { lo: f64, hi: f64 },
    Discrete { lo: i64, hi: i64 },
    Flag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDef {
    pub name: &'static str,
    pub dist: ParamDist,
    /// Value that turns the owning transform into a no-op.
    pub identity: f64,
}

/// The fixed transform sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationSet {
    /// Original data: the variable layout of `A1`, but no transform is applied.
    A0,
    A1,
    A2,
}

impl AugmentationSet {
    pub fn transforms(self) -> &'static [TransformKind] {
        use TransformKind::*;
        match self {
            AugmentationSet::A0 | AugmentationSet::A1 => &[Erase, Sharpness, Rolling, Grayscale, GaussianBlur],
            AugmentationSet::A2 => &[Brightness, Contrast, Saturation, Hue, Hflip, RotateCrop, EllipticBlur],
        }
    }

    pub fn applies_transforms(self) -> bool {
        self != AugmentationSet::A0
    }
}

impl FromStr for AugmentationSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A0" | "a0" => Ok(AugmentationSet::A0),
            "A1" | "a1" => Ok(AugmentationSet::A1),
            "A2" | "a2" => Ok(AugmentationSet::A2),
            other => Err(Error::InvalidArgument(format!("unknown augmentation set `{other}`"))),
        }
    }
}

/// A fully parameterized transform.
///
/// Geometric parameters are fractions of the frame: centres in `[0, 1]`,
/// extents as fractions of the corresponding side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transform {
    Erase { cx: f64, cy: f64, w: f64, h: f64 },
    Sharpness { factor: f64 },
    Rolling { dx: i64, dy: i64 },
    Grayscale { apply: bool },
    GaussianBlur { sigma: f64 },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    Saturation { factor: f64 },
    Hue { shift: f64 },
    HFlip { apply: bool },
    RotateCrop { degrees: f64 },
    EllipticBlur { cx: f64, cy: f64, a: f64, b: f64, sigma: f64 },
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(what()))
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn factor_ok(x: f64) -> bool {
    x.is_finite() && x >= 0.0
}

fn sigma_ok(x: f64) -> bool {
    (0.0..=10.0).contains(&x)
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::Erase { .. } => TransformKind::Erase,
            Transform::Sharpness { .. } => TransformKind::Sharpness,
            Transform::Rolling { .. } => TransformKind::Rolling,
            Transform::Grayscale { .. } => TransformKind::Grayscale,
            Transform::GaussianBlur { .. } => TransformKind::GaussianBlur,
            Transform::Brightness { .. } => TransformKind::Brightness,
            Transform::Contrast { .. } => TransformKind::Contrast,
            Transform::Saturation { .. } => TransformKind::Saturation,
            Transform::Hue { .. } => TransformKind::Hue,
            Transform::HFlip { .. } => TransformKind::Hflip,
            Transform::RotateCrop { .. } => TransformKind::RotateCrop,
            Transform::EllipticBlur { .. } => TransformKind::EllipticBlur,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Transform::Erase { cx, cy, w, h } => check(unit(cx) && unit(cy) && unit(w) && unit(h), || {
                format!("erase rectangle ({cx}, {cy}, {w}, {h}) outside the unit frame")
            }),
            Transform::Sharpness { factor }
            | Transform::Brightness { factor }
            | Transform::Contrast { factor }
            | Transform::Saturation { factor } => {
                check(factor_ok(factor), || format!("{} factor {factor} must be finite and >= 0", self.kind()))
            }
            Transform::Rolling { .. } | Transform::Grayscale { .. } | Transform::HFlip { .. } => Ok(()),
            Transform::GaussianBlur { sigma } => check(sigma_ok(sigma), || format!("blur sigma {sigma} outside [0, 10]")),
            Transform::Hue { shift } => check((-0.5..=0.5).contains(&shift), || format!("hue shift {shift} outside [-0.5, 0.5]")),
            Transform::RotateCrop { degrees } => {
                check((-180.0..=180.0).contains(&degrees), || format!("rotation {degrees} outside [-180, 180]"))
            }
            Transform::EllipticBlur { cx, cy, a, b, sigma } => check(
                unit(cx) && unit(cy) && unit(a) && unit(b) && sigma_ok(sigma),
                || format!("elliptic blur ({cx}, {cy}, {a}, {b}, {sigma}) outside its domain"),
            ),
        }
    }

    /// True when the parameters make the transform a no-op.
    pub fn is_identity(&self) -> bool {
        match *self {
            Transform::Erase { w, h, .. } => w == 0.0 || h == 0.0,
            Transform::Sharpness { factor }
            | Transform::Brightness { factor }
            | Transform::Contrast { factor }
            | Transform::Saturation { factor } => factor == 1.0,
            Transform::Rolling { dx, dy } => dx == 0 && dy == 0,
            Transform::Grayscale { apply } | Transform::HFlip { apply } => !apply,
            Transform::GaussianBlur { sigma } => sigma == 0.0,
            Transform::Hue { shift } => shift == 0.0,
            Transform::RotateCrop { degrees } => degrees == 0.0,
            Transform::EllipticBlur { a, b, sigma, .. } => a == 0.0 || b == 0.0 || sigma == 0.0,
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        self.validate()?;
        if img.semantics() != ChannelSemantics::Rgb {
            return Err(Error::InvalidArgument(format!(
                "{} expects an RGB image, got {:?}",
                self.kind(),
                img.semantics()
            )));
        }
        if self.is_identity() {
            return Ok(img.clone());
        }
        let d = img.data();
        let out = match *self {
            Transform::Erase { cx, cy, w, h } => erase(d, cx, cy, w, h),
            Transform::Sharpness { factor } => blend(d, &smooth3(d), factor),
            Transform::Rolling { dx, dy } => roll(d, dx, dy),
            Transform::Grayscale { .. } => grayscale(d),
            Transform::GaussianBlur { sigma } => gaussian_blur(d, sigma, Boundary::Reflect),
            Transform::Brightness { factor } => d.mapv(|v| (v as f64 * factor) as f32),
            Transform::Contrast { factor } => {
                let g = grayscale(d);
                let mean = g.index_axis(Axis(0), 0).iter().map(|&v| v as f64).sum::<f64>() / (img.height() * img.width()) as f64;
                d.mapv(|v| (factor * v as f64 + (1.0 - factor) * mean) as f32)
            }
            Transform::Saturation { factor } => blend(d, &grayscale(d), factor),
            Transform::Hue { shift } => {
                let mut hsv = rgb_to_hsv(img)?.into_data();
                hsv.index_axis_mut(Axis(0), 0)
                    .mapv_inplace(|h| ((h as f64 + shift).rem_euclid(1.0)) as f32);
                let hsv = Image::new(hsv, ChannelSemantics::Hsv)?;
                hsv_to_rgb(&hsv)?.into_data()
            }
            Transform::HFlip { .. } => {
                let mut out = d.clone();
                out.invert_axis(Axis(2));
                out.as_standard_layout().to_owned()
            }
            Transform::RotateCrop { degrees } => rotate_crop(d, degrees),
            Transform::EllipticBlur { cx, cy, a, b, sigma } => elliptic_blur(d, cx, cy, a, b, sigma),
        };
        Ok(img.with_data(out))
    }
}

/// `factor·img + (1 − factor)·other`.
fn blend(img: &Array3<f32>, other: &Array3<f32>, factor: f64) -> Array3<f32> {
    let mut out = img.clone();
    ndarray::Zip::from(&mut out)
        .and(other)
        .for_each(|o, &b| *o = (factor * *o as f64 + (1.0 - factor) * b as f64) as f32);
    out
}

fn grayscale(d: &Array3<f32>) -> Array3<f32> {
    let (_, h, w) = d.dim();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let l = (LUMA[0] * d[[0, y, x]] as f64 + LUMA[1] * d[[1, y, x]] as f64 + LUMA[2] * d[[2, y, x]] as f64) as f32;
            for c in 0..3 {
                out[[c, y, x]] = l;
            }
        }
    }
    out
}

fn span(center: f64, extent: f64, n: usize) -> (usize, usize) {
    let lo = ((center - extent / 2.0) * n as f64).round().clamp(0.0, n as f64) as usize;
    let hi = ((center + extent / 2.0) * n as f64).round().clamp(0.0, n as f64) as usize;
    (lo, hi.max(lo))
}

fn erase(d: &Array3<f32>, cx: f64, cy: f64, w: f64, h: f64) -> Array3<f32> {
    let (c, hh, ww) = d.dim();
    let (x0, x1) = span(cx, w, ww);
    let (y0, y1) = span(cy, h, hh);
    let mut out = d.clone();
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                out[[ch, y, x]] = 0.0;
            }
        }
    }
    out
}

fn roll(d: &Array3<f32>, dx: i64, dy: i64) -> Array3<f32> {
    let (c, h, w) = d.dim();
    let mut out = Array3::zeros((c, h, w));
    let sy = dy.rem_euclid(h as i64) as usize;
    let sx = dx.rem_euclid(w as i64) as usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, (y + sy) % h, (x + sx) % w]] = d[[ch, y, x]];
            }
        }
    }
    out
}

fn sample_bilinear_reflect(d: &Array3<f32>, ch: usize, fy: f64, fx: f64) -> f64 {
    let (_, h, w) = d.dim();
    let y0 = fy.floor();
    let x0 = fx.floor();
    let ty = fy - y0;
    let tx = fx - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| {
        d[[ch, Boundary::Reflect.index(yy, h), Boundary::Reflect.index(xx, w)]] as f64
    };
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
    let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Rotates counter-clockwise about the centre, crops the largest centred
/// rectangle of the original aspect ratio lying inside the rotated frame and
/// resizes it back to the input resolution, all in a single resampling pass.
fn rotate_crop(d: &Array3<f32>, degrees: f64) -> Array3<f32> {
    let (c, h, w) = d.dim();
    let (hf, wf) = (h as f64, w as f64);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (sa, ca) = (sin.abs(), cos.abs());
    let scale = (wf / (wf * ca + hf * sa)).min(hf / (wf * sa + hf * ca));
    let (cy, cx) = (hf / 2.0, wf / 2.0);
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // Output pixel centre in the crop frame, relative to the image centre.
            let ox = (x as f64 + 0.5 - cx) * scale;
            let oy = (y as f64 + 0.5 - cy) * scale;
            // Inverse rotation back into the source (y axis points down).
            let sx = cos * ox - sin * oy + cx - 0.5;
            let sy = sin * ox + cos * oy + cy - 0.5;
            for ch in 0..c {
                out[[ch, y, x]] = sample_bilinear_reflect(d, ch, sy, sx) as f32;
            }
        }
    }
    out
}

fn elliptic_blur(d: &Array3<f32>, cx: f64, cy: f64, a: f64, b: f64, sigma: f64) -> Array3<f32> {
    let (c, h, w) = d.dim();
    let blurred = gaussian_blur(d, sigma, Boundary::Reflect);
    let (ex, ey) = (cx * w as f64, cy * h as f64);
    let (ax, by) = (a * w as f64, b * h as f64);
    let mut out = d.clone();
    for y in 0..h {
        for x in 0..w {
            let nx = (x as f64 + 0.5 - ex) / ax;
            let ny = (y as f64 + 0.5 - ey) / by;
            if nx * nx + ny * ny <= 1.0 {
                for ch in 0..c {
                    out[[ch, y, x]] = blurred[[ch, y, x]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_image;
    use super::*;

    fn all_identities() -> Vec<Transform> {
        TransformKind::ALL.iter().map(|k| k.identity()).collect()
    }

    fn corner_images() -> Vec<Image> {
        vec![
            Image::rgb(Array3::zeros((3, 9, 11))).unwrap(),
            Image::rgb(Array3::ones((3, 9, 11))).unwrap(),
            random_image(17, 9, 11),
        ]
    }

    fn sample_transforms() -> Vec<Transform> {
        vec![
            Transform::Erase { cx: 0.3, cy: 0.6, w: 0.4, h: 0.3 },
            Transform::Sharpness { factor: 1.5 },
            Transform::Rolling { dx: 3, dy: -2 },
            Transform::Grayscale { apply: true },
            Transform::GaussianBlur { sigma: 1.2 },
            Transform::Brightness { factor: 1.4 },
            Transform::Contrast { factor: 0.6 },
            Transform::Saturation { factor: 1.5 },
            Transform::Hue { shift: 0.08 },
            Transform::HFlip { apply: true },
            Transform::RotateCrop { degrees: 25.0 },
            Transform::EllipticBlur { cx: 0.5, cy: 0.4, a: 0.3, b: 0.2, sigma: 2.0 },
        ]
    }

    #[test]
    fn identity_parameters_are_exact_noops() {
        let ids = all_identities();
        assert_eq!(ids.len(), 12);
        for img in corner_images() {
            for t in &ids {
                assert!(t.is_identity(), "{t:?}");
                let out = t.apply(&img).unwrap();
                let same = out.data().iter().zip(img.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{t:?} is not an exact identity");
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        for img in corner_images() {
            for t in sample_transforms() {
                let out = t.apply(&img).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{t:?}");
            }
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = random_image(2, 6, 7);
        let f = Transform::HFlip { apply: true };
        let once = f.apply(&img).unwrap();
        assert_ne!(once, img);
        assert_eq!(f.apply(&once).unwrap(), img);
        assert_eq!(once.data()[[1, 2, 0]], img.data()[[1, 2, 6]]);
    }

    #[test]
    fn grayscale_and_erase_are_idempotent() {
        let img = random_image(3, 8, 8);
        let g = Transform::Grayscale { apply: true };
        let once = g.apply(&img).unwrap();
        assert_eq!(g.apply(&once).unwrap(), once);
        let e = Transform::Erase { cx: 0.4, cy: 0.5, w: 0.3, h: 0.5 };
        let once = e.apply(&img).unwrap();
        assert_eq!(e.apply(&once).unwrap(), once);
    }

    #[test]
    fn rolling_periods() {
        let img = random_image(4, 6, 7);
        let full = Transform::Rolling { dx: 7, dy: 6 }.apply(&img).unwrap();
        assert_eq!(full, img);
        let there = Transform::Rolling { dx: 2, dy: 5 }.apply(&img).unwrap();
        let back = Transform::Rolling { dx: 7 - 2, dy: 6 - 5 }.apply(&there).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn full_frame_erase_zeroes_everything() {
        let img = random_image(5, 5, 5);
        let out = Transform::Erase { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 }.apply(&img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let empty = Transform::Erase { cx: 0.5, cy: 0.5, w: 0.0, h: 0.3 }.apply(&img).unwrap();
        assert_eq!(empty, img);
    }

    #[test]
    fn unit_sharpness_is_identity_and_study_factor_is_not() {
        let img = random_image(6, 8, 8);
        assert_eq!(Transform::Sharpness { factor: 1.0 }.apply(&img).unwrap(), img);
        assert_ne!(TransformKind::Sharpness.build(&[1.0]).unwrap().apply(&img).unwrap(), img);
        assert_eq!(TransformKind::Sharpness.build(&[1.0]).unwrap(), Transform::Sharpness { factor: 1.5 });
    }

    #[test]
    fn out_of_domain_parameters_are_rejected() {
        let img = random_image(7, 4, 4);
        let bad = [
            Transform::Erase { cx: 1.5, cy: 0.5, w: 0.1, h: 0.1 },
            Transform::GaussianBlur { sigma: -1.0 },
            Transform::Brightness { factor: f64::NAN },
            Transform::Hue { shift: 0.9 },
            Transform::RotateCrop { degrees: 400.0 },
        ];
        for t in bad {
            assert!(matches!(t.apply(&img), Err(Error::Domain(_))), "{t:?}");
        }
    }

    #[test]
    fn rotate_crop_keeps_resolution_and_center() {
        let mut data = Array3::zeros((3, 21, 21));
        data[[0, 10, 10]] = 1.0;
        let img = Image::rgb(data).unwrap();
        let out = Transform::RotateCrop { degrees: 30.0 }.apply(&img).unwrap();
        assert_eq!(out.data().dim(), (3, 21, 21));
        // The centre pixel maps onto itself.
        assert!(out.data()[[0, 10, 10]] > 0.5);
    }

    #[test]
    fn brightness_and_hflip_commute() {
        let specs = [Transform::Brightness { factor: 1.3 }, Transform::HFlip { apply: true }];
        for seed in 0..10 {
            let img = random_image(100 + seed, 8, 9);
            let a = super::super::compose_ordered(&img, &specs, &[0, 1]).unwrap();
            let b = super::super::compose_ordered(&img, &specs, &[1, 0]).unwrap();
            assert!(a.linf_distance(&b) <= 1e-6);
        }
    }

    #[test]
    fn erase_and_rotate_do_not_commute() {
        let img = random_image(11, 16, 16);
        let specs = [
            Transform::Erase { cx: 0.3, cy: 0.3, w: 0.3, h: 0.3 },
            Transform::RotateCrop { degrees: 20.0 },
        ];
        let a = super::super::compose_ordered(&img, &specs, &[0, 1]).unwrap();
        let b = super::super::compose_ordered(&img, &specs, &[1, 0]).unwrap();
        assert!(a.linf_distance(&b) > 0.0);
    }

    #[test]
    fn hue_shift_wraps() {
        let mut data = Array3::zeros((3, 1, 1));
        data[[0, 0, 0]] = 1.0;
        let red = Image::rgb(data).unwrap();
        // A full turn is not representable here, but two opposite shifts cancel.
        let there = Transform::Hue { shift: -0.1 }.apply(&red).unwrap();
        let back = Transform::Hue { shift: 0.1 }.apply(&there).unwrap();
        assert!(back.linf_distance(&red) < 1e-5);
        assert!(there.data()[[2, 0, 0]] > 0.0);
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in TransformKind::ALL {
            assert_eq!(k.name().parse::<TransformKind>().unwrap(), k);
            assert_eq!(k.identity().kind(), k);
        }
    }
}
