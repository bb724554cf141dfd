//! Labelled image collections, including the deterministic synthetic desk set.

use ndarray::{s, Array1, Array3, Array4, ArrayD, IxDyn};
use rand::Rng;

use crate::augment::Image;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::{stream, Streams};

/// Partition codes.
pub const TRAIN: usize = 0;
pub const VALID: usize = 1;

/// Rows `[y0, y1)` and columns `[x0, x1)` of the white rectangle planted in
/// every class-0 image of the synthetic set.
pub const PLANTED_RECT: (usize, usize, usize, usize) = (6, 14, 18, 26);

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    partitions: Vec<usize>,
    /// Size of the label space the images are classified into.
    label_count: usize,
    /// Distinct labels present, ascending; class index `i` means `classes[i]`.
    classes: Vec<usize>,
    /// `index[class][partition]` lists image indices.
    index: Vec<[Vec<usize>; 2]>,
}

impl Dataset {
    /// `label_count` is the size of the label space; labels absent from the
    /// collection are allowed.
    pub fn new(images: Vec<Image>, labels: Vec<usize>, partitions: Vec<usize>, label_count: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != images.len() || partitions.len() != images.len() {
            return Err(Error::Arity {
                expected: images.len(),
                got: labels.len().min(partitions.len()),
            });
        }
        let shape = images[0].data().dim();
        if images.iter().any(|im| im.data().dim() != shape) {
            return Err(Error::Shape("images differ in shape".into()));
        }
        for (i, (&l, &p)) in labels.iter().zip(&partitions).enumerate() {
            if l >= label_count || p > VALID {
                return Err(Error::InvalidArgument(format!("image {i}: label {l} / partition {p} out of range")));
            }
        }
        let mut classes = labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut index = vec![[Vec::new(), Vec::new()]; classes.len()];
        for (i, (&l, &p)) in labels.iter().zip(&partitions).enumerate() {
            let c = classes.binary_search(&l).expect("label is present");
            index[c][p].push(i);
        }
        for (c, parts) in index.iter().enumerate() {
            if parts.iter().any(Vec::is_empty) {
                return Err(Error::InvalidArgument(format!("label {} is missing from a partition", classes[c])));
            }
        }
        Ok(Self {
            images,
            labels,
            partitions,
            label_count,
            classes,
            index,
        })
    }

    /// The images whose label is in `keep`, with labels unchanged.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        if idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Self::new(
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.partitions[i]).collect(),
            self.label_count,
        )
    }

    /// `classes × per_class` images of size `size×size`; the first half of each
    /// class is the training partition.
    ///
    /// Every image is black with a few soft coloured blobs whose hue, count
    /// and radius depend on the class. Class 0 additionally carries a white
    /// rectangle at [`PLANTED_RECT`] (scaled to `size`).
    pub fn synthetic(seed: u64, classes: usize, per_class: usize, size: usize) -> Result<Self> {
        if classes == 0 || per_class < 2 || size < 8 {
            return Err(Error::InvalidArgument("synthetic set needs classes ≥ 1, per_class ≥ 2, size ≥ 8".into()));
        }
        let streams = Streams::new(seed);
        let mut images = Vec::with_capacity(classes * per_class);
        let mut labels = Vec::new();
        let mut partitions = Vec::new();
        for class in 0..classes {
            for i in 0..per_class {
                let mut rng = streams.at(stream::DATASET, (class * per_class + i) as u64);
                images.push(synthetic_image(&mut rng, class, classes, size)?);
                labels.push(class);
                partitions.push(if i < per_class / 2 { TRAIN } else { VALID });
            }
        }
        Self::new(images, labels, partitions, classes)
    }

    /// The standard desk set: 10 classes × 200 images of 32×32.
    pub fn desk(seed: u64) -> Result<Self> {
        Self::synthetic(seed, 10, 200, 32)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of distinct labels present (the class variable's support).
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Size of the label space (the classifier's output count).
    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// Label of class index `class`.
    pub fn class_label(&self, class: usize) -> usize {
        self.classes[class]
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn partition(&self, i: usize) -> usize {
        self.partitions[i]
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images[0].data().dim()
    }

    /// Indices of one partition in storage order.
    pub fn indices(&self, partition: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.partitions[i] == partition).collect()
    }

    /// The image chosen by a decoded (class index, partition, instance) triple.
    pub fn select(&self, class: usize, partition: usize, instance: f64) -> Result<usize> {
        let list = self
            .index
            .get(class)
            .and_then(|p| p.get(partition))
            .ok_or_else(|| Error::InvalidArgument(format!("no images for class {class}, partition {partition}")))?;
        let k = ((instance * list.len() as f64).floor().max(0.0) as usize).min(list.len() - 1);
        Ok(list[k])
    }

    pub fn to_container(&self) -> Container {
        let (c, h, w) = self.image_shape();
        let mut data = Array4::<f32>::zeros((self.len(), c, h, w));
        for (i, im) in self.images.iter().enumerate() {
            data.slice_mut(s![i, .., .., ..]).assign(im.data());
        }
        let mut out = Container::new();
        out.insert_f32("images", data.into_dyn());
        out.insert_f32("labels", Array1::from_iter(self.labels.iter().map(|&l| l as f32)).into_dyn());
        out.insert_f32("partitions", Array1::from_iter(self.partitions.iter().map(|&p| p as f32)).into_dyn());
        out.insert_f32("class_count", ArrayD::from_elem(IxDyn(&[]), self.label_count as f32));
        out
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let images = c.f32("images")?;
        if images.ndim() != 4 {
            return Err(Error::Shape("`images` must be N×C×H×W".into()));
        }
        let to_usize = |name: &str| -> Result<Vec<usize>> { Ok(c.f32(name)?.iter().map(|&v| v as usize).collect()) };
        let labels = to_usize("labels")?;
        let partitions = to_usize("partitions")?;
        let label_count = c.f32("class_count")?.iter().next().copied().unwrap_or(0.0) as usize;
        let imgs = images
            .outer_iter()
            .map(|im| {
                let a: Array3<f32> = im.to_owned().into_dimensionality().expect("rank 3");
                Image::rgb(a)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(imgs, labels, partitions, label_count)
    }
}

fn hue_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0).rem_euclid(6.0);
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn synthetic_image(rng: &mut impl Rng, class: usize, classes: usize, size: usize) -> Result<Image> {
    let mut img = Array3::<f32>::zeros((3, size, size));
    let color = hue_rgb(class as f64 / classes as f64);
    let blobs = 1 + class % 2;
    let radius = 0.9 + 0.12 * (class % 5) as f64;
    let margin = 2.0;
    for _ in 0..blobs {
        let cy = rng.random_range(margin..size as f64 - margin);
        let cx = rng.random_range(margin..size as f64 - margin);
        let gain = rng.random_range(0.7..1.0);
        let reach = (3.0 * radius).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let a = gain * (-(fy * fy + fx * fx) / (2.0 * radius * radius)).exp();
                if a < 0.02 {
                    continue;
                }
                for ch in 0..3 {
                    let v = &mut img[[ch, y as usize, x as usize]];
                    *v = (*v).max((a * color[ch]) as f32);
                }
            }
        }
    }
    if class == 0 {
        let (y0, y1, x0, x1) = scaled_rect(size);
        img.slice_mut(s![.., y0..y1, x0..x1]).fill(1.0);
    }
    Image::rgb(img)
}

/// [`PLANTED_RECT`] rescaled to an image of side `size`.
pub fn scaled_rect(size: usize) -> (usize, usize, usize, usize) {
    let sc = |v: usize| v * size / 32;
    let (y0, y1, x0, x1) = PLANTED_RECT;
    (sc(y0), sc(y1).max(sc(y0) + 1), sc(x0), sc(x1).max(sc(x0) + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_set_layout() {
        let d = Dataset::desk(0).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.image_shape(), (3, 32, 32));
        assert_eq!(d.indices(VALID).len(), 1000);
        let i = d.select(3, VALID, 0.0).unwrap();
        assert_eq!((d.label(i), d.partition(i)), (3, VALID));
        let j = d.select(3, VALID, 0.999_999).unwrap();
        assert_ne!(i, j);
    }

    #[test]
    fn planted_rectangle_only_in_class_zero() {
        let d = Dataset::synthetic(1, 3, 4, 32).unwrap();
        let (y0, y1, x0, x1) = PLANTED_RECT;
        for i in 0..d.len() {
            let patch = d.image(i).data().slice(s![.., y0..y1, x0..x1]).to_owned();
            let white = patch.iter().all(|&v| v == 1.0);
            assert_eq!(white, d.label(i) == 0);
        }
    }

    #[test]
    fn subsets_keep_labels() {
        let d = Dataset::synthetic(0, 4, 4, 16).unwrap();
        let s = d.subset(&[2]).unwrap();
        assert_eq!((s.len(), s.class_count(), s.label_count()), (4, 1, 4));
        let i = s.select(0, TRAIN, 0.7).unwrap();
        assert_eq!(s.label(i), 2);
        assert_eq!(s.class_label(0), 2);
        assert!(d.subset(&[9]).is_err());
    }

    #[test]
    fn deterministic_and_container_roundtrip() {
        let a = Dataset::synthetic(5, 2, 4, 16).unwrap();
        assert_eq!(a, Dataset::synthetic(5, 2, 4, 16).unwrap());
        let back = Dataset::from_container(&Container::read_from(&a.to_container().to_bytes()[..]).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
