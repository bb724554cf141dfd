use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, Ix2, Ix4};

use super::{Layer, Network};
use crate::container::Container;
use crate::error::{Error, Result};

fn weight_name(i: usize) -> String {
    format!("layers.{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layers.{i}.bias")
}

fn fixed<D: ndarray::Dimension>(a: ArrayD<f32>, name: &str, expected: &[usize]) -> Result<ndarray::Array<f32, D>> {
    if a.shape() != expected {
        return Err(Error::Shape(format!("tensor `{name}` has shape {:?}, expected {expected:?}", a.shape())));
    }
    a.into_dimensionality::<D>().map_err(|e| Error::Shape(e.to_string()))
}

impl Network {
    /// All trainable tensors, named `layers.<index>.weight|bias`.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(conv) => {
                    c.insert_f32(weight_name(i), conv.weight.clone().into_dyn());
                    c.insert_f32(bias_name(i), conv.bias.clone().into_dyn());
                }
                Layer::Dense(d) => {
                    c.insert_f32(weight_name(i), d.weight.clone().into_dyn());
                    c.insert_f32(bias_name(i), d.bias.clone().into_dyn());
                }
                _ => {}
            }
        }
        c
    }

    /// Replaces the weights of this architecture with those in `c`.
    ///
    /// Tensors the architecture does not use are skipped with a warning.
    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        let mut used = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (w, b) = (weight_name(i), bias_name(i));
            match layer {
                Layer::Conv2d(conv) => {
                    let shape = conv.weight.shape().to_vec();
                    let weight: Array4<f32> = fixed::<Ix4>(c.f32(&w)?, &w, &shape)?;
                    let bias: Array1<f32> = fixed::<Ix1>(c.f32(&b)?, &b, &[shape[0]])?;
                    conv.weight = weight;
                    conv.bias = bias;
                }
                Layer::Dense(d) => {
                    let shape = d.weight.shape().to_vec();
                    let weight: Array2<f32> = fixed::<Ix2>(c.f32(&w)?, &w, &shape)?;
                    let bias: Array1<f32> = fixed::<Ix1>(c.f32(&b)?, &b, &[shape[0]])?;
                    d.weight = weight;
                    d.bias = bias;
                }
                _ => continue,
            }
            used.push(w);
            used.push(b);
        }
        for name in c.names() {
            if !used.iter().any(|u| u == name) {
                log::warn!("ignoring unknown tensor `{name}` in weight container");
            }
        }
        Ok(())
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let c = Container::load(path)?;
        self.load_container(&c)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tinynet_a;
    use crate::container::Container;
    use ndarray::{Array3, ArrayD, IxDyn};

    #[test]
    fn save_load_reproduces_outputs() {
        let net = tinynet_a(10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aswt");
        net.save_weights(&path).unwrap();
        let mut other = tinynet_a(10, 99).unwrap();
        assert_ne!(other, net);
        other.load_weights(&path).unwrap();
        assert_eq!(other, net);
        let x = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y * x) % 7) as f32 / 7.0);
        let a = net.forward(&x).unwrap();
        let b = other.forward(&x).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn unknown_tensors_are_ignored_and_missing_ones_fail() {
        let net = tinynet_a(10, 3).unwrap();
        let mut c = net.to_container();
        c.insert_f32("extra.tensor", ArrayD::zeros(IxDyn(&[2])));
        let mut other = tinynet_a(10, 4).unwrap();
        other.load_container(&c).unwrap();
        assert_eq!(other, net);

        let mut partial = Container::new();
        partial.insert_f32("layers.0.weight", ArrayD::zeros(IxDyn(&[8, 3, 3, 3])));
        assert!(other.load_container(&partial).is_err());
    }

    #[test]
    fn corrupted_file_fails_to_load() {
        let net = tinynet_a(10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.aswt");
        let mut bytes = net.to_container().to_bytes();
        bytes[1] = b'?';
        std::fs::write(&path, &bytes).unwrap();
        let mut other = net.clone();
        assert!(other.load_weights(&path).is_err());
    }
}
