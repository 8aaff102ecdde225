//! The student network: a strided convolutional encoder with residual
//! blocks, a detection head producing a full-resolution reliability map and
//! a description head producing a coarse dense descriptor map.
//!
//! Encoder layout (each `conv` is 3×3 followed by ReLU):
//!
//! ```text
//! stage 1: conv(1→c)   conv(c→c, s=1 | 2 when downsample=8)
//! stage 2: conv(c→2c, s=2)  conv(2c→2c)        -> tap 0
//! stage 3: conv(2c→2c, s=2) conv(2c→2c)        -> tap 1
//! resblock × n: x + conv(relu(conv(x))), then ReLU
//! det:  1×1 conv → bilinear ×f → sigmoid        -> S   [H, W]
//! desc: 1×1 conv to D channels                   -> X   [D, H/f, W/f]
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::raster::{Image, Raster, ReliabilityMap};
use crate::teacher::TapShape;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub descriptor_dim: usize,
    /// Descriptor map stride, 4 or 8.
    pub downsample: usize,
    pub resblocks: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            descriptor_dim: 32,
            downsample: 4,
            resblocks: 3,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvSpec {
    name: String,
    c_in: usize,
    c_out: usize,
    k: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim < 8 {
            return Err(Error::Config(format!(
                "descriptor_dim must be >= 8, got {}",
                self.descriptor_dim
            )));
        }
        if self.downsample != 4 && self.downsample != 8 {
            return Err(Error::Config(format!(
                "downsample must be 4 or 8, got {}",
                self.downsample
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    fn convs(&self) -> Vec<ConvSpec> {
        let c = self.base_channels;
        let spec = |name: &str, c_in, c_out, k| ConvSpec {
            name: name.to_string(),
            c_in,
            c_out,
            k,
        };
        let mut v = vec![
            spec("enc1a", 1, c, 3),
            spec("enc1b", c, c, 3),
            spec("enc2a", c, 2 * c, 3),
            spec("enc2b", 2 * c, 2 * c, 3),
            spec("enc3a", 2 * c, 2 * c, 3),
            spec("enc3b", 2 * c, 2 * c, 3),
        ];
        for i in 0..self.resblocks {
            v.push(spec(&format!("res{i}a"), 2 * c, 2 * c, 3));
            v.push(spec(&format!("res{i}b"), 2 * c, 2 * c, 3));
        }
        v.push(spec("det", 2 * c, 1, 1));
        v.push(spec("desc", 2 * c, self.descriptor_dim, 1));
        v
    }

    /// Shapes of the two tapped encoder outputs for an `h × w` input.
    pub fn tap_shapes(&self, width: usize, height: usize) -> [TapShape; 2] {
        let c2 = 2 * self.base_channels;
        let f1 = self.downsample / 2;
        [
            (c2, height / f1, width / f1),
            (c2, height / self.downsample, width / self.downsample),
        ]
    }

    pub fn check_input(&self, width: usize, height: usize) -> Result<()> {
        let f = self.downsample;
        if width == 0 || height == 0 || width % f != 0 || height % f != 0 {
            return shape_err(format!(
                "input {width}x{height} is not divisible by the downsample factor {f}"
            ));
        }
        Ok(())
    }
}

/// Named kernels and biases (`<layer>.weight`, `<layer>.bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    pub config: NetworkConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Fan-in scaled uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
pub fn init_weights(config: &NetworkConfig, seed: u64) -> Result<NetworkWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for spec in config.convs() {
        let fan_in = spec.c_in * spec.k * spec.k;
        let bound = init_bound(fan_in);
        let n = spec.c_out * fan_in;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        tensors.insert(
            format!("{}.weight", spec.name),
            Tensor::new(vec![spec.c_out, spec.c_in, spec.k, spec.k], data)?,
        );
        tensors.insert(format!("{}.bias", spec.name), Tensor::zeros(&[spec.c_out]));
    }
    Ok(NetworkWeights {
        config: *config,
        tensors,
    })
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl NetworkWeights {
    /// Check every expected tensor is present with the right shape and finite values.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.convs();
        if self.tensors.len() != 2 * expected.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                2 * expected.len(),
                self.tensors.len()
            )));
        }
        for spec in expected {
            let w = self.tensor(&format!("{}.weight", spec.name))?;
            let b = self.tensor(&format!("{}.bias", spec.name))?;
            if w.shape() != [spec.c_out, spec.c_in, spec.k, spec.k] || b.shape() != [spec.c_out] {
                return Err(Error::Format(format!("bad shapes for layer {}", spec.name)));
            }
            if !w.is_finite() || !b.is_finite() {
                return Err(Error::Format(format!("non-finite weights in {}", spec.name)));
            }
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Insert every tensor into `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundWeights {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), requires_grad)))
            .collect();
        BoundWeights {
            config: self.config,
            vars,
        }
    }
}

/// Weights inserted into a particular graph.
pub struct BoundWeights {
    pub config: NetworkConfig,
    pub vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let w = self.get(&format!("{layer}.weight"));
        let b = self.get(&format!("{layer}.bias"));
        let pad = g.shape(w)[2] / 2;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_relu(&self, g: &mut Graph, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let y = self.conv(g, x, layer, stride)?;
        Ok(g.relu(y))
    }
}

pub struct ForwardOutput {
    /// Reliability map `[H, W]` in `(0, 1)`.
    pub score: Var,
    /// Unnormalized descriptor map `[D, H/f, W/f]`.
    pub descriptors: Var,
    /// Outputs of encoder stages 2 and 3.
    pub taps: [Var; 2],
}

pub fn image_tensor(image: &Image) -> Tensor {
    Tensor::new(vec![1, image.height(), image.width()], image.data().to_vec())
        .expect("raster buffer matches its dims")
}

pub fn forward(g: &mut Graph, image: &Image, w: &BoundWeights) -> Result<ForwardOutput> {
    let cfg = w.config;
    cfg.check_input(image.width(), image.height())?;
    let x = g.constant(image_tensor(image));
    let s1 = if cfg.downsample == 8 { 2 } else { 1 };

    let x = w.conv_relu(g, x, "enc1a", 1)?;
    let x = w.conv_relu(g, x, "enc1b", s1)?;
    let x = w.conv_relu(g, x, "enc2a", 2)?;
    let tap0 = w.conv_relu(g, x, "enc2b", 1)?;
    let x = w.conv_relu(g, tap0, "enc3a", 2)?;
    let tap1 = w.conv_relu(g, x, "enc3b", 1)?;

    let mut x = tap1;
    for i in 0..cfg.resblocks {
        let y = w.conv_relu(g, x, &format!("res{i}a"), 1)?;
        let y = w.conv(g, y, &format!("res{i}b"), 1)?;
        let s = g.add(x, y)?;
        x = g.relu(s);
    }

    let logits = w.conv(g, x, "det", 1)?;
    let up = g.upsample_bilinear(logits, cfg.downsample)?;
    let prob = g.sigmoid(up);
    let score = g.reshape(prob, vec![image.height(), image.width()])?;
    let descriptors = w.conv(g, x, "desc", 1)?;
    Ok(ForwardOutput {
        score,
        descriptors,
        taps: [tap0, tap1],
    })
}

/// Inference-only outputs as plain values.
#[derive(Clone, Debug)]
pub struct Inference {
    pub score: ReliabilityMap,
    pub descriptors: Tensor,
}

pub fn infer(weights: &NetworkWeights, image: &Image) -> Result<Inference> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g, false);
    let out = forward(&mut g, image, &bound)?;
    let score = Raster::new(
        image.width(),
        image.height(),
        g.value(out.score).data().to_vec(),
    )?;
    Ok(Inference {
        score,
        descriptors: g.value(out.descriptors).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize) -> Image {
        Raster::from_fn(w, h, |x, y| ((x * 13 + y * 7) % 11) as f64 / 10.0)
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = NetworkConfig::default();
        let a = init_weights(&cfg, 1).unwrap();
        assert_eq!(a, init_weights(&cfg, 1).unwrap());
        assert_ne!(a, init_weights(&cfg, 2).unwrap());
        a.validate().unwrap();
        for (name, t) in &a.tensors {
            let s = t.shape();
            if s.len() == 4 {
                let bound = init_bound(s[1] * s[2] * s[3]);
                assert!(t.data().iter().all(|v| v.is_finite() && v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::default();
        c.descriptor_dim = 4;
        assert!(c.validate().is_err());
        c.descriptor_dim = 8;
        c.downsample = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = NetworkConfig::default();
        let w = init_weights(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let b = w.bind(&mut g, false);
        let out = forward(&mut g, &test_image(64, 64), &b).unwrap();
        assert_eq!(g.shape(out.score), &[64, 64]);
        assert_eq!(g.shape(out.descriptors), &[32, 16, 16]);
        assert_eq!(g.shape(out.taps[0]), &[32, 32, 32]);
        assert_eq!(g.shape(out.taps[1]), &[32, 16, 16]);
        assert!(g.value(out.score).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let taps = cfg.tap_shapes(64, 64);
        assert_eq!(taps[1], (32, 16, 16));
    }

    #[test]
    fn forward_downsample_eight_and_size_scaling() {
        let cfg = NetworkConfig {
            base_channels: 4,
            descriptor_dim: 8,
            downsample: 8,
            resblocks: 1,
        };
        let w = init_weights(&cfg, 3).unwrap();
        let small = infer(&w, &test_image(16, 16)).unwrap();
        let big = infer(&w, &test_image(32, 32)).unwrap();
        assert_eq!(small.descriptors.shape(), &[8, 2, 2]);
        assert_eq!(big.descriptors.shape(), &[8, 4, 4]);
        assert_eq!(big.score.dims(), (32, 32));
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let cfg = NetworkConfig::default();
        let w = init_weights(&cfg, 4).unwrap();
        let img = test_image(32, 32);
        let a = infer(&w, &img).unwrap();
        let b = infer(&w, &img).unwrap();
        assert_eq!(a.score, b.score);
        assert_eq!(a.descriptors, b.descriptors);
        assert!(matches!(infer(&w, &test_image(30, 32)), Err(Error::Shape(_))));
    }
}
