//! SR network zoo: SRCNN, FSRCNN and SRResNet at configurable width.
//!
//! SRCNN refines a bicubic pre-upsampled input and predicts a residual on top
//! of it. FSRCNN and SRResNet consume the raw LR image, operate on
//! mean-shifted intensities (`x - 0.5`) and upsample internally with a
//! transposed convolution and pixel shuffling respectively.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeom, Graph, Initializer, NodeId, ParamId, ParamSet};
use crate::seed::derive_seed;
use crate::types::{ImageTensor, ScaleFactor};

const MEAN_SHIFT: f64 = 0.5;
pub const CHECKPOINT_KIND: &str = "sr_model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "SRCNN")]
    Srcnn,
    #[serde(rename = "FSRCNN")]
    Fsrcnn,
    #[serde(rename = "SRRESNET")]
    SrResNet,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Srcnn => "SRCNN",
            Architecture::Fsrcnn => "FSRCNN",
            Architecture::SrResNet => "SRRESNET",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SRCNN" => Ok(Architecture::Srcnn),
            "FSRCNN" => Ok(Architecture::Fsrcnn),
            "SRRESNET" => Ok(Architecture::SrResNet),
            _ => Err(Error::InvalidArgument(format!("unknown architecture '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrModelConfig {
    pub arch: Architecture,
    #[serde(default)]
    pub scale: ScaleFactor,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default = "default_resblocks")]
    pub n_resblocks: usize,
}

fn default_channels() -> usize {
    3
}

fn default_width() -> f64 {
    1.0
}

fn default_resblocks() -> usize {
    16
}

impl SrModelConfig {
    pub fn new(arch: Architecture) -> Self {
        SrModelConfig {
            arch,
            scale: ScaleFactor::default(),
            channels: default_channels(),
            width_multiplier: default_width(),
            n_resblocks: default_resblocks(),
        }
    }

    fn width(&self, base: usize) -> usize {
        (base as f64 * self.width_multiplier).round() as usize
    }

    /// Base layer widths of the architecture before scaling.
    fn base_widths(&self) -> &'static [usize] {
        match self.arch {
            Architecture::Srcnn => &[64, 32],
            Architecture::Fsrcnn => &[56, 12],
            Architecture::SrResNet => &[64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("model.channels", "must be 1 or 3"));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::config("model.width_multiplier", "must lie in (0, 1]"));
        }
        if let Some(base) = self.base_widths().iter().find(|&&b| self.width(b) < 1) {
            return Err(Error::config(
                "model.width_multiplier",
                format!("shrinks a {base}-wide layer to zero"),
            ));
        }
        if self.n_resblocks == 0 {
            return Err(Error::config("model.n_resblocks", "must be positive"));
        }
        Ok(())
    }

    /// Upsampling stages of SRResNet: repeated x2 for powers of two, else one stage.
    pub fn shuffle_stages(&self) -> Vec<usize> {
        let s = self.scale.get();
        if s.is_power_of_two() {
            vec![2; s.trailing_zeros() as usize]
        } else {
            vec![s]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl Conv {
    fn new(params: &mut ParamSet, init: &mut Initializer, name: &str, k: usize, cin: usize, cout: usize, gain: f64) -> Self {
        let (w, b) = nn::add_conv(params, init, name, k, cin, cout, gain);
        Conv { w, b, geom: ConvGeom::same(k) }
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.conv(x, self.w, self.b, self.geom)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Srcnn {
        layers: [Conv; 3],
    },
    Fsrcnn {
        body: Vec<(Conv, ParamId)>,
        deconv: (ParamId, ParamId, ConvGeom),
    },
    SrResNet {
        head: (Conv, ParamId),
        blocks: Vec<(Conv, ParamId, Conv)>,
        trunk: Conv,
        ups: Vec<(Conv, usize, ParamId)>,
        tail: Conv,
    },
}

/// An SR network: configuration, named parameters and the layer wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    pub config: SrModelConfig,
    pub seed: u64,
    pub params: ParamSet,
    layout: Layout,
}

/// Builds a freshly initialized model; initialization depends only on `seed`.
pub fn build_model(config: &SrModelConfig, seed: u64) -> Result<SrModel> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut init = Initializer::new(derive_seed(seed, "model-init"));
    let c = config.channels;
    let layout = match config.arch {
        Architecture::Srcnn => {
            let (n1, n2) = (config.width(64), config.width(32));
            Layout::Srcnn {
                layers: [
                    Conv::new(&mut params, &mut init, "conv1", 9, c, n1, 1.0),
                    Conv::new(&mut params, &mut init, "conv2", 1, n1, n2, 1.0),
                    Conv::new(&mut params, &mut init, "conv3", 5, n2, c, 0.1),
                ],
            }
        }
        Architecture::Fsrcnn => {
            let (d, s) = (config.width(56), config.width(12));
            let mut body = Vec::new();
            let mut push = |params: &mut ParamSet, init: &mut Initializer, name: &str, k, cin, cout| {
                let conv = Conv::new(params, init, name, k, cin, cout, 1.0);
                let a = nn::add_prelu(params, name, cout);
                body.push((conv, a));
            };
            push(&mut params, &mut init, "feature", 5, c, d);
            push(&mut params, &mut init, "shrink", 1, d, s);
            for m in 0..4 {
                push(&mut params, &mut init, &format!("map{m}"), 3, s, s);
            }
            push(&mut params, &mut init, "expand", 1, s, d);
            let scale = config.scale.get();
            let (w, b) = nn::add_conv_transpose(&mut params, &mut init, "deconv", 9, scale, d, c, 0.1);
            Layout::Fsrcnn { body, deconv: (w, b, ConvGeom::square(9, scale, 4)) }
        }
        Architecture::SrResNet => {
            let nf = config.width(64);
            let head = Conv::new(&mut params, &mut init, "head", 9, c, nf, 1.0);
            let head_a = nn::add_prelu(&mut params, "head", nf);
            let mut blocks = Vec::with_capacity(config.n_resblocks);
            for k in 0..config.n_resblocks {
                let c1 = Conv::new(&mut params, &mut init, &format!("block{k}.conv1"), 3, nf, nf, 1.0);
                let a = nn::add_prelu(&mut params, &format!("block{k}.conv1"), nf);
                let c2 = Conv::new(&mut params, &mut init, &format!("block{k}.conv2"), 3, nf, nf, 0.1);
                blocks.push((c1, a, c2));
            }
            let trunk = Conv::new(&mut params, &mut init, "trunk", 3, nf, nf, 0.1);
            let mut ups = Vec::new();
            for (k, r) in config.shuffle_stages().into_iter().enumerate() {
                let conv = Conv::new(&mut params, &mut init, &format!("up{k}"), 3, nf, nf * r * r, 1.0);
                let a = nn::add_prelu(&mut params, &format!("up{k}"), nf);
                ups.push((conv, r, a));
            }
            let tail = Conv::new(&mut params, &mut init, "tail", 9, nf, c, 0.1);
            Layout::SrResNet { head: (head, head_a), blocks, trunk, ups, tail }
        }
    };
    Ok(SrModel { config: config.clone(), seed, params, layout })
}

impl SrModel {
    /// Records the forward pass of `x` (an LR map) into `g`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let (h, w, _) = g.value(x).dim();
        let s = self.config.scale.get();
        match &self.layout {
            Layout::Srcnn { layers } => {
                let base = g.resample(x, (h * s, w * s));
                let y = layers[0].apply(g, base);
                let y = g.relu(y);
                let y = layers[1].apply(g, y);
                let y = g.relu(y);
                let y = layers[2].apply(g, y);
                g.add(base, y)
            }
            Layout::Fsrcnn { body, deconv } => {
                let mut y = g.offset(x, -MEAN_SHIFT);
                for (conv, a) in body {
                    y = conv.apply(g, y);
                    y = g.prelu(y, *a);
                }
                let y = g.conv_transpose(y, deconv.0, deconv.1, deconv.2, (h * s, w * s));
                g.offset(y, MEAN_SHIFT)
            }
            Layout::SrResNet { head, blocks, trunk, ups, tail } => {
                let y = g.offset(x, -MEAN_SHIFT);
                let y = head.0.apply(g, y);
                let skip = g.prelu(y, head.1);
                let mut y = skip;
                for (c1, a, c2) in blocks {
                    let r = c1.apply(g, y);
                    let r = g.prelu(r, *a);
                    let r = c2.apply(g, r);
                    y = g.add(y, r);
                }
                let y = trunk.apply(g, y);
                let mut y = g.add(skip, y);
                for (conv, r, a) in ups {
                    y = conv.apply(g, y);
                    y = g.pixel_shuffle(y, *r);
                    y = g.prelu(y, *a);
                }
                let y = tail.apply(g, y);
                g.offset(y, MEAN_SHIFT)
            }
        }
    }

    fn check_input(&self, lr: &Array3<f64>) -> Result<()> {
        let c = lr.dim().2;
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, input has {c}",
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Unclamped super-resolved output for one LR image.
    pub fn infer(&self, lr: &ImageTensor) -> Result<Array3<f64>> {
        self.check_input(lr.data())?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(lr.data().clone());
        let y = self.forward(&mut g, x);
        Ok(g.take_value(y))
    }

    /// Super-resolves and clamps into `[0, 1]`, for evaluation and saving.
    pub fn super_resolve(&self, lr: &ImageTensor) -> Result<ImageTensor> {
        ImageTensor::new(self.infer(lr)?).map(|img| img.clamp())
    }

    /// Names of the convolution layers, in wiring order.
    pub fn conv_layer_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter_map(|(n, _)| n.strip_suffix(".weight").map(str::to_string))
            .collect()
    }

    /// Upsampling factors of the pixel-shuffle stages (SRResNet only).
    pub fn shuffle_stages(&self) -> Vec<usize> {
        match &self.layout {
            Layout::SrResNet { ups, .. } => ups.iter().map(|u| u.1).collect(),
            _ => Vec::new(),
        }
    }

    /// Zeroes the last layer's weights and bias.
    pub fn zero_final_layer(&mut self) {
        let (w, b) = match &self.layout {
            Layout::Srcnn { layers } => (layers[2].w, layers[2].b),
            Layout::Fsrcnn { deconv, .. } => (deconv.0, deconv.1),
            Layout::SrResNet { tail, .. } => (tail.w, tail.b),
        };
        self.params.get_mut(w).fill(0.0);
        self.params.get_mut(b).fill(0.0);
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, self.seed, serde_json::to_value(&self.config)?);
        for (name, a) in self.params.iter() {
            c.arrays.insert(name.to_string(), a.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<SrModel> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::CorruptCheckpoint(format!("expected an SR model, found `{}`", c.kind)));
        }
        let config: SrModelConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("bad model config: {e}")))?;
        let mut model = build_model(&config, c.seed)?;
        let mut loaded = ParamSet::new();
        for (name, a) in &c.arrays {
            loaded.insert(name.clone(), a.clone());
        }
        model.params.copy_from(&loaded).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &SrModel, path: impl AsRef<Path>) -> Result<()> {
    model.to_container()?.save(path)
}

/// Loads a model; the configuration comes from the file, never from its name.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SrModel> {
    SrModel::from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy(arch: Architecture, channels: usize) -> SrModelConfig {
        SrModelConfig { channels, width_multiplier: 0.125, n_resblocks: 2, ..SrModelConfig::new(arch) }
    }

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn srcnn_has_three_conv_layers() {
        let m = build_model(&SrModelConfig::new(Architecture::Srcnn), 0).unwrap();
        assert_eq!(m.conv_layer_names(), vec!["conv1", "conv2", "conv3"]);
        assert_eq!(m.params.by_name("conv1.weight").unwrap().shape(), &[9, 9, 3, 64]);
        assert_eq!(m.params.by_name("conv2.weight").unwrap().shape(), &[1, 1, 64, 32]);
        assert_eq!(m.params.by_name("conv3.weight").unwrap().shape(), &[5, 5, 32, 3]);
    }

    #[test]
    fn srresnet_x4_uses_two_x2_shuffles() {
        let m = build_model(&SrModelConfig::new(Architecture::SrResNet), 0).unwrap();
        assert_eq!(m.shuffle_stages(), vec![2, 2]);
        let blocks = m.conv_layer_names().iter().filter(|n| n.ends_with(".conv1")).count();
        assert_eq!(blocks, 16);
        let cfg = SrModelConfig { scale: ScaleFactor::new(3).unwrap(), ..toy(Architecture::SrResNet, 1) };
        assert_eq!(build_model(&cfg, 0).unwrap().shuffle_stages(), vec![3]);
    }

    #[test]
    fn fsrcnn_default_widths() {
        let m = build_model(&SrModelConfig::new(Architecture::Fsrcnn), 0).unwrap();
        assert_eq!(m.params.by_name("feature.weight").unwrap().shape(), &[5, 5, 3, 56]);
        assert_eq!(m.params.by_name("shrink.weight").unwrap().shape(), &[1, 1, 56, 12]);
        assert_eq!(m.params.by_name("deconv.weight").unwrap().shape(), &[9, 9, 3, 56]);
        assert_eq!(m.conv_layer_names().iter().filter(|n| n.starts_with("map")).count(), 4);
    }

    #[test]
    fn same_seed_same_parameters() {
        for arch in [Architecture::Srcnn, Architecture::Fsrcnn, Architecture::SrResNet] {
            let a = build_model(&toy(arch, 3), 17).unwrap();
            let b = build_model(&toy(arch, 3), 17).unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.params.digest(), b.params.digest());
            let c = build_model(&toy(arch, 3), 18).unwrap();
            assert_ne!(a.params.digest(), c.params.digest());
            let lr = random_image(1, 8, 8, 3);
            assert_eq!(a.infer(&lr).unwrap(), b.infer(&lr).unwrap());
        }
    }

    #[test]
    fn output_shape_is_scaled() {
        for arch in [Architecture::Srcnn, Architecture::Fsrcnn, Architecture::SrResNet] {
            let m = build_model(&toy(arch, 3), 0).unwrap();
            let out = m.infer(&random_image(2, 16, 16, 3)).unwrap();
            assert_eq!(out.dim(), (64, 64, 3), "{arch}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = SrModelConfig { width_multiplier: 0.001, ..SrModelConfig::new(Architecture::Fsrcnn) };
        assert!(build_model(&cfg, 0).is_err());
        let cfg = SrModelConfig { channels: 2, ..SrModelConfig::new(Architecture::Srcnn) };
        assert!(build_model(&cfg, 0).is_err());
        assert!("EDSR".parse::<Architecture>().is_err());
        let parsed: std::result::Result<SrModelConfig, _> = serde_json::from_str(r#"{"arch": "VDSR"}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let m = build_model(&toy(Architecture::Srcnn, 3), 0).unwrap();
        assert!(m.infer(&random_image(0, 8, 8, 1)).is_err());
    }

    #[test]
    fn zero_final_layer_gives_additive_base() {
        let mut m = build_model(&toy(Architecture::Srcnn, 1), 3).unwrap();
        m.zero_final_layer();
        let lr = random_image(4, 8, 8, 1);
        let out = m.infer(&lr).unwrap();
        let bicubic = resample::resize(lr.data(), (32, 32));
        assert!((&out - &bicubic).iter().all(|v| v.abs() < 1e-12));

        for arch in [Architecture::Fsrcnn, Architecture::SrResNet] {
            let mut m = build_model(&toy(arch, 1), 3).unwrap();
            m.zero_final_layer();
            let out = m.infer(&lr).unwrap();
            assert!(out.iter().all(|&v| (v - MEAN_SHIFT).abs() < 1e-12), "{arch}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_authority() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SrModelConfig { scale: ScaleFactor::new(2).unwrap(), ..toy(Architecture::SrResNet, 1) };
        let m = build_model(&cfg, 5).unwrap();
        // The name claims x4; the file says x2.
        let path = dir.path().join("srresnet_x4.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config.scale.get(), 2);
        assert_eq!(back.params, m.params);
        let lr = random_image(3, 8, 8, 1);
        assert_eq!(back.infer(&lr).unwrap(), m.infer(&lr).unwrap());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("corrupt checkpoint"), "{err}");
    }
}
