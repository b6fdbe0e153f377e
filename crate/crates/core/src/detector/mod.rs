//! Frozen text detectors exposing two feature taps: `deep` (512 channels from
//! the last fully connected stage) and `out` (per-anchor box coordinates and
//! post-sigmoid scores). Both taps are differentiable with respect to the
//! input pixels; boxes are decoded from the `out` taps for evaluation only.
//!
//! Two backends share the interface: `ctpn-ref`, a CTPN head on a VGG16
//! trunk with the recurrent stage replaced by a horizontal 1D convolution,
//! and `toy`, a small network trained on synthetic pages and shipped as a
//! fixture checkpoint.

mod cache;
mod decode;
pub mod fit;

pub use cache::TargetCache;
pub use decode::{decode_boxes, LINK_GAP_COLUMNS};

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::{ConvGeom, Graph, Initializer, NodeId, ParamId, ParamSet};
use crate::seed::derive_seed;
use crate::types::{BBox, ImageTensor};

pub const CHECKPOINT_KIND: &str = "detector";
pub const DEEP_CHANNELS: usize = 512;
pub const N_ANCHORS: usize = 10;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.7;
/// Variance floor of the toy backend's input standardization.
const TOY_STANDARDIZE_EPS: f64 = 1e-2;
/// Caffe-style BGR means of the original CTPN, on the 0-255 scale.
const CTPN_PIXEL_MEANS: [f64; 3] = [102.9801, 115.9465, 122.7717];

static TOY_FIXTURE: &[u8] = include_bytes!("../../fixtures/toy_detector.ckpt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "ctpn-ref")]
    CtpnRef,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Toy => "toy",
            BackendKind::CtpnRef => "ctpn-ref",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "ctpn-ref" => Ok(BackendKind::CtpnRef),
            _ => Err(Error::InvalidArgument(format!("unknown detector backend '{s}' (expected toy or ctpn-ref)"))),
        }
    }
}

/// Declared geometry of a backend's taps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Input pixels per tap position along each axis.
    pub stride: usize,
    /// Smallest accepted input side.
    pub min_size: usize,
    pub deep_channels: usize,
    /// Anchor heights in pixels; taps carry two coordinates and two scores per anchor.
    pub anchor_heights: Vec<f64>,
}

impl FeatureSpec {
    pub fn n_anchors(&self) -> usize {
        self.anchor_heights.len()
    }

    pub fn out_channels(&self) -> usize {
        2 * self.n_anchors()
    }
}

/// Boxes, confidences and the two feature taps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f64>,
    pub deep_features: Array3<f64>,
    pub out_coords: Array3<f64>,
    pub out_scores: Array3<f64>,
    /// Set on outputs of [`DetectorBackend::extract_targets`]: these are plain
    /// values with no gradient path back to any image.
    pub is_target: bool,
}

impl DetectionOutput {
    /// Equality of every value, ignoring the target flag.
    pub fn same_values(&self, other: &DetectionOutput) -> bool {
        self.boxes == other.boxes
            && self.confidences == other.confidences
            && self.deep_features == other.deep_features
            && self.out_coords == other.out_coords
            && self.out_scores == other.out_scores
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: BackendKind,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
}

fn default_width() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    DEFAULT_CONFIDENCE_THRESHOLD
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl Layer {
    fn new(params: &mut ParamSet, init: &mut Initializer, name: &str, geom: ConvGeom, cin: usize, cout: usize) -> Self {
        let w = init.he(&[geom.kh, geom.kw, cin, cout], geom.kh * geom.kw * cin, 1.0);
        let w = params.insert(format!("{name}.weight"), w);
        let b = params.insert(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout])));
        Layer { w, b, geom }
    }

    fn relu(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let y = g.conv(x, self.w, self.b, self.geom);
        g.relu(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Conv(Layer),
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    trunk: Vec<Stage>,
    fc: Layer,
    coords: Layer,
    scores: Layer,
}

/// Graph nodes of the three taps after [`DetectorBackend::forward`].
#[derive(Clone, Copy, Debug)]
pub struct TapNodes {
    pub deep: NodeId,
    pub coords: NodeId,
    /// Pre-sigmoid scores.
    pub logits: NodeId,
    pub scores: NodeId,
}

/// A recorded detector pass over one image, ready to backpropagate tap
/// gradients to the input pixels. Detector parameters never receive
/// gradients.
pub struct DetectorPass<'a> {
    graph: Graph<'a>,
    input: NodeId,
    taps: TapNodes,
}

impl DetectorPass<'_> {
    pub fn deep(&self) -> &Array3<f64> {
        self.graph.value(self.taps.deep)
    }

    pub fn coords(&self) -> &Array3<f64> {
        self.graph.value(self.taps.coords)
    }

    pub fn scores(&self) -> &Array3<f64> {
        self.graph.value(self.taps.scores)
    }

    /// Gradient with respect to the input image of
    /// `<d_deep, deep> + <d_coords, coords> + <d_scores, scores>`.
    pub fn input_gradient(
        self,
        d_deep: Option<Array3<f64>>,
        d_coords: Option<Array3<f64>>,
        d_scores: Option<Array3<f64>>,
    ) -> Array3<f64> {
        let shape = self.graph.value(self.input).dim();
        let seeds: Vec<_> = [(self.taps.deep, d_deep), (self.taps.coords, d_coords), (self.taps.scores, d_scores)]
            .into_iter()
            .filter_map(|(n, g)| g.map(|g| (n, g)))
            .collect();
        if seeds.is_empty() {
            return Array3::zeros(shape);
        }
        let mut grads = self.graph.backward(seeds, None);
        grads[0].take().unwrap_or_else(|| Array3::zeros(shape))
    }
}

/// A frozen detector: parameters, wiring and tap geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorBackend {
    pub config: DetectorConfig,
    pub seed: u64,
    params: ParamSet,
    spec: FeatureSpec,
    layout: Layout,
}

impl DetectorBackend {
    /// The bundled toy detector.
    pub fn toy() -> Result<Self> {
        Self::from_container(&Container::from_bytes(TOY_FIXTURE)?)
    }

    /// A randomly initialized backend of the given configuration.
    pub fn init(config: &DetectorConfig, seed: u64) -> Result<Self> {
        if !(config.width_multiplier > 0.0 && config.width_multiplier.is_finite()) {
            return Err(Error::config("detector.width_multiplier", "must be a positive number"));
        }
        if !(0.0..=1.0).contains(&config.confidence_threshold) {
            return Err(Error::config("detector.confidence_threshold", "must lie in [0, 1]"));
        }
        let mut params = ParamSet::new();
        let mut init = Initializer::new(derive_seed(seed, "detector-init"));
        let width = |n: usize| ((n as f64 * config.width_multiplier).round() as usize).max(1);
        let mut trunk = Vec::new();
        let (spec, last) = match config.kind {
            BackendKind::Toy => {
                let plan: [(&str, usize, usize); 6] =
                    [("conv1", 16, 1), ("conv2", 32, 2), ("conv3", 32, 1), ("conv4", 64, 2), ("conv5", 64, 2), ("conv6", 64, 1)];
                let mut cin = 1;
                for (name, n, stride) in plan {
                    let n = width(n);
                    trunk.push(Stage::Conv(Layer::new(&mut params, &mut init, name, ConvGeom::square(3, stride, 1), cin, n)));
                    cin = n;
                }
                let n = width(64);
                trunk.push(Stage::Conv(Layer::new(&mut params, &mut init, "row", ConvGeom::rect(1, 5), cin, n)));
                let spec = FeatureSpec {
                    stride: 8,
                    min_size: 16,
                    deep_channels: DEEP_CHANNELS,
                    anchor_heights: (0..N_ANCHORS).map(|k| 6.0 * 1.2f64.powi(k as i32)).collect(),
                };
                (spec, n)
            }
            BackendKind::CtpnRef => {
                let vgg: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
                let mut cin = 3;
                for (block, convs) in vgg.iter().enumerate() {
                    if block > 0 {
                        trunk.push(Stage::Pool);
                    }
                    for (k, &n) in convs.iter().enumerate() {
                        let n = width(n);
                        let name = format!("conv{}_{}", block + 1, k + 1);
                        trunk.push(Stage::Conv(Layer::new(&mut params, &mut init, &name, ConvGeom::same(3), cin, n)));
                        cin = n;
                    }
                }
                let n = width(512);
                trunk.push(Stage::Conv(Layer::new(&mut params, &mut init, "rpn_conv", ConvGeom::same(3), cin, n)));
                let m = width(256);
                trunk.push(Stage::Conv(Layer::new(&mut params, &mut init, "column_conv", ConvGeom::rect(1, 7), n, m)));
                let spec = FeatureSpec {
                    stride: 16,
                    min_size: 32,
                    deep_channels: DEEP_CHANNELS,
                    anchor_heights: vec![11.0, 16.0, 23.0, 33.0, 48.0, 68.0, 97.0, 139.0, 198.0, 283.0],
                };
                (spec, m)
            }
        };
        let out = spec.out_channels();
        let fc = Layer::new(&mut params, &mut init, "fc", ConvGeom::same(1), last, DEEP_CHANNELS);
        let coords = Layer::new(&mut params, &mut init, "coords", ConvGeom::same(1), DEEP_CHANNELS, out);
        let scores = Layer::new(&mut params, &mut init, "scores", ConvGeom::same(1), DEEP_CHANNELS, out);
        let layout = Layout { trunk, fc, coords, scores };
        Ok(DetectorBackend { config: config.clone(), seed, params, spec, layout })
    }

    /// Loads weights from a container file (see [`DetectorBackend::param_names`]
    /// for the expected array names).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(CHECKPOINT_KIND, self.seed, serde_json::to_value(&self.config)?);
        for (name, a) in self.params.iter() {
            c.arrays.insert(name.to_string(), a.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::CorruptCheckpoint(format!("expected detector weights, found `{}`", c.kind)));
        }
        let config: DetectorConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("bad detector config: {e}")))?;
        let mut backend = Self::init(&config, c.seed)?;
        let mut loaded = ParamSet::new();
        for (name, a) in &c.arrays {
            loaded.insert(name.clone(), a.clone());
        }
        backend.params.copy_from(&loaded).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        Ok(backend)
    }

    pub fn kind(&self) -> BackendKind {
        self.config.kind
    }

    pub fn feature_spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn confidence_threshold(&self) -> f64 {
        self.config.confidence_threshold
    }

    pub fn set_confidence_threshold(&mut self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("confidence threshold {t} is outside [0, 1]")));
        }
        self.config.confidence_threshold = t;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n).collect()
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn param_hash(&self) -> String {
        self.params.digest()
    }

    /// Stable identifier: backend kind plus a prefix of the parameter hash.
    pub fn id(&self) -> String {
        format!("{}-{}", self.config.kind.as_str(), &self.param_hash()[..12])
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.spec.min_size;
        if height < m || width < m {
            return Err(Error::TooSmall(format!(
                "{} detector needs at least {m}x{m} pixels, got {height}x{width}",
                self.config.kind.as_str()
            )));
        }
        Ok(())
    }

    /// Records the forward pass into `g`, which must be built over
    /// [`DetectorBackend::params`]. Accepts 1- or 3-channel maps.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> TapNodes {
        let mut y = match self.config.kind {
            BackendKind::Toy => {
                let y = g.luma(x);
                g.standardize(y, TOY_STANDARDIZE_EPS)
            }
            BackendKind::CtpnRef => {
                let y = if g.value(x).dim().2 == 1 { g.repeat_channels(x, 3) } else { x };
                let shift = CTPN_PIXEL_MEANS.map(|m| -m);
                g.affine(y, 255.0, &shift)
            }
        };
        for stage in &self.layout.trunk {
            y = match stage {
                Stage::Conv(layer) => layer.relu(g, y),
                Stage::Pool => g.max_pool2(y),
            };
        }
        let deep = self.layout.fc.relu(g, y);
        let coords = g.conv(deep, self.layout.coords.w, self.layout.coords.b, self.layout.coords.geom);
        let logits = g.conv(deep, self.layout.scores.w, self.layout.scores.b, self.layout.scores.geom);
        let scores = g.sigmoid(logits);
        TapNodes { deep, coords, logits, scores }
    }

    /// Runs the detector with gradient bookkeeping, for task losses.
    pub fn trace(&self, img: &Array3<f64>) -> Result<DetectorPass<'_>> {
        let (h, w, c) = img.dim();
        self.check_size(h, w)?;
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("detector input must have 1 or 3 channels, got {c}")));
        }
        let mut graph = Graph::new(&self.params);
        let input = graph.input(img.clone());
        let taps = self.forward(&mut graph, input);
        Ok(DetectorPass { graph, input, taps })
    }

    /// Tap values only, no boxes.
    pub fn taps(&self, img: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>, Array3<f64>)> {
        let (h, w, c) = img.dim();
        self.check_size(h, w)?;
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("detector input must have 1 or 3 channels, got {c}")));
        }
        let mut g = Graph::inference(&self.params);
        let input = g.input(img.clone());
        let t = self.forward(&mut g, input);
        Ok((g.take_value(t.deep), g.take_value(t.coords), g.take_value(t.scores)))
    }

    pub fn detect(&self, img: &ImageTensor) -> Result<DetectionOutput> {
        let (deep, coords, scores) = self.taps(img.data())?;
        self.assemble(deep, coords, scores, img.height(), img.width(), false)
    }

    /// Same values as [`DetectorBackend::detect`], flagged as a training target.
    pub fn extract_targets(&self, hr: &ImageTensor) -> Result<DetectionOutput> {
        let mut out = self.detect(hr)?;
        out.is_target = true;
        Ok(out)
    }

    /// Builds a detection output from tap values computed elsewhere.
    pub fn assemble(
        &self,
        deep: Array3<f64>,
        coords: Array3<f64>,
        scores: Array3<f64>,
        height: usize,
        width: usize,
        is_target: bool,
    ) -> Result<DetectionOutput> {
        let (lines, confidences) = decode_boxes(&coords, &scores, self.config.confidence_threshold, &self.spec)?;
        // lines that mostly fall outside the frame are dropped
        let min_height = 0.5 * self.spec.anchor_heights.iter().copied().fold(f64::INFINITY, f64::min);
        let (boxes, confidences) = lines
            .into_iter()
            .zip(confidences)
            .filter_map(|(b, c)| b.clip(height, width).filter(|b| b.height() >= min_height).map(|b| (b, c)))
            .unzip();
        Ok(DetectionOutput { boxes, confidences, deep_features: deep, out_coords: coords, out_scores: scores, is_target })
    }
}

/// Constructs the backend a run asks for: the bundled toy detector, or
/// `ctpn-ref` weights from a file.
pub fn load_backend(kind: BackendKind, weights: Option<&Path>) -> Result<DetectorBackend> {
    let backend = match (kind, weights) {
        (_, Some(path)) => DetectorBackend::load(path)?,
        (BackendKind::Toy, None) => DetectorBackend::toy()?,
        (BackendKind::CtpnRef, None) => {
            return Err(Error::config("backend.weights", "ctpn-ref needs a weights file"));
        }
    };
    if backend.kind() != kind {
        return Err(Error::config(
            "backend.kind",
            format!("weights file holds a {} detector, config asks for {}", backend.kind().as_str(), kind.as_str()),
        ));
    }
    Ok(backend)
}
