//! Shared domain types: images, boxes, scale factors and loss component ids.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// An `H x W x C` image with real-valued intensities.
///
/// Values loaded from disk or passed through [`ImageTensor::clamp`] lie in
/// `[0, 1]`. Raw network outputs may leave that range; they are only clamped
/// at the evaluation and save boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an array, rejecting empty shapes, unsupported channel counts and
    /// non-finite values.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("image must be at least 1x1, got {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("non-finite pixel".into()));
        }
        Ok(ImageTensor { data })
    }

    #[cfg(test)]
    pub(crate) fn from_raw(data: Array3<f64>) -> Self {
        ImageTensor { data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Saturates every value into `[0, 1]`.
    pub fn clamp(&self) -> ImageTensor {
        ImageTensor { data: self.data.mapv(|v| v.clamp(0.0, 1.0)) }
    }

    /// Converts to a single luminance channel; grayscale input is returned as is.
    pub fn to_grayscale(&self) -> ImageTensor {
        if self.channels() == 1 {
            return self.clone();
        }
        let luma = self.data.map_axis(Axis(2), |px| {
            px[0] * LUMA_WEIGHTS[0] + px[1] * LUMA_WEIGHTS[1] + px[2] * LUMA_WEIGHTS[2]
        });
        ImageTensor { data: luma.insert_axis(Axis(2)) }
    }

    /// Crops a `height x width` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageTensor> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{} image",
                self.height(),
                self.width()
            )));
        }
        let view = self.data.slice(ndarray::s![top..top + height, left..left + width, ..]);
        Ok(ImageTensor { data: view.to_owned() })
    }

    /// Center-crops so that both sides are multiples of `factor`.
    pub fn center_crop_to_multiple(&self, factor: usize) -> Result<ImageTensor> {
        let h = self.height() - self.height() % factor;
        let w = self.width() - self.width() % factor;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is smaller than scale factor {factor}",
                self.height(),
                self.width()
            )));
        }
        self.crop((self.height() - h) / 2, (self.width() - w) / 2, h, w)
    }
}

/// Errors on non-finite input, otherwise saturates into `[0, 1]`.
pub fn clamp_image(data: &Array3<f64>) -> Result<ImageTensor> {
    ImageTensor::new(data.clone()).map(|img| img.clamp())
}

/// Converts an image with 1 or 3 channels to BT.601 luminance.
pub fn to_grayscale(data: &Array3<f64>) -> Result<ImageTensor> {
    ImageTensor::new(data.clone()).map(|img| img.to_grayscale())
}

/// Axis-aligned box in pixel coordinates, corner representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) || ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clips to a `height x width` frame; `None` when nothing is left.
    pub fn clip(&self, height: usize, width: usize) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.clamp(0.0, width as f64),
            y0: self.y0.clamp(0.0, height as f64),
            x1: self.x1.clamp(0.0, width as f64),
            y1: self.y1.clamp(0.0, height as f64),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x0: self.x0 + dx, y0: self.y0 + dy, x1: self.x1 + dx, y1: self.y1 + dy }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Integer magnification ratio, at least 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ScaleFactor(usize);

impl ScaleFactor {
    pub fn new(s: usize) -> Result<Self> {
        if s < 2 {
            return Err(Error::InvalidArgument(format!("scale factor must be >= 2, got {s}")));
        }
        Ok(ScaleFactor(s))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for ScaleFactor {
    fn default() -> Self {
        ScaleFactor(4)
    }
}

impl TryFrom<usize> for ScaleFactor {
    type Error = Error;

    fn try_from(s: usize) -> Result<Self> {
        ScaleFactor::new(s)
    }
}

impl From<ScaleFactor> for usize {
    fn from(s: ScaleFactor) -> usize {
        s.0
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// The four training loss components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossComponentId {
    #[serde(rename = "L2_HR")]
    L2Hr,
    #[serde(rename = "L2_LR")]
    L2Lr,
    #[serde(rename = "TASK_DEEP")]
    TaskDeep,
    #[serde(rename = "TASK_OUT")]
    TaskOut,
}

impl LossComponentId {
    pub const ALL: [LossComponentId; 4] =
        [LossComponentId::L2Hr, LossComponentId::L2Lr, LossComponentId::TaskDeep, LossComponentId::TaskOut];

    pub fn as_str(self) -> &'static str {
        match self {
            LossComponentId::L2Hr => "L2_HR",
            LossComponentId::L2Lr => "L2_LR",
            LossComponentId::TaskDeep => "TASK_DEEP",
            LossComponentId::TaskOut => "TASK_OUT",
        }
    }

    pub fn is_task(self) -> bool {
        matches!(self, LossComponentId::TaskDeep | LossComponentId::TaskOut)
    }
}

impl fmt::Display for LossComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossComponentId::ALL
            .into_iter()
            .find(|id| id.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss component '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamp_leaves_in_range_image_alone() {
        let img = ImageTensor::filled(4, 5, 3, 0.5).unwrap();
        assert_eq!(img.clamp(), img);
    }

    #[test]
    fn clamp_saturates() {
        let mut data = Array3::zeros((1, 2, 1));
        data[[0, 0, 0]] = 1.3;
        data[[0, 1, 0]] = -0.2;
        let out = clamp_image(&data).unwrap();
        assert_eq!(out.data()[[0, 0, 0]], 1.0);
        assert_eq!(out.data()[[0, 1, 0]], 0.0);
    }

    #[test]
    fn clamp_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Array3::from_shape_fn((9, 7, 3), |_| rng.random_range(-2.0..2.0));
        let out = clamp_image(&data).unwrap();
        for i in 0..9 {
            for j in 0..7 {
                for c in 0..3 {
                    let x = data[[i, j, c]];
                    let expected = if x < 0.0 { 0.0 } else if x > 1.0 { 1.0 } else { x };
                    assert_eq!(out.data()[[i, j, c]], expected);
                }
            }
        }
        assert_eq!(out.clamp(), out);
    }

    #[test]
    fn clamp_rejects_non_finite() {
        let mut data = Array3::zeros((2, 2, 1));
        data[[1, 1, 0]] = f64::NAN;
        let err = clamp_image(&data).unwrap_err();
        assert!(err.to_string().contains("non-finite pixel"));
    }

    #[test]
    fn grayscale_weights() {
        let gray = ImageTensor::filled(2, 2, 1, 0.25).unwrap();
        assert_eq!(gray.to_grayscale(), gray);

        let white = ImageTensor::filled(1, 1, 3, 1.0).unwrap().to_grayscale();
        assert!((white.data()[[0, 0, 0]] - 1.0).abs() < 1e-12);

        let mut red = Array3::zeros((1, 1, 3));
        red[[0, 0, 0]] = 1.0;
        let out = to_grayscale(&red).unwrap();
        assert_eq!(out.dim(), (1, 1, 1));
        assert!((out.data()[[0, 0, 0]] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn grayscale_rejects_two_channels() {
        assert!(to_grayscale(&Array3::zeros((2, 2, 2))).is_err());
    }

    #[test]
    fn center_crop_is_symmetric() {
        let img = ImageTensor::filled(10, 13, 1, 0.0).unwrap();
        let c = img.center_crop_to_multiple(4).unwrap();
        assert_eq!(c.dim(), (8, 12, 1));
    }

    #[test]
    fn bbox_iou_and_clip() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(b.clip(20, 12).unwrap().x1, 12.0);
        assert!(BBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(a.translate(100.0, 0.0).clip(20, 20).is_none());
    }

    #[test]
    fn scale_factor_bounds_and_names() {
        assert!(ScaleFactor::new(1).is_err());
        assert_eq!(ScaleFactor::default().get(), 4);
        for id in LossComponentId::ALL {
            assert_eq!(id.as_str().parse::<LossComponentId>().unwrap(), id);
        }
        assert!("CTPN".parse::<LossComponentId>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn grayscale_preserves_frame_and_range(h in 1usize..8, w in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>())).unwrap();
            let g = img.to_grayscale();
            proptest::prop_assert_eq!(g.dim(), (h, w, 1));
            proptest::prop_assert!(g.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }
}
