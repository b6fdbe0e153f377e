//! Reverse-mode differentiation over `H x W x C` feature maps.
//!
//! A [`Graph`] records every op applied to its nodes; [`Graph::backward`]
//! walks the record in reverse and returns the gradient of every node,
//! optionally accumulating parameter gradients.

use ndarray::{Array2, Array3, ArrayView2, Axis, Ix2};

use super::params::{Gradients, ParamId, ParamSet};
use crate::resample::Resampler;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the vector returned by [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution geometry: kernel size, stride and zero padding per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    /// Square kernel, stride 1, size-preserving padding (odd kernels).
    pub fn same(kernel: usize) -> Self {
        Self::square(kernel, 1, kernel / 2)
    }

    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kh: kernel, kw: kernel, stride, ph: pad, pw: pad }
    }

    /// Size-preserving `kh x kw` kernel at stride 1.
    pub fn rect(kh: usize, kw: usize) -> Self {
        ConvGeom { kh, kw, stride: 1, ph: kh / 2, pw: kw / 2 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph).saturating_sub(self.kh) / self.stride + 1,
            (w + 2 * self.pw).saturating_sub(self.kw) / self.stride + 1,
        )
    }
}

enum Op {
    Input,
    Conv { x: NodeId, w: ParamId, b: ParamId, geom: ConvGeom, cols: Option<Array2<f64>> },
    ConvTranspose { x: NodeId, w: ParamId, b: ParamId, geom: ConvGeom },
    Relu { x: NodeId },
    Prelu { x: NodeId, alpha: ParamId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Offset { x: NodeId },
    Luma { x: NodeId },
    Affine { x: NodeId, scale: f64 },
    Repeat { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    PixelShuffle { x: NodeId, r: usize },
    Resample { x: NodeId, op: Resampler },
    Standardize { x: NodeId, inv_std: f64 },
}

struct Node {
    value: Array3<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    keep_buffers: bool,
}

impl<'p> Graph<'p> {
    /// A graph that keeps what backward needs.
    pub fn new(params: &'p ParamSet) -> Self {
        Graph { params, nodes: Vec::new(), keep_buffers: true }
    }

    /// A forward-only graph; [`Graph::backward`] must not be called on it.
    pub fn inference(params: &'p ParamSet) -> Self {
        Graph { params, nodes: Vec::new(), keep_buffers: false }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Array3<f64> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Array3<f64> {
        std::mem::take(&mut self.nodes[id.0].value)
    }

    fn push(&mut self, value: Array3<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array3<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Convolution with weights `[k, k, c_in, c_out]` and bias `[c_out]`.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: ParamId, geom: ConvGeom) -> NodeId {
        let weight = self.params.get(w);
        let (cin, cout) = (weight.shape()[2], weight.shape()[3]);
        debug_assert_eq!((weight.shape()[0], weight.shape()[1]), (geom.kh, geom.kw));
        let xv = self.value(x);
        let (h, wd, c) = xv.dim();
        assert_eq!(c, cin, "conv input has {c} channels, weight expects {cin}");
        let (ho, wo) = geom.output_hw(h, wd);
        let cols = im2col(xv, geom, ho, wo);
        let wmat = weight_matrix(weight, geom.kh * geom.kw * cin, cout);
        let mut y = cols.dot(&wmat);
        y += &self.params.get(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias is 1-d");
        let y = y.into_shape_with_order((ho, wo, cout)).expect("contiguous");
        let cols = self.keep_buffers.then_some(cols);
        self.push(y, Op::Conv { x, w, b, geom, cols })
    }

    /// Transposed convolution, the adjoint of a conv with geometry `geom`
    /// mapping an `out_hw` map onto the input's frame. Weights are
    /// `[k, k, c_out, c_in]`, bias `[c_out]`.
    pub fn conv_transpose(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> NodeId {
        let weight = self.params.get(w);
        let (cout, cin) = (weight.shape()[2], weight.shape()[3]);
        let xv = self.value(x);
        let (h, wd, c) = xv.dim();
        assert_eq!(c, cin, "transposed conv input has {c} channels, weight expects {cin}");
        assert_eq!(geom.output_hw(out_hw.0, out_hw.1), (h, wd));
        let xm = xv.view().into_shape_with_order((h * wd, cin)).expect("contiguous");
        let wmat = weight_matrix(weight, geom.kh * geom.kw * cout, cin);
        let cols = xm.dot(&wmat.t());
        let mut y = col2im(&cols.view(), geom, out_hw.0, out_hw.1, cout, h, wd);
        let bias = self.params.get(b);
        for mut px in y.lanes_mut(Axis(2)) {
            for (v, bb) in px.iter_mut().zip(bias.iter()) {
                *v += bb;
            }
        }
        self.push(y, Op::ConvTranspose { x, w, b, geom })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    /// Per-channel parametric ReLU.
    pub fn prelu(&mut self, x: NodeId, alpha: ParamId) -> NodeId {
        let a = self.params.get(alpha);
        let mut y = self.value(x).clone();
        for mut px in y.lanes_mut(Axis(2)) {
            for (v, &ac) in px.iter_mut().zip(a.iter()) {
                if *v < 0.0 {
                    *v *= ac;
                }
            }
        }
        self.push(y, Op::Prelu { x, alpha })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.value(x).mapv(|v| v + c);
        self.push(y, Op::Offset { x })
    }

    /// BT.601 luminance of a 3-channel map; 1-channel maps pass through.
    pub fn luma(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        if xv.dim().2 == 1 {
            return x;
        }
        let w = crate::types::LUMA_WEIGHTS;
        let y = xv.map_axis(Axis(2), |p| p[0] * w[0] + p[1] * w[1] + p[2] * w[2]).insert_axis(Axis(2));
        self.push(y, Op::Luma { x })
    }

    /// `scale * x + shift[c]` per channel.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: &[f64]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.dim().2, shift.len(), "one shift per channel");
        let y = Array3::from_shape_fn(xv.dim(), |(i, j, c)| scale * xv[[i, j, c]] + shift[c]);
        self.push(y, Op::Affine { x, scale })
    }

    /// Broadcasts a 1-channel map to `channels` identical channels.
    pub fn repeat_channels(&mut self, x: NodeId, channels: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.dim().2, 1, "repeat_channels expects a 1-channel map");
        let (h, w, _) = xv.dim();
        let y = Array3::from_shape_fn((h, w, channels), |(i, j, _)| xv[[i, j, 0]]);
        self.push(y, Op::Repeat { x })
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (h, w, c) = xv.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array3::zeros((ho, wo, c));
        let mut argmax = vec![0usize; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (ii, jj) = (2 * i + di, 2 * j + dj);
                        let v = xv[[ii, jj, ch]];
                        if v > best.0 {
                            best = (v, (ii * w + jj) * c + ch);
                        }
                    }
                    y[[i, j, ch]] = best.0;
                    argmax[(i * wo + j) * c + ch] = best.1;
                }
            }
        }
        self.push(y, Op::MaxPool { x, argmax })
    }

    /// Rearranges `(H, W, C r^2)` into `(H r, W r, C)`.
    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> NodeId {
        let xv = self.value(x);
        let (h, w, cr) = xv.dim();
        assert_eq!(cr % (r * r), 0, "pixel shuffle needs channels divisible by {}", r * r);
        let c = cr / (r * r);
        let y = Array3::from_shape_fn((h * r, w * r, c), |(i, j, ch)| {
            xv[[i / r, j / r, ch * r * r + (i % r) * r + j % r]]
        });
        self.push(y, Op::PixelShuffle { x, r })
    }

    pub fn resample(&mut self, x: NodeId, out_hw: (usize, usize)) -> NodeId {
        let (h, w, _) = self.value(x).dim();
        let op = Resampler::new((h, w), out_hw);
        let y = op.apply(self.value(x));
        self.push(y, Op::Resample { x, op })
    }

    /// Normalizes the whole map to zero mean and unit variance.
    /// `eps` floors the variance, so near-constant maps are not blown up.
    pub fn standardize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let mean = xv.sum() / n;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let y = xv.mapv(|v| (v - mean) * inv_std);
        self.push(y, Op::Standardize { x, inv_std })
    }

    /// Backpropagates the seeded output gradients. The returned vector holds
    /// the gradient of every input node (`None` where nothing flowed);
    /// intermediate entries are consumed. Parameter gradients are accumulated
    /// into `param_grads` when given.
    pub fn backward(
        &self,
        seeds: Vec<(NodeId, Array3<f64>)>,
        mut param_grads: Option<&mut Gradients>,
    ) -> Vec<Option<Array3<f64>>> {
        assert!(self.keep_buffers, "backward on an inference graph");
        let mut grads: Vec<Option<Array3<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads[id.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv { x, w, b, geom, cols } => {
                    let cols = cols.as_ref().expect("kept buffers");
                    let weight = self.params.get(*w);
                    let (cin, cout) = (weight.shape()[2], weight.shape()[3]);
                    let (ho, wo, _) = g.dim();
                    let gm = g.view().into_shape_with_order((ho * wo, cout)).expect("contiguous");
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let dw = cols.t().dot(&gm);
                        let dw = dw.into_shape_with_order(weight.raw_dim()).expect("weight shape");
                        *pg.get_mut(*w) += &dw;
                        *pg.get_mut(*b) += &gm.sum_axis(Axis(0)).into_dyn();
                    }
                    let wmat = weight_matrix(weight, geom.kh * geom.kw * cin, cout);
                    let dcols = gm.dot(&wmat.t());
                    let (h, wd, _) = self.value(*x).dim();
                    let dx = col2im(&dcols.view(), *geom, h, wd, cin, ho, wo);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let weight = self.params.get(*w);
                    let (cout, cin) = (weight.shape()[2], weight.shape()[3]);
                    let xv = self.value(*x);
                    let (h, wd, _) = xv.dim();
                    let dcols = im2col(&g, *geom, h, wd);
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let xm = xv.view().into_shape_with_order((h * wd, cin)).expect("contiguous");
                        let dw = dcols.t().dot(&xm);
                        let dw = dw.into_shape_with_order(weight.raw_dim()).expect("weight shape");
                        *pg.get_mut(*w) += &dw;
                        let db = g.sum_axis(Axis(0)).sum_axis(Axis(0));
                        *pg.get_mut(*b) += &db.into_dyn();
                    }
                    let wmat = weight_matrix(weight, geom.kh * geom.kw * cout, cin);
                    let dx = dcols.dot(&wmat).into_shape_with_order((h, wd, cin)).expect("contiguous");
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx).and(&node.value).for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Prelu { x, alpha } => {
                    let xv = self.value(*x);
                    let a = self.params.get(*alpha);
                    let c = a.len();
                    let mut da = vec![0.0; c];
                    let mut dx = g;
                    for (mut gp, xp) in dx.lanes_mut(Axis(2)).into_iter().zip(xv.lanes(Axis(2))) {
                        for ch in 0..c {
                            if xp[ch] < 0.0 {
                                da[ch] += gp[ch] * xp[ch];
                                gp[ch] *= a[ch];
                            }
                        }
                    }
                    if let Some(pg) = param_grads.as_deref_mut() {
                        for (d, v) in pg.get_mut(*alpha).iter_mut().zip(da) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Offset { x } => accumulate(&mut grads[x.0], g),
                Op::Luma { x } => {
                    let w = crate::types::LUMA_WEIGHTS;
                    let (h, wd, _) = g.dim();
                    let dx = Array3::from_shape_fn((h, wd, 3), |(i, j, c)| g[[i, j, 0]] * w[c]);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Affine { x, scale } => accumulate(&mut grads[x.0], g * *scale),
                Op::Repeat { x } => accumulate(&mut grads[x.0], g.sum_axis(Axis(2)).insert_axis(Axis(2))),
                Op::MaxPool { x, argmax } => {
                    let (h, w, c) = self.value(*x).dim();
                    let mut dx = vec![0.0; h * w * c];
                    for (gv, &src) in g.iter().zip(argmax) {
                        dx[src] += gv;
                    }
                    accumulate(&mut grads[x.0], Array3::from_shape_vec((h, w, c), dx).expect("sized"));
                }
                Op::PixelShuffle { x, r } => {
                    let r = *r;
                    let (h, w, cr) = self.value(*x).dim();
                    let dx = Array3::from_shape_fn((h, w, cr), |(i, j, k)| {
                        let ch = k / (r * r);
                        let rem = k % (r * r);
                        g[[i * r + rem / r, j * r + rem % r, ch]]
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Resample { x, op } => {
                    accumulate(&mut grads[x.0], op.apply_transpose(&g));
                }
                Op::Standardize { x, inv_std } => {
                    let y = &node.value;
                    let n = y.len() as f64;
                    let mean_g = g.sum() / n;
                    let mean_gy = (&g * y).sum() / n;
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx)
                        .and(y)
                        .for_each(|d, &yv| *d = inv_std * (*d - mean_g - yv * mean_gy));
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        grads
    }
}

fn accumulate(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None if g.is_standard_layout() => *slot = Some(g),
        None => *slot = Some(g.as_standard_layout().into_owned()),
    }
}

fn weight_matrix(w: &ndarray::ArrayD<f64>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    w.view()
        .into_shape_with_order((rows, cols))
        .expect("weights are contiguous")
        .into_dimensionality::<Ix2>()
        .expect("2-d")
}

/// Unfolds `x` into `(ho * wo, kh * kw * c)` patch rows, zero padded.
pub(crate) fn im2col(x: &Array3<f64>, geom: ConvGeom, ho: usize, wo: usize) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let (kh, kw) = (geom.kh, geom.kw);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let row_len = kh * kw * c;
    let mut cols = vec![0.0; ho * wo * row_len];
    for oi in 0..ho {
        for oj in 0..wo {
            let row = &mut cols[(oi * wo + oj) * row_len..][..row_len];
            for ki in 0..kh {
                let ii = (oi * geom.stride + ki) as isize - geom.ph as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let jj = (oj * geom.stride + kj) as isize - geom.pw as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * c;
                    row[(ki * kw + kj) * c..][..c].copy_from_slice(&xs[src..src + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((ho * wo, row_len), cols).expect("sized above")
}

/// Adjoint of [`im2col`]: scatters patch rows back onto an `h x w x c` map.
pub(crate) fn col2im(
    cols: &ArrayView2<'_, f64>,
    geom: ConvGeom,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let (kh, kw) = (geom.kh, geom.kw);
    let row_len = kh * kw * c;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; h * w * c];
    for oi in 0..ho {
        for oj in 0..wo {
            let row = &cs[(oi * wo + oj) * row_len..][..row_len];
            for ki in 0..kh {
                let ii = (oi * geom.stride + ki) as isize - geom.ph as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let jj = (oj * geom.stride + kj) as isize - geom.pw as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let dst = (ii as usize * w + jj as usize) * c;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[(ki * kw + kj) * c..][..c]) {
                        *o += v;
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((h, w, c), out).expect("sized above")
}
