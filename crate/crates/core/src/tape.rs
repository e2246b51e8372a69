//! A small reverse-mode autodiff tape over dense `f64` tensors.
//!
//! Feature maps are single images in CHW layout. The tape records every
//! operation in creation order, so a backward sweep from any scalar node
//! visits parents after children without a topological sort.
//!
//! Loss functions are not expressed through primitive ops. They are pure
//! functions that return a value plus its gradient with respect to their
//! inputs, and enter the tape through [`Graph::scalar_fn`]. This keeps each
//! loss individually finite-difference checkable.

use crate::geometry::BBox;
use crate::params::{ParamId, ParamStore};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Reverse {
        x: Var,
        mu: f64,
    },
    RoiAlign {
        feat: Var,
        plans: Vec<RoiPlan>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    ScalarFn(Vec<(Var, Vec<f64>)>),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Bilinear sampling plan of one ROI: per output bin, the (flat spatial
/// index, weight) pairs. Shared by every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiPlan {
    pub bins: Vec<Vec<(usize, f64)>>,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if it did not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.tensor(id).clone(), Op::Param(id))
    }

    /// Copies the value of `v` onto a fresh constant node (no gradient flows back).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// 2-d convolution of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        assert_eq!(xs.len(), 3, "conv2d input must be CHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3]);
        let (channels, height, width) = (xs[0], xs[1], xs[2]);
        let (out_channels, kernel) = (ws[0], ws[2]);
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel);
        let geom = ConvGeometry {
            channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        };
        let cols = im2col(&self.value(x).data, &geom);
        let spatial = geom.out_h * geom.out_w;
        let kdim = channels * kernel * kernel;
        let mut out = vec![0.0; out_channels * spatial];
        let bias = &self.value(b).data;
        for o in 0..out_channels {
            out[o * spatial..(o + 1) * spatial].fill(bias[o]);
        }
        gemm(
            out_channels,
            kdim,
            spatial,
            &self.value(w).data,
            (kdim as isize, 1),
            &cols,
            (spatial as isize, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::new(vec![out_channels, geom.out_h, geom.out_w], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// `x [N, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear: input width mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let bias = &self.value(b).data;
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(
            n,
            din,
            dout,
            &self.value(x).data,
            (din as isize, 1),
            &self.value(w).data,
            (1, din as isize),
            &mut out,
            1.0,
        );
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::Sigmoid(x))
    }

    /// Softmax over the last dimension of a 2-d tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape.len(), 2);
        let cols = t.shape[1];
        let mut data = t.data.clone();
        for row in data.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(shape, data), Op::SoftmaxRows(x))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-mu` backward.
    pub fn reverse_gradient(&mut self, x: Var, mu: f64) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Reverse { x, mu })
    }

    /// Pools `[C, H, W]` features with precomputed ROI plans into
    /// `[R, C * bins]`.
    pub fn roi_align(&mut self, feat: Var, plans: Vec<RoiPlan>) -> Var {
        let t = self.value(feat);
        assert_eq!(t.shape.len(), 3);
        let (c, hw) = (t.shape[0], t.shape[1] * t.shape[2]);
        let nbins = plans.first().map_or(0, |p| p.bins.len());
        let mut out = vec![0.0; plans.len() * c * nbins];
        for (r, plan) in plans.iter().enumerate() {
            assert_eq!(
                plan.bins.len(),
                nbins,
                "all ROI plans must share a bin count"
            );
            for ch in 0..c {
                let src = &t.data[ch * hw..(ch + 1) * hw];
                let dst = &mut out[(r * c + ch) * nbins..(r * c + ch + 1) * nbins];
                for (bin, taps) in plan.bins.iter().enumerate() {
                    dst[bin] = taps.iter().map(|&(i, w)| w * src[i]).sum();
                }
            }
        }
        let value = Tensor::new(vec![plans.len(), c * nbins], out);
        self.push(value, Op::RoiAlign { feat, plans })
    }

    /// Flat gather of selected entries into a 1-d tensor.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Var {
        let src = &self.value(x).data;
        let data: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let n = data.len();
        self.push(Tensor::new(vec![n], data), Op::Gather { x, index })
    }

    /// Scalar node with a precomputed value and local gradients with respect to
    /// each input (each gradient has the input's length).
    pub fn scalar_fn(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(
                self.value(*v).len(),
                g.len(),
                "scalar_fn gradient length mismatch"
            );
        }
        self.push(Tensor::scalar(value), Op::ScalarFn(inputs))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let value = terms
            .iter()
            .map(|&(v, w)| {
                let t = self.value(v);
                assert_eq!(t.len(), 1, "weighted_sum expects scalars");
                w * t.data[0]
            })
            .sum();
        self.push(Tensor::scalar(value), Op::WeightedSum(terms))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var, num_params: usize) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params: Vec<Option<Vec<f64>>> = vec![None; num_params];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut params[id.0], &g),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let spatial = geom.out_h * geom.out_w;
                    let kdim = geom.channels * geom.kernel * geom.kernel;
                    let gb: Vec<f64> = g.chunks(spatial).map(|c| c.iter().sum()).collect();
                    add_into(&mut grads, *b, &gb);
                    let mut gw = vec![0.0; geom.out_channels * kdim];
                    gemm(
                        geom.out_channels,
                        spatial,
                        kdim,
                        &g,
                        (spatial as isize, 1),
                        cols,
                        (1, spatial as isize),
                        &mut gw,
                        0.0,
                    );
                    add_into(&mut grads, *w, &gw);
                    if self.needs_grad(*x) {
                        let mut gcols = vec![0.0; kdim * spatial];
                        gemm(
                            kdim,
                            geom.out_channels,
                            spatial,
                            &self.value(*w).data,
                            (1, kdim as isize),
                            &g,
                            (spatial as isize, 1),
                            &mut gcols,
                            0.0,
                        );
                        let gx = col2im(&gcols, geom);
                        add_into(&mut grads, *x, &gx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let (n, din) = (xv.shape[0], xv.shape[1]);
                    let dout = self.value(*w).shape[0];
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    add_into(&mut grads, *b, &gb);
                    let mut gw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        &g,
                        (1, dout as isize),
                        &xv.data,
                        (din as isize, 1),
                        &mut gw,
                        0.0,
                    );
                    add_into(&mut grads, *w, &gw);
                    if self.needs_grad(*x) {
                        let mut gx = vec![0.0; n * din];
                        gemm(
                            n,
                            dout,
                            din,
                            &g,
                            (dout as isize, 1),
                            &self.value(*w).data,
                            (din as isize, 1),
                            &mut gx,
                            0.0,
                        );
                        add_into(&mut grads, *x, &gx);
                    }
                }
                Op::Relu(x) => {
                    let out = &node.value.data;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .map(|(&gi, &o)| if o > 0.0 { gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let out = &node.value.data;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .map(|(&gi, &s)| gi * s * (1.0 - s))
                        .collect();
                    add_into(&mut grads, *x, &gx);
                }
                Op::SoftmaxRows(x) => {
                    let cols = node.value.shape[1].max(1);
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, sr), out) in g
                        .chunks(cols)
                        .zip(node.value.data.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &si) in out.iter_mut().zip(gr).zip(sr) {
                            *o = si * (gi - dot);
                        }
                    }
                    add_into(&mut grads, *x, &gx);
                }
                Op::Reverse { x, mu } => {
                    let gx: Vec<f64> = g.iter().map(|v| -mu * v).collect();
                    add_into(&mut grads, *x, &gx);
                }
                Op::RoiAlign { feat, plans } => {
                    let ft = self.value(*feat);
                    let (c, hw) = (ft.shape[0], ft.shape[1] * ft.shape[2]);
                    let nbins = plans.first().map_or(0, |p| p.bins.len());
                    let mut gf = vec![0.0; ft.len()];
                    for (r, plan) in plans.iter().enumerate() {
                        for ch in 0..c {
                            let dst = &mut gf[ch * hw..(ch + 1) * hw];
                            let src = &g[(r * c + ch) * nbins..(r * c + ch + 1) * nbins];
                            for (taps, &gv) in plan.bins.iter().zip(src) {
                                for &(i, w) in taps {
                                    dst[i] += w * gv;
                                }
                            }
                        }
                    }
                    add_into(&mut grads, *feat, &gf);
                }
                Op::Gather { x, index } => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (&i, &gi) in index.iter().zip(&g) {
                        gx[i] += gi;
                    }
                    add_into(&mut grads, *x, &gx);
                }
                Op::ScalarFn(inputs) => {
                    for (v, local) in inputs {
                        let gx: Vec<f64> = local.iter().map(|l| l * g[0]).collect();
                        add_into(&mut grads, *v, &gx);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        add_into(&mut grads, v, &[w * g[0]]);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    accumulate(&mut grads[v.0], g);
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `c = a · b + beta · c` with explicit (row, column) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major or transposed views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let spatial = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.channels * g.kernel * g.kernel * spatial];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let spatial = g.out_h * g.out_w;
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Bilinear ROI-align sampling plan on a `height x width` map.
///
/// `spatial_scale` maps pixel coordinates to feature coordinates; sample
/// points use the half-pixel-aligned convention (feature cell `i` is centered
/// at `i + 0.5` in scaled coordinates). Each bin averages
/// `sampling x sampling` regularly spaced points.
pub fn roi_align_plan(
    roi: &BBox,
    height: usize,
    width: usize,
    spatial_scale: f64,
    out_size: usize,
    sampling: usize,
) -> RoiPlan {
    let x0 = roi.x_min * spatial_scale - 0.5;
    let y0 = roi.y_min * spatial_scale - 0.5;
    let bin_w = roi.width() * spatial_scale / out_size as f64;
    let bin_h = roi.height() * spatial_scale / out_size as f64;
    let count = (sampling * sampling) as f64;
    let mut bins = Vec::with_capacity(out_size * out_size);
    for py in 0..out_size {
        for px in 0..out_size {
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for sy in 0..sampling {
                let y = y0 + bin_h * (py as f64 + (sy as f64 + 0.5) / sampling as f64);
                for sx in 0..sampling {
                    let x = x0 + bin_w * (px as f64 + (sx as f64 + 0.5) / sampling as f64);
                    for (i, w) in bilinear_taps(y, x, height, width) {
                        match taps.iter_mut().find(|(j, _)| *j == i) {
                            Some(t) => t.1 += w / count,
                            None => taps.push((i, w / count)),
                        }
                    }
                }
            }
            bins.push(taps);
        }
    }
    RoiPlan { bins }
}

/// Up to four (flat index, weight) taps for bilinear sampling at `(y, x)`.
/// Points more than one cell outside the map contribute nothing; points
/// within that margin are clamped to the border.
pub fn bilinear_taps(y: f64, x: f64, height: usize, width: usize) -> Vec<(usize, f64)> {
    if y < -1.0 || y > height as f64 || x < -1.0 || x > width as f64 {
        return Vec::new();
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (y_lo, y_hi, ly) = bracket(y, height);
    let (x_lo, x_hi, lx) = bracket(x, width);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let mut taps = Vec::with_capacity(4);
    for (yy, wy) in [(y_lo, hy), (y_hi, ly)] {
        for (xx, wx) in [(x_lo, hx), (x_hi, lx)] {
            let w = wy * wx;
            if w != 0.0 {
                let i = yy * width + xx;
                match taps.iter_mut().find(|(j, _): &&mut (usize, f64)| *j == i) {
                    Some(t) => t.1 += w,
                    None => taps.push((i, w)),
                }
            }
        }
    }
    taps
}

fn bracket(v: f64, size: usize) -> (usize, usize, f64) {
    let lo = v.floor() as usize;
    if lo >= size - 1 {
        (size - 1, size - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(w ⊙ out))/d(input) for a single op.
    fn check_op(shapes: &[Vec<usize>], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s.clone()))
            .collect();
        let run = |inputs: &[Tensor]| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let mut store = ParamStore::default();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let id = store.add(format!("in{i}"), ParamGroup::Backbone, t.clone());
                    g.param(&store, id)
                })
                .collect();
            let out = build(&mut g, &vars);
            let n = g.value(out).len();
            let weights: Vec<f64> = (0..n)
                .map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4)
                .collect();
            let value = g
                .value(out)
                .data
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum();
            let root = g.scalar_fn(value, vec![(out, weights)]);
            (g, vars, root)
        };
        let (g, vars, root) = run(&inputs);
        let grads = g.backward(root, inputs.len());
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .expect("input influences output")
                .to_vec();
            for i in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data[i] += h;
                let mut minus = inputs.clone();
                minus[k].data[i] -= h;
                let (gp, _, rp) = run(&plus);
                let (gm, _, rm) = run(&minus);
                let numeric = (gp.value(rp).data[0] - gm.value(rm).data[0]) / (2.0 * h);
                assert!(
                    (numeric - analytic[i]).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k}[{i}]: numeric {numeric} vs analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        check_op(&[vec![2, 5, 6], vec![3, 2, 3, 3], vec![3]], |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        });
        check_op(&[vec![3, 4, 4], vec![2, 3, 1, 1], vec![2]], |g, v| {
            g.conv2d(v[0], v[1], v[2], 1, 0)
        });
    }

    #[test]
    fn linear_softmax_gradients() {
        check_op(&[vec![3, 4], vec![5, 4], vec![5]], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            g.softmax_rows(y)
        });
    }

    #[test]
    fn sigmoid_relu_gradients() {
        check_op(&[vec![2, 3, 3]], |g, v| {
            let y = g.sigmoid(v[0]);
            g.relu(y)
        });
    }

    #[test]
    fn roi_align_gradients() {
        let rois = [
            BBox::new(1.0, 2.0, 20.0, 17.0),
            BBox::new(0.0, 0.0, 32.0, 32.0),
        ];
        check_op(&[vec![2, 4, 4]], move |g, v| {
            let plans = rois
                .iter()
                .map(|r| roi_align_plan(r, 4, 4, 0.125, 2, 2))
                .collect();
            g.roi_align(v[0], plans)
        });
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, vec![2, 5, 5]);
        let w = random_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = random_tensor(&mut rng, vec![3]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, wv, bv, 2, 1);
        let out = g.value(y);
        assert_eq!(out.shape, vec![3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += w.data[((o * 2 + c) * 3 + ky) * 3 + kx]
                                        * x.data[(c * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data[(o * 3 + oy) * 3 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gather_and_weighted_sum() {
        let mut g = Graph::new();
        let mut store = ParamStore::default();
        let id = store.add(
            "x",
            ParamGroup::Rpn,
            Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]),
        );
        let x = g.param(&store, id);
        let picked = g.gather(x, vec![3, 1, 3]);
        assert_eq!(g.value(picked).data, vec![4.0, 2.0, 4.0]);
        let s = g.scalar_fn(10.0, vec![(picked, vec![1.0, 1.0, 1.0])]);
        let total = g.weighted_sum(vec![(s, -2.0)]);
        assert_eq!(g.value(total).data[0], -20.0);
        let grads = g.backward(total, 1);
        assert_eq!(grads.param(id).unwrap(), &[0.0, -2.0, 0.0, -4.0]);
    }
}
