//! Layer kernels with hand-written backward passes.
//!
//! Activations inside the network are stored channel-major, `(C, B, H, W)`,
//! so a convolution is one GEMM against an im2col matrix whose columns run
//! over `(batch, y, x)` and whose output reshapes straight into the next
//! activation without a transpose.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2};

use crate::real::Real;

/// Index of a parameter tensor in the owning classifier's store.
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: ParamId,
        bias: ParamId,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    Residual {
        body: Vec<Layer>,
        shortcut: Option<Box<Layer>>,
    },
}

#[derive(Debug)]
pub enum Cache<T> {
    Conv {
        col: Array2<T>,
        in_dim: [usize; 4],
    },
    Relu {
        out: Array4<T>,
    },
    MaxPool {
        argmax: Vec<u32>,
        in_dim: [usize; 4],
    },
    GlobalAvgPool {
        in_dim: [usize; 4],
    },
    Dense {
        input: Array2<T>,
    },
    Residual {
        body: Vec<Cache<T>>,
        shortcut: Option<Box<Cache<T>>>,
        out: Array4<T>,
    },
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

/// Output columns `[lo, hi)` whose input index `ox * stride + k - padding`
/// falls inside `[0, size)`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // largest ox with ox*stride + k - padding <= size - 1
    let hi = if size + padding < k + 1 {
        0
    } else {
        ((size + padding - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    [c, b, h, w]: [usize; 4],
    kernel: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let n = b * ho * wo;
    let mut col = vec![T::zero(); c * kernel * kernel * n];
    for ci in 0..c {
        for ky in 0..kernel {
            let (ylo, yhi) = valid_range(ho, h, ky, stride, padding);
            for kx in 0..kernel {
                let (xlo, xhi) = valid_range(wo, w, kx, stride, padding);
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - padding;
                        let base = iy * w + xlo * stride + kx - padding;
                        let dst_row = &mut dst[(bi * ho + oy) * wo + xlo..(bi * ho + oy) * wo + xhi];
                        for (d, s) in dst_row.iter_mut().zip(src[base..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kernel * kernel, n), col).expect("im2col shape")
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &Array2<T>,
    [c, b, h, w]: [usize; 4],
    kernel: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Array4<T> {
    let n = b * ho * wo;
    let col = col.as_standard_layout();
    let col = col.as_slice().expect("contiguous col");
    let mut x = vec![T::zero(); c * b * h * w];
    for ci in 0..c {
        for ky in 0..kernel {
            let (ylo, yhi) = valid_range(ho, h, ky, stride, padding);
            for kx in 0..kernel {
                let (xlo, xhi) = valid_range(wo, w, kx, stride, padding);
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &col[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut x[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - padding;
                        let base = iy * w + xlo * stride + kx - padding;
                        let src_row = &src[(bi * ho + oy) * wo + xlo..(bi * ho + oy) * wo + xhi];
                        for (d, &g) in dst[base..].iter_mut().step_by(stride).zip(src_row) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((c, b, h, w), x).expect("col2im shape")
}

fn dims4<T>(x: &Array4<T>) -> [usize; 4] {
    let d = x.dim();
    [d.0, d.1, d.2, d.3]
}

fn weight_matrix<T: Real>(w: &ArrayD<T>) -> Array2<T> {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    w.view()
        .into_shape_with_order((rows, cols))
        .expect("weight matrix view")
        .to_owned()
}

fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

impl Layer {
    /// Runs the layer. When `cache` is `Some`, pushes what backward needs.
    pub fn forward<T: Real>(
        &self,
        x: Array4<T>,
        params: &[ArrayD<T>],
        cache: Option<&mut Vec<Cache<T>>>,
    ) -> Array4<T> {
        match self {
            Layer::Conv {
                weight,
                bias,
                kernel,
                stride,
                padding,
            } => {
                let in_dim = dims4(&x);
                let [_, b, h, w] = in_dim;
                let ho = conv_out(h, *kernel, *stride, *padding);
                let wo = conv_out(w, *kernel, *stride, *padding);
                let x = if x.is_standard_layout() {
                    x
                } else {
                    x.as_standard_layout().into_owned()
                };
                let col = im2col(
                    x.as_slice().expect("contiguous"),
                    in_dim,
                    *kernel,
                    *stride,
                    *padding,
                    ho,
                    wo,
                );
                let wm = weight_matrix(&params[*weight]);
                let mut out = wm.dot(&col);
                let bias = &params[*bias];
                for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
                let o = wm.nrows();
                if let Some(cache) = cache {
                    cache.push(Cache::Conv { col, in_dim });
                }
                out.into_shape_with_order((o, b, ho, wo))
                    .expect("conv output shape")
            }
            Layer::Relu => {
                let mut x = x;
                relu_inplace(&mut x);
                if let Some(cache) = cache {
                    cache.push(Cache::Relu { out: x.clone() });
                }
                x
            }
            Layer::MaxPool2 => {
                let in_dim = dims4(&x);
                let [c, b, h, w] = in_dim;
                let (ho, wo) = (h / 2, w / 2);
                let x = if x.is_standard_layout() {
                    x
                } else {
                    x.as_standard_layout().into_owned()
                };
                let xs = x.as_slice().expect("contiguous");
                let mut out = vec![T::zero(); c * b * ho * wo];
                let mut argmax = vec![0u32; out.len()];
                for plane in 0..c * b {
                    let src = &xs[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = (2 * oy) * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = (2 * oy + dy) * w + 2 * ox + dx;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            let o = plane * ho * wo + oy * wo + ox;
                            out[o] = src[best];
                            argmax[o] = best as u32;
                        }
                    }
                }
                if let Some(cache) = cache {
                    cache.push(Cache::MaxPool { argmax, in_dim });
                }
                Array4::from_shape_vec((c, b, ho, wo), out).expect("pool shape")
            }
            Layer::GlobalAvgPool => {
                let in_dim = dims4(&x);
                let [c, b, h, w] = in_dim;
                let scale = T::from_usize(h * w).expect("spatial size");
                let out = x
                    .into_shape_with_order((c, b, h * w))
                    .expect("gap view")
                    .sum_axis(Axis(2))
                    .mapv(|v| v / scale);
                if let Some(cache) = cache {
                    cache.push(Cache::GlobalAvgPool { in_dim });
                }
                out.into_shape_with_order((c, b, 1, 1)).expect("gap shape")
            }
            Layer::Dense { weight, bias } => {
                let [c, b, h, w] = dims4(&x);
                let input = x
                    .into_shape_with_order((c * h * w, b))
                    .expect("dense input view");
                let wm = params[*weight]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("dense weight");
                let mut out = wm.dot(&input);
                for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(params[*bias].iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
                let o = out.nrows();
                if let Some(cache) = cache {
                    cache.push(Cache::Dense { input });
                }
                out.into_shape_with_order((o, b, 1, 1)).expect("dense out")
            }
            Layer::Residual { body, shortcut } => match cache {
                Some(cache) => {
                    let mut body_cache = Vec::with_capacity(body.len());
                    let mut y = x.clone();
                    for layer in body {
                        y = layer.forward(y, params, Some(&mut body_cache));
                    }
                    let (skip, skip_cache) = match shortcut {
                        Some(sc) => {
                            let mut c = Vec::with_capacity(1);
                            let s = sc.forward(x, params, Some(&mut c));
                            (s, c.pop().map(Box::new))
                        }
                        None => (x, None),
                    };
                    let mut out = y + &skip;
                    relu_inplace(&mut out);
                    cache.push(Cache::Residual {
                        body: body_cache,
                        shortcut: skip_cache,
                        out: out.clone(),
                    });
                    out
                }
                None => {
                    let mut y = x.clone();
                    for layer in body {
                        y = layer.forward(y, params, None);
                    }
                    let skip = match shortcut {
                        Some(sc) => sc.forward(x, params, None),
                        None => x,
                    };
                    let mut out = y + &skip;
                    relu_inplace(&mut out);
                    out
                }
            },
        }
    }

    /// Back-propagates `grad` through the layer.
    ///
    /// Parameter gradients are accumulated into `grads` when given. The input
    /// gradient is only materialised when `need_input` is set.
    pub fn backward<T: Real>(
        &self,
        cache: Cache<T>,
        grad: Array4<T>,
        params: &[ArrayD<T>],
        grads: Option<&mut [ArrayD<T>]>,
        need_input: bool,
    ) -> Option<Array4<T>> {
        match (self, cache) {
            (
                Layer::Conv {
                    weight,
                    bias,
                    kernel,
                    stride,
                    padding,
                },
                Cache::Conv { col, in_dim },
            ) => {
                let (o, b, ho, wo) = grad.dim();
                let grad = if grad.is_standard_layout() {
                    grad
                } else {
                    grad.as_standard_layout().into_owned()
                };
                let gmat = grad
                    .into_shape_with_order((o, b * ho * wo))
                    .expect("conv grad view");
                if let Some(grads) = grads {
                    let dw = gmat.dot(&col.t());
                    let gw = &mut grads[*weight];
                    let dw = dw
                        .into_shape_with_order(gw.raw_dim())
                        .expect("conv dw shape");
                    *gw += &dw;
                    let db = gmat.sum_axis(Axis(1));
                    grads[*bias] += &db.into_dyn();
                }
                if !need_input {
                    return None;
                }
                let wm = weight_matrix(&params[*weight]);
                let dcol = wm.t().dot(&gmat);
                Some(col2im(&dcol, in_dim, *kernel, *stride, *padding, ho, wo))
            }
            (Layer::Relu, Cache::Relu { out }) => {
                if !need_input {
                    return None;
                }
                let mut g = grad;
                g.zip_mut_with(&out, |g, &o| {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                });
                Some(g)
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_dim }) => {
                if !need_input {
                    return None;
                }
                let [c, b, h, w] = in_dim;
                let (_, _, ho, wo) = grad.dim();
                let g = if grad.is_standard_layout() {
                    grad
                } else {
                    grad.as_standard_layout().into_owned()
                };
                let gs = g.as_slice().expect("contiguous");
                let mut dx = vec![T::zero(); c * b * h * w];
                for plane in 0..c * b {
                    for i in 0..ho * wo {
                        let o = plane * ho * wo + i;
                        let idx = plane * h * w + argmax[o] as usize;
                        dx[idx] += gs[o];
                    }
                }
                Some(Array4::from_shape_vec((c, b, h, w), dx).expect("pool grad"))
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { in_dim }) => {
                if !need_input {
                    return None;
                }
                let [c, b, h, w] = in_dim;
                let scale = T::from_usize(h * w).expect("spatial size");
                let g = grad
                    .into_shape_with_order((c, b, 1, 1))
                    .expect("gap grad view")
                    .mapv(|v| v / scale);
                Some(
                    g.broadcast((c, b, h, w))
                        .expect("gap broadcast")
                        .to_owned(),
                )
            }
            (Layer::Dense { weight, bias }, Cache::Dense { input }) => {
                let (o, b, _, _) = grad.dim();
                let gmat = grad.into_shape_with_order((o, b)).expect("dense grad");
                if let Some(grads) = grads {
                    let dw = gmat.dot(&input.t());
                    grads[*weight] += &dw.into_dyn();
                    grads[*bias] += &gmat.sum_axis(Axis(1)).into_dyn();
                }
                if !need_input {
                    return None;
                }
                let wm = params[*weight]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("dense weight");
                let dx = wm.t().dot(&gmat);
                let c = dx.nrows();
                Some(dx.into_shape_with_order((c, b, 1, 1)).expect("dense dx"))
            }
            (
                Layer::Residual { body, shortcut },
                Cache::Residual {
                    body: body_cache,
                    shortcut: skip_cache,
                    out,
                },
            ) => {
                let mut g = grad;
                g.zip_mut_with(&out, |g, &o| {
                    if o <= T::zero() {
                        *g = T::zero();
                    }
                });
                let mut grads = grads;
                let body_in = backward_sequence(
                    body,
                    body_cache,
                    g.clone(),
                    params,
                    grads.as_deref_mut(),
                    need_input,
                );
                let skip_in = match (shortcut, skip_cache) {
                    (Some(sc), Some(c)) => sc.backward(*c, g, params, grads, need_input),
                    _ => need_input.then_some(g),
                };
                match (body_in, skip_in) {
                    (Some(a), Some(b)) => Some(a + &b),
                    _ => None,
                }
            }
            (layer, _) => panic!("cache does not belong to layer {layer:?}"),
        }
    }
}

/// Runs a layer sequence forward, optionally recording caches.
pub fn forward_sequence<T: Real>(
    layers: &[Layer],
    x: Array4<T>,
    params: &[ArrayD<T>],
    mut cache: Option<&mut Vec<Cache<T>>>,
) -> Array4<T> {
    let mut x = x;
    for layer in layers {
        x = layer.forward(x, params, cache.as_deref_mut());
    }
    x
}

/// Back-propagates through a sequence whose caches were recorded by
/// [`forward_sequence`].
pub fn backward_sequence<T: Real>(
    layers: &[Layer],
    caches: Vec<Cache<T>>,
    grad: Array4<T>,
    params: &[ArrayD<T>],
    mut grads: Option<&mut [ArrayD<T>]>,
    need_input: bool,
) -> Option<Array4<T>> {
    assert_eq!(layers.len(), caches.len(), "cache/layer count mismatch");
    let mut g = grad;
    let last = layers.len();
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let want_input = need_input || i > 0;
        match layer.backward(cache, g, params, grads.as_deref_mut(), want_input) {
            Some(next) => g = next,
            None => {
                debug_assert!(i == 0 && !need_input, "layer {i}/{last} dropped its grad");
                return None;
            }
        }
    }
    Some(g)
}

/// Converts `(B, C, H, W)` to the internal `(C, B, H, W)` layout.
pub fn to_channel_major<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
}

/// Inverse of [`to_channel_major`].
pub fn to_batch_major<T: Real>(x: &Array4<T>) -> Array4<T> {
    to_channel_major(x)
}
