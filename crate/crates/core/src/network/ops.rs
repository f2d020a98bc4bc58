//! Single-sample 3D layer kernels with explicit backward passes.
//!
//! Activations are `[channels, D, H, W]` slices in row-major order. Convolutions
//! go through im2col and a single GEMM.

use super::real::Real;

/// A `[channels, D, H, W]` activation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T = f32> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Activation<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Activation {
            channels,
            dims,
            data: vec![T::zero(); channels * volume(dims)],
        }
    }

    pub fn voxels(&self) -> usize {
        volume(self.dims)
    }

    /// Channel-wise concatenation `[self; other]`.
    pub fn concat(&self, other: &Activation<T>) -> Activation<T> {
        debug_assert_eq!(self.dims, other.dims);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Activation {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        }
    }

    /// Splits a gradient of a concatenation back into its two parts.
    pub fn split(self, first_channels: usize) -> (Activation<T>, Activation<T>) {
        let at = first_channels * self.voxels();
        let mut data = self.data;
        let tail = data.split_off(at);
        (
            Activation {
                channels: first_channels,
                dims: self.dims,
                data,
            },
            Activation {
                channels: self.channels - first_channels,
                dims: self.dims,
                data: tail,
            },
        )
    }
}

pub fn volume(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Geometry of a cubic-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    pub const DOWN2: ConvGeometry = ConvGeometry {
        kernel: 2,
        stride: 2,
        pad: 0,
    };
    pub const POINT: ConvGeometry = ConvGeometry {
        kernel: 1,
        stride: 1,
        pad: 0,
    };

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|d| (d + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Input extent that maps onto `output` when used as a transposed conv.
    pub fn transposed_dims(&self, output: [usize; 3]) -> [usize; 3] {
        output.map(|d| (d - 1) * self.stride + self.kernel - 2 * self.pad)
    }
}

/// `col[(c * taps + tap), out_voxel]` from `input`.
fn im2col<T: Real>(input: &[T], channels: usize, dims: [usize; 3], geo: ConvGeometry, out_dims: [usize; 3]) -> Vec<T> {
    let k = geo.kernel;
    let out_vox = volume(out_dims);
    let mut col = vec![T::zero(); channels * geo.taps() * out_vox];
    let [id, ih, iw] = dims;
    let [od, oh, ow] = out_dims;
    let (s, p) = (geo.stride as isize, geo.pad as isize);
    for c in 0..channels {
        let plane = &input[c * volume(dims)..(c + 1) * volume(dims)];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * geo.taps() + (kd * k + kh) * k + kw) * out_vox;
                    let dst = &mut col[row..row + out_vox];
                    for z in 0..od {
                        let iz = z as isize * s + kd as isize - p;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y as isize * s + kh as isize - p;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let src_row = (iz as usize * ih + iy as usize) * iw;
                            let dst_row = (z * oh + y) * ow;
                            if s == 1 {
                                // contiguous run with clipping at the borders
                                let lo = (p - kw as isize).max(0) as usize;
                                let hi = ((iw as isize + p - kw as isize).min(ow as isize)).max(0) as usize;
                                if lo < hi {
                                    let off = (lo as isize + kw as isize - p) as usize;
                                    dst[dst_row + lo..dst_row + hi]
                                        .copy_from_slice(&plane[src_row + off..src_row + off + (hi - lo)]);
                                }
                            } else {
                                for x in 0..ow {
                                    let ix = x as isize * s + kw as isize - p;
                                    if ix >= 0 && ix < iw as isize {
                                        dst[dst_row + x] = plane[src_row + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into image layout.
fn col2im<T: Real>(col: &[T], channels: usize, dims: [usize; 3], geo: ConvGeometry, out_dims: [usize; 3]) -> Vec<T> {
    let k = geo.kernel;
    let out_vox = volume(out_dims);
    let mut image = vec![T::zero(); channels * volume(dims)];
    let [id, ih, iw] = dims;
    let [od, oh, ow] = out_dims;
    let (s, p) = (geo.stride as isize, geo.pad as isize);
    for c in 0..channels {
        let plane = &mut image[c * volume(dims)..(c + 1) * volume(dims)];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * geo.taps() + (kd * k + kh) * k + kw) * out_vox;
                    let src = &col[row..row + out_vox];
                    for z in 0..od {
                        let iz = z as isize * s + kd as isize - p;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y as isize * s + kh as isize - p;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst_row = (iz as usize * ih + iy as usize) * iw;
                            let src_row = (z * oh + y) * ow;
                            for x in 0..ow {
                                let ix = x as isize * s + kw as isize - p;
                                if ix >= 0 && ix < iw as isize {
                                    plane[dst_row + ix as usize] += src[src_row + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    image
}

/// Calls `f(out_offset, in_offset, len)` for every contiguous row segment
/// that tap `(kd, kh, kw)` of a same-padded `3^3` kernel connects.
fn for_each_tap_row(dims: [usize; 3], tap: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = dims;
    let span = |k: usize, n: usize| (usize::from(k == 0), if k == 2 { n - 1 } else { n });
    let (zlo, zhi) = span(tap[0], d);
    let (ylo, yhi) = span(tap[1], h);
    let (xlo, xhi) = span(tap[2], w);
    if xhi <= xlo {
        return;
    }
    for z in zlo..zhi {
        let iz = z + tap[0] - 1;
        for y in ylo..yhi {
            let iy = y + tap[1] - 1;
            f((z * h + y) * w + xlo, (iz * h + iy) * w + xlo + tap[2] - 1, xhi - xlo);
        }
    }
}

/// Shift-and-accumulate kernels beat im2col + GEMM for wide volumes with few
/// channels, where im2col is memory bound.
fn use_direct(geo: ConvGeometry, dims: [usize; 3], cin: usize, cout: usize) -> bool {
    geo == ConvGeometry::SAME3 && dims[2] >= 32 && cin * cout <= 64
}

fn taps3() -> impl Iterator<Item = (usize, [usize; 3])> {
    (0..27).map(|t| (t, [t / 9, (t / 3) % 3, t % 3]))
}

fn direct_forward<T: Real>(input: &Activation<T>, weight: &[T], out: &mut Activation<T>) {
    let v = input.voxels();
    let ci = input.channels;
    for o in 0..out.channels {
        let op = &mut out.data[o * v..(o + 1) * v];
        for c in 0..ci {
            let ip = &input.data[c * v..(c + 1) * v];
            for (t, tap) in taps3() {
                let wt = weight[(o * ci + c) * 27 + t];
                for_each_tap_row(input.dims, tap, |oo, io, n| {
                    for (a, &b) in op[oo..oo + n].iter_mut().zip(&ip[io..io + n]) {
                        *a += wt * b;
                    }
                });
            }
        }
    }
}

fn direct_backward<T: Real>(
    input: &Activation<T>,
    weight: &[T],
    grad_out: &Activation<T>,
    grad_weight: &mut [T],
    grad_input: Option<&mut Activation<T>>,
) {
    let v = input.voxels();
    let ci = input.channels;
    for o in 0..grad_out.channels {
        let gp = &grad_out.data[o * v..(o + 1) * v];
        for c in 0..ci {
            let ip = &input.data[c * v..(c + 1) * v];
            for (t, tap) in taps3() {
                let mut acc = T::zero();
                for_each_tap_row(input.dims, tap, |oo, io, n| {
                    acc += gp[oo..oo + n]
                        .iter()
                        .zip(&ip[io..io + n])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                });
                grad_weight[(o * ci + c) * 27 + t] += acc;
            }
        }
    }
    if let Some(gi) = grad_input {
        for c in 0..ci {
            let dp = &mut gi.data[c * v..(c + 1) * v];
            for o in 0..grad_out.channels {
                let gp = &grad_out.data[o * v..(o + 1) * v];
                for (t, tap) in taps3() {
                    let wt = weight[(o * ci + c) * 27 + t];
                    for_each_tap_row(input.dims, tap, |oo, io, n| {
                        for (a, &b) in dp[io..io + n].iter_mut().zip(&gp[oo..oo + n]) {
                            *a += wt * b;
                        }
                    });
                }
            }
        }
    }
}

/// Convolution forward. `weight` is `[out, in * taps]`.
pub fn conv_forward<T: Real>(
    input: &Activation<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    geo: ConvGeometry,
) -> Activation<T> {
    let out_dims = geo.output_dims(input.dims);
    let out_vox = volume(out_dims);
    let rows = input.channels * geo.taps();
    let mut out = Activation::zeros(out_channels, out_dims);
    if use_direct(geo, input.dims, input.channels, out_channels) {
        direct_forward(input, weight, &mut out);
    } else if geo == ConvGeometry::POINT {
        T::gemm(
            out_channels,
            rows,
            out_vox,
            weight,
            (rows as isize, 1),
            &input.data,
            (out_vox as isize, 1),
            T::zero(),
            &mut out.data,
        );
    } else {
        let col = im2col(&input.data, input.channels, input.dims, geo, out_dims);
        T::gemm(
            out_channels,
            rows,
            out_vox,
            weight,
            (rows as isize, 1),
            &col,
            (out_vox as isize, 1),
            T::zero(),
            &mut out.data,
        );
    }
    if let Some(bias) = bias {
        for (c, b) in bias.iter().enumerate() {
            out.data[c * out_vox..(c + 1) * out_vox]
                .iter_mut()
                .for_each(|v| *v += *b);
        }
    }
    out
}

/// Convolution backward. Accumulates into `grad_weight` / `grad_bias` and
/// returns the gradient w.r.t. the input when `need_input` is set.
pub fn conv_backward<T: Real>(
    input: &Activation<T>,
    weight: &[T],
    grad_out: &Activation<T>,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
    geo: ConvGeometry,
    need_input: bool,
) -> Option<Activation<T>> {
    let out_vox = grad_out.voxels();
    let rows = input.channels * geo.taps();
    let co = grad_out.channels;
    if use_direct(geo, input.dims, input.channels, co) {
        let mut gi = need_input.then(|| Activation::zeros(input.channels, input.dims));
        direct_backward(input, weight, grad_out, grad_weight, gi.as_mut());
        if let Some(gb) = grad_bias {
            for (c, g) in gb.iter_mut().enumerate() {
                *g += grad_out.data[c * out_vox..(c + 1) * out_vox].iter().copied().sum::<T>();
            }
        }
        return gi;
    }
    let owned_col;
    let col: &[T] = if geo == ConvGeometry::POINT {
        &input.data
    } else {
        owned_col = im2col(&input.data, input.channels, input.dims, geo, grad_out.dims);
        &owned_col
    };
    // dW[co, rows] += dY[co, V] * col^T[V, rows]
    T::gemm(
        co,
        out_vox,
        rows,
        &grad_out.data,
        (out_vox as isize, 1),
        col,
        (1, out_vox as isize),
        T::one(),
        grad_weight,
    );
    if let Some(gb) = grad_bias {
        for (c, g) in gb.iter_mut().enumerate() {
            *g += grad_out.data[c * out_vox..(c + 1) * out_vox].iter().copied().sum::<T>();
        }
    }
    if !need_input {
        return None;
    }
    // dcol[rows, V] = W^T[rows, co] * dY[co, V]
    let mut dcol = vec![T::zero(); rows * out_vox];
    T::gemm(
        rows,
        co,
        out_vox,
        weight,
        (1, rows as isize),
        &grad_out.data,
        (out_vox as isize, 1),
        T::zero(),
        &mut dcol,
    );
    let data = if geo == ConvGeometry::POINT {
        dcol
    } else {
        col2im(&dcol, input.channels, input.dims, geo, grad_out.dims)
    };
    Some(Activation {
        channels: input.channels,
        dims: input.dims,
        data,
    })
}

/// Transposed convolution forward. `weight` is `[out * taps, in]`.
pub fn conv_transpose_forward<T: Real>(
    input: &Activation<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    geo: ConvGeometry,
) -> Activation<T> {
    let in_vox = input.voxels();
    let rows = out_channels * geo.taps();
    let mut col = vec![T::zero(); rows * in_vox];
    T::gemm(
        rows,
        input.channels,
        in_vox,
        weight,
        (input.channels as isize, 1),
        &input.data,
        (in_vox as isize, 1),
        T::zero(),
        &mut col,
    );
    let out_dims = geo.transposed_dims(input.dims);
    let mut data = col2im(&col, out_channels, out_dims, geo, input.dims);
    let out_vox = volume(out_dims);
    for (c, b) in bias.iter().enumerate() {
        data[c * out_vox..(c + 1) * out_vox].iter_mut().for_each(|v| *v += *b);
    }
    Activation {
        channels: out_channels,
        dims: out_dims,
        data,
    }
}

pub fn conv_transpose_backward<T: Real>(
    input: &Activation<T>,
    weight: &[T],
    grad_out: &Activation<T>,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    geo: ConvGeometry,
) -> Activation<T> {
    let in_vox = input.voxels();
    let rows = grad_out.channels * geo.taps();
    let dcol = im2col(&grad_out.data, grad_out.channels, grad_out.dims, geo, input.dims);
    // dW[rows, in] += dcol[rows, V] * X^T[V, in]
    T::gemm(
        rows,
        in_vox,
        input.channels,
        &dcol,
        (in_vox as isize, 1),
        &input.data,
        (1, in_vox as isize),
        T::one(),
        grad_weight,
    );
    let out_vox = grad_out.voxels();
    for (c, g) in grad_bias.iter_mut().enumerate() {
        *g += grad_out.data[c * out_vox..(c + 1) * out_vox].iter().copied().sum::<T>();
    }
    // dX[in, V] = W^T[in, rows] * dcol[rows, V]
    let mut data = vec![T::zero(); input.channels * in_vox];
    T::gemm(
        input.channels,
        rows,
        in_vox,
        weight,
        (1, input.channels as isize),
        &dcol,
        (in_vox as isize, 1),
        T::zero(),
        &mut data,
    );
    Activation {
        channels: input.channels,
        dims: input.dims,
        data,
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved state of an instance normalization.
#[derive(Clone, Debug)]
pub struct NormCache<T = f32> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization over the spatial extent, with affine scale/shift.
pub fn instance_norm_forward<T: Real>(x: &Activation<T>, gamma: &[T], beta: &[T]) -> (Activation<T>, NormCache<T>) {
    let n = x.voxels();
    let mut out = Activation::zeros(x.channels, x.dims);
    let mut normalized = vec![T::zero(); x.data.len()];
    let mut inv_std = vec![T::zero(); x.channels];
    for c in 0..x.channels {
        let src = &x.data[c * n..(c + 1) * n];
        let mean = src.iter().map(|&v| v.widen()).sum::<f64>() / n as f64;
        let var = src.iter().map(|&v| (v.widen() - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = T::from_f64(inv);
        let xh = &mut normalized[c * n..(c + 1) * n];
        let dst = &mut out.data[c * n..(c + 1) * n];
        for ((h, d), &v) in xh.iter_mut().zip(dst.iter_mut()).zip(src) {
            *h = T::from_f64((v.widen() - mean) * inv);
            *d = gamma[c] * *h + beta[c];
        }
    }
    (out, NormCache { normalized, inv_std })
}

pub fn instance_norm_backward<T: Real>(
    grad_out: &Activation<T>,
    cache: &NormCache<T>,
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Activation<T> {
    let n = grad_out.voxels();
    let mut dx = Activation::zeros(grad_out.channels, grad_out.dims);
    for c in 0..grad_out.channels {
        let dy = &grad_out.data[c * n..(c + 1) * n];
        let xh = &cache.normalized[c * n..(c + 1) * n];
        let sum_dy: f64 = dy.iter().map(|&v| v.widen()).sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(&a, &b)| a.widen() * b.widen()).sum();
        grad_gamma[c] += T::from_f64(sum_dy_xh);
        grad_beta[c] += T::from_f64(sum_dy);
        let scale = gamma[c].widen() * cache.inv_std[c].widen() / n as f64;
        for ((d, &g), &h) in dx.data[c * n..(c + 1) * n].iter_mut().zip(dy).zip(xh) {
            *d = T::from_f64(scale * (n as f64 * g.widen() - sum_dy - h.widen() * sum_dy_xh));
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &mut Activation<T>, slope: T) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= slope
        }
    });
}

/// Back-propagates through a leaky rectifier given its *output*; the sign of
/// the output equals the sign of the input for positive slopes.
pub fn leaky_relu_backward<T: Real>(grad: &mut Activation<T>, output: &[T], slope: T) {
    grad.data.iter_mut().zip(output).for_each(|(g, &y)| {
        if y < T::zero() {
            *g *= slope
        }
    });
}
