use super::gemm::{gemm, View};
use super::Tensor;

/// 2-D convolution with square kernels, zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels x in_channels x kernel x kernel`, row-major.
    pub weight: Vec<f64>,
    /// Empty when the layer has no bias.
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: if bias { vec![0.0; out_channels] } else { Vec::new() },
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds input patches into a `patch_len x (oh * ow)` matrix.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = oh * ow;
        let mut out = vec![0.0; self.patch_len() * cols];
        for c in 0..self.in_channels {
            let plane = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im(&self, cols: &[f64], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor {
        let (c_in, h, w) = in_shape;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let n = oh * ow;
        let mut out = Tensor::zeros(c_in, h, w);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                out.data[c * h * w + iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let (m, kk, n) = (self.out_channels, self.patch_len(), oh * ow);
        let mut out = vec![0.0; m * n];
        if !self.bias.is_empty() {
            for (o, chunk) in out.chunks_mut(n).enumerate() {
                chunk.fill(self.bias[o]);
            }
        }
        gemm(m, kk, n, View::rows(&self.weight, kk), View::rows(&cols, n), 1.0, &mut out);
        Tensor::from_vec(m, oh, ow, out)
    }

    pub fn backward_input(&self, in_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let (m, kk, n) = (self.out_channels, self.patch_len(), oh * ow);
        let mut dcols = vec![0.0; kk * n];
        gemm(
            kk,
            m,
            n,
            View::transposed(&self.weight, kk),
            View::rows(&grad_out.data, n),
            0.0,
            &mut dcols,
        );
        self.col2im(&dcols, in_shape, oh, ow)
    }
}

/// Per-channel `x * scale + shift` (batch norm in inference form).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelAffine {
    /// Freshly initialized batch norm: unit gamma, zero beta, running mean 0, var 1.
    pub fn batch_norm_init(channels: usize) -> Self {
        ChannelAffine {
            scale: vec![1.0 / (1.0f64 + 1e-5).sqrt(); channels],
            shift: vec![0.0; channels],
        }
    }

    fn apply(&self, x: &Tensor, with_shift: bool) -> Tensor {
        let mut out = x.clone();
        let plane = x.plane();
        for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
            let (s, b) = (self.scale[c], if with_shift { self.shift[c] } else { 0.0 });
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    fn forward(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let oh = (x.height + 2 * self.padding - k) / s + 1;
        let ow = (x.width + 2 * self.padding - k) / s + 1;
        let mut out = Tensor::zeros(x.channels, oh, ow);
        let mut arg = vec![0usize; x.channels * oh * ow];
        for c in 0..x.channels {
            let plane = x.channel(c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let i = iy as usize * x.width + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = c * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    arg[o] = c * x.plane() + best_i;
                }
            }
        }
        (out, arg)
    }
}

/// Residual unit: `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Affine(ChannelAffine),
    Relu,
    MaxPool(MaxPool),
    Residual(Box<Residual>),
}

/// Per-layer state kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub enum Trace {
    Conv { in_shape: (usize, usize, usize) },
    Affine,
    Relu { active: Vec<bool> },
    MaxPool { in_shape: (usize, usize, usize), argmax: Vec<usize> },
    Residual { main: Vec<Trace>, shortcut: Vec<Trace>, active: Vec<bool> },
}

fn relu_in_place(t: &mut Tensor) -> Vec<bool> {
    t.data
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

fn mask(grad: &Tensor, active: &[bool]) -> Tensor {
    let mut g = grad.clone();
    g.data
        .iter_mut()
        .zip(active)
        .for_each(|(v, &on)| if !on { *v = 0.0 });
    g
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: &Tensor) -> (Tensor, Trace) {
        match self {
            Layer::Conv(c) => (c.forward(x), Trace::Conv { in_shape: x.shape() }),
            Layer::Affine(a) => (a.apply(x, true), Trace::Affine),
            Layer::Relu => {
                let mut out = x.clone();
                let active = relu_in_place(&mut out);
                (out, Trace::Relu { active })
            }
            Layer::MaxPool(m) => {
                let (out, argmax) = m.forward(x);
                (out, Trace::MaxPool { in_shape: x.shape(), argmax })
            }
            Layer::Residual(r) => {
                let (mut out, main) = forward_seq_traced(&r.main, x);
                let (short, shortcut) = forward_seq_traced(&r.shortcut, x);
                out.data.iter_mut().zip(&short.data).for_each(|(a, b)| *a += b);
                let active = relu_in_place(&mut out);
                (out, Trace::Residual { main, shortcut, active })
            }
        }
    }

    pub fn backward(&self, trace: &Trace, grad: &Tensor) -> Tensor {
        match (self, trace) {
            (Layer::Conv(c), Trace::Conv { in_shape }) => c.backward_input(*in_shape, grad),
            (Layer::Affine(a), Trace::Affine) => a.apply(grad, false),
            (Layer::Relu, Trace::Relu { active }) => mask(grad, active),
            (Layer::MaxPool(_), Trace::MaxPool { in_shape, argmax }) => {
                let (c, h, w) = *in_shape;
                let mut out = Tensor::zeros(c, h, w);
                for (g, &i) in grad.data.iter().zip(argmax) {
                    out.data[i] += g;
                }
                out
            }
            (Layer::Residual(r), Trace::Residual { main, shortcut, active }) => {
                let g = mask(grad, active);
                let mut gm = backward_seq(&r.main, main, &g);
                let gs = backward_seq(&r.shortcut, shortcut, &g);
                gm.data.iter_mut().zip(&gs.data).for_each(|(a, b)| *a += b);
                gm
            }
            _ => panic!("trace does not match layer"),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        match self {
            Layer::Conv(c) => {
                f(&c.weight);
                f(&c.bias);
            }
            Layer::Affine(a) => {
                f(&a.scale);
                f(&a.shift);
            }
            Layer::Relu | Layer::MaxPool(_) => {}
            Layer::Residual(r) => r.main.iter().chain(&r.shortcut).for_each(|l| l.visit_params(f)),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::Affine(a) => {
                f(&mut a.scale);
                f(&mut a.shift);
            }
            Layer::Relu | Layer::MaxPool(_) => {}
            Layer::Residual(r) => r
                .main
                .iter_mut()
                .chain(r.shortcut.iter_mut())
                .for_each(|l| l.visit_params_mut(f)),
        }
    }
}

pub(crate) fn forward_seq(layers: &[Layer], x: &Tensor) -> Tensor {
    let mut cur = x.clone();
    for l in layers {
        cur = match l {
            Layer::Relu => {
                relu_in_place(&mut cur);
                cur
            }
            _ => l.forward(&cur),
        };
    }
    cur
}

pub(crate) fn forward_seq_traced(layers: &[Layer], x: &Tensor) -> (Tensor, Vec<Trace>) {
    let mut cur = x.clone();
    let mut traces = Vec::with_capacity(layers.len());
    for l in layers {
        let (next, t) = l.forward_traced(&cur);
        cur = next;
        traces.push(t);
    }
    (cur, traces)
}

pub(crate) fn backward_seq(layers: &[Layer], traces: &[Trace], grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for (l, t) in layers.iter().zip(traces).rev() {
        g = l.backward(t, &g);
    }
    g
}
