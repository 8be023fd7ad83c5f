use super::{join, Module, Param, ParamRefs, ParamRefsMut};
use crate::tensor::{gemm, Scalar, Tensor};
use rand::Rng;

/// Static shape of a 2-D convolution (square kernel, zero padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }

    /// Stride-1 convolution padded so that spatial dims are preserved.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::new(in_channels, out_channels, kernel)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let eff = self.effective_kernel();
        assert!(
            h + 2 * self.padding >= eff && w + 2 * self.padding >= eff,
            "input {h}x{w} smaller than effective kernel {eff}"
        );
        (
            (h + 2 * self.padding - eff) / self.stride + 1,
            (w + 2 * self.padding - eff) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Convolution computed as im2col followed by a GEMM per sample.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    geom: ConvGeometry,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = geom.patch_len();
        let weight = Param::new(
            vec![geom.out_channels, geom.in_channels, geom.kernel, geom.kernel],
            super::he_normal(geom.out_channels * fan_in, fan_in, rng),
        );
        let bias = Param::new(vec![geom.out_channels], vec![T::zero(); geom.out_channels]);
        Self {
            weight,
            bias,
            geom,
            input: None,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geom
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.geom.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.geom.output_dims(h, w);
        let cout = self.geom.out_channels;
        let k = self.geom.patch_len();
        let p = oh * ow;
        let mut y = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = if self.geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for b in 0..n {
            let out = y.sample_mut(b);
            for (o, row) in out.chunks_mut(p).enumerate() {
                row.fill(self.bias.value[o]);
            }
            let rhs = if self.geom.is_pointwise() {
                x.sample(b)
            } else {
                im2col(x.sample(b), (c, h, w), &self.geom, (oh, ow), &mut cols);
                &cols
            };
            gemm(false, false, cout, p, k, T::one(), &self.weight.value, rhs, T::one(), out);
        }
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("conv backward before forward");
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (dy.height(), dy.width());
        let cout = self.geom.out_channels;
        let k = self.geom.patch_len();
        let p = oh * ow;
        let pointwise = self.geom.is_pointwise();
        let mut dx = Tensor::zeros([n, c, h, w]);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        for b in 0..n {
            let g = dy.sample(b);
            for (o, row) in g.chunks(p).enumerate() {
                self.bias.grad[o] = self.bias.grad[o] + row.iter().copied().sum::<T>();
            }
            let xs = if pointwise {
                x.sample(b)
            } else {
                im2col(x.sample(b), (c, h, w), &self.geom, (oh, ow), &mut cols);
                &cols
            };
            gemm(false, true, cout, k, p, T::one(), g, xs, T::one(), &mut self.weight.grad);
            if pointwise {
                gemm(true, false, k, p, cout, T::one(), &self.weight.value, g, T::zero(), dx.sample_mut(b));
            } else {
                gemm(true, false, k, p, cout, T::one(), &self.weight.value, g, T::zero(), &mut dcols);
                col2im(&dcols, (c, h, w), &self.geom, (oh, ow), dx.sample_mut(b));
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a, T>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamRefsMut<'a, T>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Valid output range `[lo, hi)` along one axis for a kernel tap at input offset `off`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    // need 0 <= o*stride + off < in_len
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (((-off) + s - 1) / s).min(out_len as isize) };
    let hi = if (in_len as isize) <= off {
        0
    } else {
        ((in_len as isize - off + s - 1) / s).min(out_len as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let k = g.kernel;
    let p = oh * ow;
    let (s, d, pad) = (g.stride, g.dilation as isize, g.padding as isize);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let offy = ky as isize * d - pad;
            let (ylo, yhi) = valid_range(oh, h, s, offy);
            for kx in 0..k {
                let offx = kx as isize * d - pad;
                let (xlo, xhi) = valid_range(ow, w, s, offx);
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst.fill(T::zero());
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = (oy * s) as isize + offy;
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let start = (xlo as isize + offx) as usize;
                        out[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            out[ox] = src[((ox * s) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let k = g.kernel;
    let p = oh * ow;
    let (s, d, pad) = (g.stride, g.dilation as isize, g.padding as isize);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let offy = ky as isize * d - pad;
            let (ylo, yhi) = valid_range(oh, h, s, offy);
            for kx in 0..k {
                let offx = kx as isize * d - pad;
                let (xlo, xhi) = valid_range(ow, w, s, offx);
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + offy) as usize;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let g_row = &src[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        let ix = ((ox * s) as isize + offx) as usize;
                        dst[ix] = dst[ix] + g_row[ox];
                    }
                }
            }
        }
    }
}
