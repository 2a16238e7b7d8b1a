//! 2-D convolution by im2col + GEMM, NCHW layout.

use crate::array::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(w.len(), 4, "conv2d weight must be [O, C, KH, KW]");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        assert!(
            x[2] + 2 * spec.padding >= w[2] && x[3] + 2 * spec.padding >= w[3],
            "conv2d kernel larger than padded input"
        );
        Geometry {
            c_in: x[1],
            h: x[2],
            w: x[3],
            kh: w[2],
            kw: w[3],
            ho: spec.output_size(x[2], w[2]),
            wo: spec.output_size(x[3], w[3]),
            stride: spec.stride,
            pad: spec.padding,
        }
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output position (oy, ox) and kernel tap (ky, kx).
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            cols[row + oy * self.wo + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => image[(c * self.h + y) * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                image[(c * self.h + y) * self.w + x] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, weight: &Tensor, spec: Conv2dSpec) -> Tensor {
    let g = Geometry::new(x.shape(), weight.shape(), spec);
    let (b, c_out) = (x.shape()[0], weight.shape()[0]);
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; b * c_out * p];
    for n in 0..b {
        g.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
        gemm(
            c_out,
            k,
            p,
            weight.data(),
            (k, 1),
            &cols,
            (p, 1),
            &mut out[n * c_out * p..(n + 1) * c_out * p],
            0.0,
        );
    }
    Tensor::new(&[b, c_out, g.ho, g.wo], out)
}

/// Gradients of `conv2d` with respect to its input and weight. Either may be
/// skipped when not needed.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
    want_input: bool,
    want_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = Geometry::new(x.shape(), weight.shape(), spec);
    let (b, c_out) = (x.shape()[0], weight.shape()[0]);
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut dx = want_input.then(|| vec![0.0; x.len()]);
    let mut dw = want_weight.then(|| vec![0.0; weight.len()]);
    for n in 0..b {
        let gy = &grad_out.data()[n * c_out * p..(n + 1) * c_out * p];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[n * in_len..(n + 1) * in_len], &mut cols);
            // dW[O, K] += dY[O, P] · cols[K, P]^T
            gemm(c_out, p, k, gy, (p, 1), &cols, (1, p), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[K, P] = W[O, K]^T · dY[O, P]
            gemm(k, c_out, p, weight.data(), (1, k), gy, (p, 1), &mut cols, 0.0);
            g.col2im(&cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d)),
        dw.map(|d| Tensor::new(weight.shape(), d)),
    )
}
