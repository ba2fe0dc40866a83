//! Raw numeric kernels over row-major slices.
//!
//! All three convolution kernels are partial derivatives of the same
//! trilinear form `S(x, w, y) = sum x[n,i,h,w] * k[o,i,kh,kw] * y[n,o,oh,ow]`
//! taken with respect to one argument, which is what makes their adjoints
//! close over the set.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, String> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(format!("expected NCHW input and OIHW kernel, got {input:?} and {kernel:?}"));
        }
        if stride == 0 {
            return Err("stride must be positive".into());
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(format!("input has {c_in} channels, kernel expects {kc}"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_in, self.h, self.w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    /// Input coordinate hit by output coordinate `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Visit every (input, kernel, output) flat index triple with nonzero overlap.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for n in 0..g.n {
            for o in 0..g.c_out {
                for i in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let k_idx = ((o * g.c_in + i) * g.kh + ky) * g.kw + kx;
                            for oy in 0..g.oh {
                                let Some(y) = g.src(oy, ky, g.h) else { continue };
                                let x_row = ((n * g.c_in + i) * g.h + y) * g.w;
                                let y_row = ((n * g.c_out + o) * g.oh + oy) * g.ow;
                                for ox in 0..g.ow {
                                    let Some(x) = g.src(ox, kx, g.w) else { continue };
                                    f(x_row + x, k_idx, y_row + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
    g.for_each(|xi, ki, yi| out[yi] += x[xi] * k[ki]);
    out
}

pub(crate) fn conv2d_input_grad(g: &ConvGeom, gy: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_in * g.h * g.w];
    g.for_each(|xi, ki, yi| out[xi] += gy[yi] * k[ki]);
    out
}

pub(crate) fn conv2d_kernel_grad(g: &ConvGeom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    g.for_each(|xi, ki, yi| out[ki] += x[xi] * gy[yi]);
    out
}

/// `[m,k] x [k,n]`, accumulating in i-k-j order.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Apply a `[rows, cols]` matrix along axis `axis` of a tensor whose extent
/// on that axis is `cols`.
pub(crate) fn axis_map(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    mat: &[f64],
    rows: usize,
) -> (Vec<usize>, Vec<f64>) {
    let cols = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = rows;
    let mut out = vec![0.0; outer * rows * inner];
    for o in 0..outer {
        let src = &x[o * cols * inner..(o + 1) * cols * inner];
        let dst = &mut out[o * rows * inner..(o + 1) * rows * inner];
        for r in 0..rows {
            let d = &mut dst[r * inner..(r + 1) * inner];
            for c in 0..cols {
                let m = mat[r * cols + c];
                if m == 0.0 {
                    continue;
                }
                let s = &src[c * inner..(c + 1) * inner];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += m * sv;
                }
            }
        }
    }
    (out_shape, out)
}
