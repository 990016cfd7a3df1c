//! Forward and backward kernels for the recorded primitives.
//!
//! These work on raw slices; shape checking happens in [`crate::tape`].

/// Padding mode for convolution and pooling windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so that a stride-1 window preserves the extent.
    ZeroSame,
    /// No padding; the window must fit inside the input.
    Valid,
}

/// Resolved geometry of a 2D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Returns `None` when a valid window does not fit the input.
    pub fn new(
        in_h: usize,
        in_w: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Window> {
        if stride == 0 || k_h == 0 || k_w == 0 {
            return None;
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return None;
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::ZeroSame => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let total_h = ((out_h - 1) * stride + k_h).saturating_sub(in_h);
                let total_w = ((out_w - 1) * stride + k_w).saturating_sub(in_w);
                (out_h, out_w, total_h / 2, total_w / 2)
            }
        };
        Some(Window {
            in_h,
            in_w,
            k_h,
            k_w,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate for output row `oy` and kernel row `ky`, if inside.
    #[inline]
    fn row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&y| y < self.in_h)
    }

    #[inline]
    fn col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&x| x < self.in_w)
    }
}

pub(crate) fn conv2d_forward(
    win: &Window,
    input: &[f64],
    c_in: usize,
    kernel: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; win.out_h * win.out_w * c_out];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = (oy * win.out_w + ox) * c_out;
            let out_px = &mut out[o..o + c_out];
            for ky in 0..win.k_h {
                let Some(iy) = win.row(oy, ky) else { continue };
                for kx in 0..win.k_w {
                    let Some(ix) = win.col(ox, kx) else { continue };
                    let i = (iy * win.in_w + ix) * c_in;
                    let in_px = &input[i..i + c_in];
                    let k_base = (ky * win.k_w + kx) * c_in * c_out;
                    for (ci, &v) in in_px.iter().enumerate() {
                        let k_row = &kernel[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                        for (acc, &k) in out_px.iter_mut().zip(k_row) {
                            *acc += v * k;
                        }
                    }
                }
            }
            for (acc, &b) in out_px.iter_mut().zip(bias) {
                *acc += b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    win: &Window,
    input: &[f64],
    c_in: usize,
    kernel: &[f64],
    c_out: usize,
    grad_out: &[f64],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let mut g_in = want_input.then(|| vec![0.0; input.len()]);
    let mut g_k = want_params.then(|| vec![0.0; kernel.len()]);
    let mut g_b = want_params.then(|| vec![0.0; c_out]);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = (oy * win.out_w + ox) * c_out;
            let g = &grad_out[o..o + c_out];
            if let Some(g_b) = g_b.as_mut() {
                for (acc, &v) in g_b.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            for ky in 0..win.k_h {
                let Some(iy) = win.row(oy, ky) else { continue };
                for kx in 0..win.k_w {
                    let Some(ix) = win.col(ox, kx) else { continue };
                    let i = (iy * win.in_w + ix) * c_in;
                    let k_base = (ky * win.k_w + kx) * c_in * c_out;
                    for ci in 0..c_in {
                        let row = k_base + ci * c_out..k_base + (ci + 1) * c_out;
                        if let Some(g_in) = g_in.as_mut() {
                            let k_row = &kernel[row.clone()];
                            let dot: f64 = k_row.iter().zip(g).map(|(k, v)| k * v).sum();
                            g_in[i + ci] += dot;
                        }
                        if let Some(g_k) = g_k.as_mut() {
                            let v = input[i + ci];
                            if v != 0.0 {
                                for (acc, &gv) in g_k[row].iter_mut().zip(g) {
                                    *acc += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: g_in,
        kernel: g_k,
        bias: g_b,
    }
}

/// Sentinel for a pooling window whose maximum is a padding cell.
pub(crate) const PAD_ARGMAX: u32 = u32::MAX;

/// 2D max pooling. Padding cells hold zero. Ties go to the first element in
/// row-major scan order of the window.
pub(crate) fn maxpool_forward(win: &Window, input: &[f64], c: usize) -> (Vec<f64>, Vec<u32>) {
    let n = win.out_h * win.out_w * c;
    let mut out = vec![0.0; n];
    let mut arg = vec![PAD_ARGMAX; n];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PAD_ARGMAX;
                for ky in 0..win.k_h {
                    for kx in 0..win.k_w {
                        let (v, idx) = match (win.row(oy, ky), win.col(ox, kx)) {
                            (Some(iy), Some(ix)) => {
                                let idx = (iy * win.in_w + ix) * c + ch;
                                (input[idx], idx as u32)
                            }
                            _ => (0.0, PAD_ARGMAX),
                        };
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * win.out_w + ox) * c + ch;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_rows(input: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (row, dst) in input.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward(output: &[f64], grad_out: &[f64], width: usize) -> Vec<f64> {
    let mut g = vec![0.0; output.len()];
    for ((y, go), gi) in output
        .chunks_exact(width)
        .zip(grad_out.chunks_exact(width))
        .zip(g.chunks_exact_mut(width))
    {
        let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in gi.iter_mut().zip(y).zip(go) {
            *d = yv * (gv - dot);
        }
    }
    g
}

/// Soft Dice loss on the lesion probabilities `p` against a binary mask `g`:
/// `1 - (2 Σ p g + eps) / (Σ p² + Σ g² + eps)`.
pub fn dice_loss_value(p: impl Iterator<Item = f64> + Clone, g: &[f64], eps: f64) -> f64 {
    let (num, den) = dice_terms(p, g, eps);
    1.0 - num / den
}

pub(crate) fn dice_terms(p: impl Iterator<Item = f64>, g: &[f64], eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut p2 = 0.0;
    let mut g2 = 0.0;
    for (pv, &gv) in p.zip(g) {
        inter += pv * gv;
        p2 += pv * pv;
        g2 += gv * gv;
    }
    (2.0 * inter + eps, p2 + g2 + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_preserves_extent_at_stride_one() {
        for k in 1..6 {
            let w = Window::new(7, 5, k, k, 1, Padding::ZeroSame).unwrap();
            assert_eq!((w.out_h, w.out_w), (7, 5));
        }
        let w = Window::new(8, 8, 2, 2, 1, Padding::ZeroSame).unwrap();
        assert_eq!((w.pad_top, w.pad_left), (0, 0));
    }

    #[test]
    fn strided_same_window_halves() {
        let w = Window::new(32, 32, 3, 3, 2, Padding::ZeroSame).unwrap();
        assert_eq!((w.out_h, w.out_w), (16, 16));
        let w = Window::new(7, 7, 1, 1, 2, Padding::ZeroSame).unwrap();
        assert_eq!((w.out_h, w.out_w, w.pad_top), (4, 4, 0));
    }

    #[test]
    fn valid_window_rejects_oversized_kernel() {
        assert!(Window::new(2, 2, 3, 3, 1, Padding::Valid).is_none());
        let w = Window::new(5, 5, 3, 3, 1, Padding::Valid).unwrap();
        assert_eq!((w.out_h, w.out_w), (3, 3));
    }

    #[test]
    fn maxpool_tie_goes_to_first_in_scan_order() {
        let w = Window::new(2, 2, 2, 2, 1, Padding::Valid).unwrap();
        let (out, arg) = maxpool_forward(&w, &[5.0, 5.0, 5.0, 5.0], 1);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }
}
