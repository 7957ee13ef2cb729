//! Direct 2-D convolution (stride 1, symmetric zero padding) on NCHW buffers.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    /// Output rows `y` for which input row `y + ki - pad` exists.
    fn rows(&self, ki: usize) -> std::ops::Range<usize> {
        span(ki, self.pad, self.height, self.out_height())
    }

    fn cols(&self, kj: usize) -> std::ops::Range<usize> {
        span(kj, self.pad, self.width, self.out_width())
    }
}

fn span(k: usize, pad: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k);
    let hi = (extent + pad).saturating_sub(k).min(out_extent);
    lo..hi.max(lo)
}

pub(crate) fn forward(d: &ConvDims, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (oh, ow) = (d.out_height(), d.out_width());
    let mut out = vec![0.0; d.batch * d.out_ch * oh * ow];
    for n in 0..d.batch {
        for o in 0..d.out_ch {
            let out_plane = &mut out[(n * d.out_ch + o) * oh * ow..][..oh * ow];
            for c in 0..d.in_ch {
                let in_plane = &input[(n * d.in_ch + c) * d.height * d.width..][..d.height * d.width];
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let w = weight[((o * d.in_ch + c) * d.kh + ki) * d.kw + kj];
                        let cols = d.cols(kj);
                        if cols.is_empty() {
                            continue;
                        }
                        let shift = cols.start + kj - d.pad;
                        for y in d.rows(ki) {
                            let iy = y + ki - d.pad;
                            let src = &in_plane[iy * d.width + shift..][..cols.len()];
                            let dst = &mut out_plane[y * ow + cols.start..][..cols.len()];
                            for (o, s) in dst.iter_mut().zip(src) {
                                *o += w * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to the input and the weight.
pub(crate) fn backward(
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (d.out_height(), d.out_width());
    let mut gin = if want_input {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };
    let mut gw = if want_weight {
        vec![0.0; weight.len()]
    } else {
        Vec::new()
    };
    for n in 0..d.batch {
        for o in 0..d.out_ch {
            let go_plane = &grad_out[(n * d.out_ch + o) * oh * ow..][..oh * ow];
            for c in 0..d.in_ch {
                let plane = (n * d.in_ch + c) * d.height * d.width;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let widx = ((o * d.in_ch + c) * d.kh + ki) * d.kw + kj;
                        let w = weight[widx];
                        let cols = d.cols(kj);
                        if cols.is_empty() {
                            continue;
                        }
                        let shift = cols.start + kj - d.pad;
                        let mut acc = 0.0;
                        for y in d.rows(ki) {
                            let iy = y + ki - d.pad;
                            let go = &go_plane[y * ow + cols.start..][..cols.len()];
                            let at = plane + iy * d.width + shift;
                            if want_weight {
                                let src = &input[at..][..cols.len()];
                                acc += go.iter().zip(src).map(|(g, s)| g * s).sum::<f64>();
                            }
                            if want_input {
                                let dst = &mut gin[at..][..cols.len()];
                                for (t, g) in dst.iter_mut().zip(go) {
                                    *t += w * g;
                                }
                            }
                        }
                        if want_weight {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: usize, w: usize, k: usize, pad: usize) -> ConvDims {
        ConvDims {
            batch: 1,
            in_ch: 1,
            out_ch: 1,
            height: h,
            width: w,
            kh: k,
            kw: k,
            pad,
        }
    }

    /// Straightforward index-by-index reference.
    fn reference(d: &ConvDims, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let (oh, ow) = (d.out_height(), d.out_width());
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let iy = y as isize + ki as isize - d.pad as isize;
                        let ix = x as isize + kj as isize - d.pad as isize;
                        if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                            continue;
                        }
                        s += weight[ki * d.kw + kj] * input[iy as usize * d.width + ix as usize];
                    }
                }
                out[y * ow + x] = s;
            }
        }
        out
    }

    #[test]
    fn matches_reference_with_padding() {
        for (h, w, k, pad) in [(5, 4, 3, 1), (6, 6, 3, 0), (4, 7, 1, 0), (3, 3, 5, 2)] {
            let d = dims(h, w, k, pad);
            let input: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let weight: Vec<f64> = (0..k * k).map(|i| (i as f64 * 0.91).cos()).collect();
            let got = forward(&d, &input, &weight);
            let want = reference(&d, &input, &weight);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let d = dims(4, 4, 3, 1);
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut weight = vec![0.0; 9];
        weight[4] = 1.0;
        assert_eq!(forward(&d, &input, &weight), input);
    }
}
