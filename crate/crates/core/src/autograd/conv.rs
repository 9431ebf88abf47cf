use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};

use super::{Tensor, Var};

/// Output shape of a stride-1, same-padded 3D convolution.
pub fn conv3d_output_shape(input: &[usize], weight: &[usize]) -> Vec<usize> {
    vec![input[0], weight[0], input[2], input[3], input[4]]
}

/// Unfolds one `[C, T, H, W]` volume into a `[C·kt·kh·kw, T·H·W]` matrix for
/// a stride-1 convolution with zero "same" padding (odd kernel sizes).
pub fn im2col(x: &[f64], dims: [usize; 4], kernel: [usize; 3]) -> Array2<f64> {
    let [c, t, h, w] = dims;
    let [kt, kh, kw] = kernel;
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let positions = t * h * w;
    let mut cols = Array2::<f64>::zeros((c * kt * kh * kw, positions));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &x[ci * positions..(ci + 1) * positions];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let dst = &mut out[row * positions..(row + 1) * positions];
                    let (w_lo, w_hi) = valid_range(w, dw, pw);
                    for ot in 0..t {
                        let Some(st) = shifted(ot, dt, pt, t) else { continue };
                        for oh in 0..h {
                            let Some(sh) = shifted(oh, dh, ph, h) else { continue };
                            let src_base = (st * h + sh) * w;
                            let dst_base = (ot * h + oh) * w;
                            for ow in w_lo..w_hi {
                                dst[dst_base + ow] = plane[src_base + ow + dw - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a volume.
pub fn col2im(cols: ArrayView2<'_, f64>, dims: [usize; 4], kernel: [usize; 3]) -> Vec<f64> {
    let [c, t, h, w] = dims;
    let [kt, kh, kw] = kernel;
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let positions = t * h * w;
    let mut x = vec![0.0; c * positions];
    let cols = cols.as_standard_layout();
    let src_all = cols.as_slice().unwrap();
    for ci in 0..c {
        let plane = &mut x[ci * positions..(ci + 1) * positions];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let src = &src_all[row * positions..(row + 1) * positions];
                    let (w_lo, w_hi) = valid_range(w, dw, pw);
                    for ot in 0..t {
                        let Some(st) = shifted(ot, dt, pt, t) else { continue };
                        for oh in 0..h {
                            let Some(sh) = shifted(oh, dh, ph, h) else { continue };
                            let dst_base = (st * h + sh) * w;
                            let src_base = (ot * h + oh) * w;
                            for ow in w_lo..w_hi {
                                plane[dst_base + ow + dw - pw] += src[src_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn shifted(o: usize, d: usize, pad: usize, len: usize) -> Option<usize> {
    let s = o + d;
    if s < pad || s - pad >= len {
        None
    } else {
        Some(s - pad)
    }
}

/// Output columns `ow` for which `ow + d - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (len + pad).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

impl<'t> Var<'t> {
    /// Stride-1 3D convolution with zero "same" padding.
    ///
    /// `self: [B, Ci, T, H, W]`, `weight: [Co, Ci, kt, kh, kw]` (odd sizes),
    /// `bias: [Co]`.
    pub fn conv3d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let wv = weight.value();
        let xs = x.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be [B, C, T, H, W]");
        assert_eq!(ws.len(), 5, "conv3d weight must be [Co, Ci, kt, kh, kw]");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch");
        assert!(ws[2..].iter().all(|k| k % 2 == 1), "conv3d kernel sizes must be odd");
        let (bs, co) = (xs[0], ws[0]);
        let dims = [xs[1], xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let positions = dims[1] * dims[2] * dims[3];
        let fan = ws[1] * ws[2] * ws[3] * ws[4];
        let w2 = wv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, fan))
            .unwrap();
        let xc = x.as_standard_layout().into_owned();
        let xflat = xc.as_slice().unwrap();
        let per_sample = dims.iter().product::<usize>();
        let bv = bias.value();
        let mut out = vec![0.0; bs * co * positions];
        for b in 0..bs {
            let cols = im2col(&xflat[b * per_sample..(b + 1) * per_sample], dims, kernel);
            let mut ob = ndarray::ArrayViewMut2::from_shape(
                (co, positions),
                &mut out[b * co * positions..(b + 1) * co * positions],
            )
            .unwrap();
            general_mat_mul(1.0, &w2, &cols, 0.0, &mut ob);
            for (mut row, &bo) in ob.outer_iter_mut().zip(bv.iter()) {
                row += bo;
            }
        }
        let out_shape = conv3d_output_shape(&xs, &ws);
        let v = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        self.tape.push(v, &[self, weight, bias], move |g| {
            let gc = g.as_standard_layout();
            let gflat = gc.as_slice().unwrap();
            let mut gx = vec![0.0; bs * per_sample];
            let mut gw = Array2::<f64>::zeros((co, fan));
            let mut gb = Array1::<f64>::zeros(co);
            for b in 0..bs {
                let gb_view = ArrayView2::from_shape(
                    (co, positions),
                    &gflat[b * co * positions..(b + 1) * co * positions],
                )
                .unwrap();
                let cols = im2col(&xflat_of(&xc)[b * per_sample..(b + 1) * per_sample], dims, kernel);
                general_mat_mul(1.0, &gb_view, &cols.t(), 1.0, &mut gw);
                gb += &gb_view.sum_axis(Axis(1));
                let mut gcols = Array2::<f64>::zeros((fan, positions));
                general_mat_mul(1.0, &w2.t(), &gb_view, 0.0, &mut gcols);
                let gxb = col2im(gcols.view(), dims, kernel);
                gx[b * per_sample..(b + 1) * per_sample].copy_from_slice(&gxb);
            }
            vec![
                Some(ArrayD::from_shape_vec(IxDyn(&xs), gx).unwrap()),
                Some(gw.into_shape_with_order(IxDyn(&ws)).unwrap()),
                Some(gb.into_dyn()),
            ]
        })
    }

    /// Non-overlapping max pooling over the trailing three axes of `[B, C, T, H, W]`.
    /// Each axis length must be divisible by its window.
    pub fn max_pool3d(self, window: [usize; 3]) -> Var<'t> {
        if window == [1, 1, 1] {
            return self;
        }
        let x = self.value();
        let xs = x.shape().to_vec();
        let [kt, kh, kw] = window;
        let (t, h, w) = (xs[2], xs[3], xs[4]);
        assert!(
            t % kt == 0 && h % kh == 0 && w % kw == 0,
            "max_pool3d: {xs:?} not divisible by {window:?}"
        );
        let (ot, oh, ow) = (t / kt, h / kh, w / kw);
        let planes = xs[0] * xs[1];
        let xc = x.as_standard_layout();
        let xf = xc.as_slice().unwrap();
        let in_plane = t * h * w;
        let out_plane = ot * oh * ow;
        let mut out = vec![0.0; planes * out_plane];
        let mut argmax = vec![0usize; planes * out_plane];
        for p in 0..planes {
            let base = p * in_plane;
            for a in 0..ot {
                for b in 0..oh {
                    for c in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for i in 0..kt {
                            for j in 0..kh {
                                for k in 0..kw {
                                    let idx =
                                        base + ((a * kt + i) * h + (b * kh + j)) * w + (c * kw + k);
                                    if xf[idx] > best {
                                        best = xf[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                        }
                        let o = p * out_plane + (a * oh + b) * ow + c;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        let out_shape = vec![xs[0], xs[1], ot, oh, ow];
        let v = ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let n_in = x.len();
        self.tape.push(v, &[self], move |g| {
            let gc = g.as_standard_layout();
            let mut gx = vec![0.0; n_in];
            for (&src, &gv) in argmax.iter().zip(gc.as_slice().unwrap()) {
                gx[src] += gv;
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), gx).unwrap())]
        })
    }
}

fn xflat_of(x: &Tensor) -> &[f64] {
    x.as_slice().expect("standard layout")
}
