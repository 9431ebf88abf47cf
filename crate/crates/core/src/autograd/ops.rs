use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn};

use super::{Tensor, Var};

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn unbroadcast(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn matmul2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

fn softmax_lanes(x: &Tensor) -> Tensor {
    let last = Axis(x.ndim() - 1);
    let mut y = x.clone();
    for mut lane in y.lanes_mut(last) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let s = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    y
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        value: Tensor,
        grads: impl Fn(&Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        self.tape.push(value, &[self, other], move |g| {
            let (ga, gb) = grads(g, &a, &b);
            vec![
                Some(unbroadcast(ga, a.shape())),
                Some(unbroadcast(gb, b.shape())),
            ]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() * &*other.value();
        self.binary(other, v, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() / &*other.value();
        self.binary(other, v, |g, a, b| {
            let ga = g / b;
            let gb = -(g * a) / (b * b);
            (ga, gb)
        })
    }

    fn unary(
        self,
        value: Tensor,
        grad: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let out = Arc::new(value);
        let y = Arc::clone(&out);
        self.tape
            .push_shared(out, &[self], move |g| vec![Some(grad(g, &x, &y))])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = &*self.value() * k;
        self.tape.push(v, &[self], move |g| vec![Some(g * k)])
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let v = &*self.value() + k;
        self.tape.push(v, &[self], |g| vec![Some(g.clone())])
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, |g, _, y| g * y)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, |g, x, _| g / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.unary(v, |g, _, y| g / &(y * 2.0))
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().mapv(|x| x * x);
        self.unary(v, |g, x, _| g * x * 2.0)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, |g, x, _| {
            let mut out = g.clone();
            out.zip_mut_with(x, |o, &xv| {
                if xv <= 0.0 {
                    *o = 0.0
                }
            });
            out
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, |g, _, y| g * &y.mapv(|s| s * (1.0 - s)))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        let v = self.value().mapv(softplus);
        self.unary(v, |g, x, _| g * &x.mapv(sigmoid))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let v = ArrayD::from_elem(IxDyn(&[]), x.sum());
        let dim = x.raw_dim();
        self.tape.push(v, &[self], move |g| {
            let s = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(dim.clone(), s))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let v = x.sum_axis(Axis(axis));
        let dim = x.raw_dim();
        self.tape.push(v, &[self], move |g| {
            let expanded = g.clone().insert_axis(Axis(axis));
            vec![Some(expanded.broadcast(dim.clone()).unwrap().to_owned())]
        })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Row-major reshape.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push(v, &[self], move |g| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap(),
            )]
        })
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let x = self.value();
        let v = x
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push(v, &[self], move |g| {
            vec![Some(
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned(),
            )]
        })
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = matmul2(view2(&a), view2(&b)).into_dyn();
        self.tape.push(v, &[self, other], move |g| {
            let g2 = view2(g);
            let ga = matmul2(g2, view2(&b).t());
            let gb = matmul2(view2(&a).t(), g2);
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        })
    }

    /// Batched product of `[B, n, k]` and `[B, k, m]`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs rank 3");
        let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs rank 3");
        let (bs, n, k) = a3.dim();
        let (bs2, k2, m) = b3.dim();
        assert_eq!((bs, k), (bs2, k2), "bmm shape mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((bs, n, m));
        for i in 0..bs {
            let mut o = out.index_axis_mut(Axis(0), i);
            general_mat_mul(
                1.0,
                &a3.index_axis(Axis(0), i),
                &b3.index_axis(Axis(0), i),
                0.0,
                &mut o,
            );
        }
        self.tape.push(out.into_dyn(), &[self, other], move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
            let mut ga = ndarray::Array3::<f64>::zeros(a3.raw_dim());
            let mut gb = ndarray::Array3::<f64>::zeros(b3.raw_dim());
            for i in 0..g3.shape()[0] {
                let gi = g3.index_axis(Axis(0), i);
                let mut gai = ga.index_axis_mut(Axis(0), i);
                general_mat_mul(1.0, &gi, &b3.index_axis(Axis(0), i).t(), 0.0, &mut gai);
                let mut gbi = gb.index_axis_mut(Axis(0), i);
                general_mat_mul(1.0, &a3.index_axis(Axis(0), i).t(), &gi, 0.0, &mut gbi);
            }
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = softmax_lanes(&self.value());
        self.unary(v, |g, _, y| {
            let last = Axis(y.ndim() - 1);
            let gy = g * y;
            let s = gy.sum_axis(last).insert_axis(last);
            &gy - &(y * &s)
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let last = Axis(x.ndim() - 1);
        let mut v = x.as_ref().clone();
        for mut lane in v.lanes_mut(last) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            let lse = max + lane.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            lane.mapv_inplace(|a| a - lse);
        }
        self.unary(v, move |g, _, y| {
            let s = g.sum_axis(last).insert_axis(last);
            g - &(y.mapv(f64::exp) * &s)
        })
    }

    /// Per-position linear map over axis 1 of a `[B, C, ...]` tensor:
    /// `out[b, o, s] = Σ_c w[o, c] · x[b, c, s] + bias[o]`.
    pub fn channel_mix(self, w: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let wv = w.value();
        let shape = x.shape().to_vec();
        let (bs, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (o, c2) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(c, c2, "channel_mix: weight expects {c2} channels, input has {c}");
        let xs = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((bs, c, spatial))
            .unwrap();
        let bv = bias.value();
        let mut out = ndarray::Array3::<f64>::zeros((bs, o, spatial));
        let w2 = view2(&wv);
        for i in 0..bs {
            let mut oi = out.index_axis_mut(Axis(0), i);
            general_mat_mul(1.0, &w2, &xs.index_axis(Axis(0), i), 0.0, &mut oi);
            for (mut row, &bo) in oi.outer_iter_mut().zip(bv.iter()) {
                row += bo;
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = o;
        let v = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let in_shape = shape;
        self.tape.push(v, &[self, w, bias], move |g| {
            let g3 = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((bs, o, spatial))
                .unwrap();
            let w2 = view2(&wv);
            let mut gx = ndarray::Array3::<f64>::zeros((bs, c, spatial));
            let mut gw = Array2::<f64>::zeros((o, c));
            for i in 0..bs {
                let gi = g3.index_axis(Axis(0), i);
                let mut gxi = gx.index_axis_mut(Axis(0), i);
                general_mat_mul(1.0, &w2.t(), &gi, 0.0, &mut gxi);
                general_mat_mul(1.0, &gi, &xs.index_axis(Axis(0), i).t(), 1.0, &mut gw);
            }
            let gb = g3.sum_axis(Axis(2)).sum_axis(Axis(0));
            vec![
                Some(gx.into_shape_with_order(IxDyn(&in_shape)).unwrap()),
                Some(gw.into_dyn()),
                Some(gb.into_dyn()),
            ]
        })
    }

    /// `x @ wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(self, w: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let wt = w.permute(&[1, 0]);
        self.matmul(wt).add(bias)
    }

    /// Gathers entries of axis 0; indices may repeat.
    pub fn select_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let v = x.select(Axis(0), indices);
        let dim = x.raw_dim();
        let indices = indices.to_vec();
        self.tape.push(v, &[self], move |g| {
            let mut out = Tensor::zeros(dim.clone());
            for (k, &i) in indices.iter().enumerate() {
                let mut dst = out.index_axis_mut(Axis(0), i);
                dst += &g.index_axis(Axis(0), k);
            }
            vec![Some(out)]
        })
    }

    /// Sum of squares over the last axis.
    pub fn sq_norm_last(self) -> Var<'t> {
        let last = self.shape().len() - 1;
        self.square().sum_axis(last)
    }

    /// Divides each lane along the last axis by its Euclidean norm.
    pub fn l2_normalize(self) -> Var<'t> {
        let last = self.shape().len() - 1;
        let norm = self.sq_norm_last().sqrt();
        let shape_keep = {
            let mut s = self.shape();
            s[last] = 1;
            s
        };
        self.div(norm.reshape(&shape_keep))
    }

    /// Inner product over the last axis (broadcasting the leading axes).
    pub fn dot_last(self, other: Var<'t>) -> Var<'t> {
        let prod = self.mul(other);
        let last = prod.shape().len() - 1;
        prod.sum_axis(last)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
