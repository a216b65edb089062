//! Differentiable operations on [`Var`].
//!
//! Image tensors are `[batch, channels, height, width]`; matrices are
//! `[rows, cols]`.

use std::sync::Arc;

use crate::scalar::{gemm, MatRef};
use crate::{Scalar, Tensor, Var};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn dims4(shape: &[usize], op: &str) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "{op}: expected [B, C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

fn dims2(shape: &[usize], op: &str) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "{op}: expected a matrix, got {shape:?}");
    (shape[0], shape[1])
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, value: Tensor<T>, backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Var<'g, T> {
        self.graph.op(value, &[self], move |g, _| vec![Some(backward(g))])
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.op(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.op(out, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                needs[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|v| v + c);
        self.unary(out, |g| g.clone())
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let out = self.value().map(|v| v * c);
        self.unary(out, move |g| g.map(|v| v * c))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * slope }))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn tanh(self) -> Var<'g, T> {
        let y = Arc::new(self.value().map(|v| v.tanh()));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |gv, yv| gv * (T::one() - yv * yv)))
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(softplus);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| gv * sigmoid(xv)))
    }

    pub fn square(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::lit(2.0);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| gv * two * xv))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.unary(out, move |g| g.clone().reshape(&old))
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2(a.shape(), "matmul");
        let (k2, n) = dims2(b.shape(), "matmul");
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), out.data_mut(), T::zero());
        self.graph.op(out, &[self, other], move |g, needs| {
            let da = needs[0].then(|| {
                let mut da = Tensor::zeros(&[m, k]);
                gemm(MatRef::new(g.data(), m, n), MatRef::new(b.data(), k, n).t(), da.data_mut(), T::zero());
                da
            });
            let db = needs[1].then(|| {
                let mut db = Tensor::zeros(&[k, n]);
                gemm(MatRef::new(a.data(), m, k).t(), MatRef::new(g.data(), m, n), db.data_mut(), T::zero());
                db
            });
            vec![da, db]
        })
    }

    /// Adds `bias` (shape `[n]`) to every row of a `[.., n]` tensor.
    pub fn add_bias(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, b) = (self.value(), bias.value());
        let n = b.len();
        assert_eq!(b.shape().len(), 1, "add_bias: bias must be a vector");
        assert_eq!(*x.shape().last().unwrap(), n, "add_bias: width mismatch");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.graph.op(out, &[self, bias], move |g, needs| {
            let db = needs[1].then(|| {
                let mut db = Tensor::zeros(&[n]);
                for row in g.data().chunks(n) {
                    for (d, &gv) in db.data_mut().iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                db
            });
            vec![needs[0].then(|| g.clone()), db]
        })
    }

    /// Adds a per-channel bias `[C]` to `[B, C, H, W]`.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, b) = (self.value(), bias.value());
        let (_, c, h, w) = dims4(x.shape(), "add_channel_bias");
        assert_eq!(b.shape(), &[c], "add_channel_bias: bias must be [C]");
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = b.data()[i % c];
            for v in plane {
                *v += bv;
            }
        }
        self.graph.op(out, &[self, bias], move |g, needs| {
            let db = needs[1].then(|| {
                let mut db = Tensor::zeros(&[c]);
                for (i, plane) in g.data().chunks(hw).enumerate() {
                    db.data_mut()[i % c] += plane.iter().copied().sum();
                }
                db
            });
            vec![needs[0].then(|| g.clone()), db]
        })
    }

    /// Same-size 2-D convolution, stride 1, zero padding `kernel / 2`.
    /// `weight` is `[out_channels, in_channels, kernel, kernel]` with odd `kernel`.
    pub fn conv2d(self, weight: Var<'g, T>) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape());
        let out = geom.forward(&x, &w);
        self.graph.op(out, &[self, weight], move |g, needs| {
            let (dx, dw) = geom.backward(&x, &w, g, needs[0], needs[1]);
            vec![dx, dw]
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(self) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(x.shape(), "upsample2x");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (src, dst) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                for i in 0..oh {
                    for j in 0..ow {
                        dst[(i / 2) * w + j / 2] += src[i * ow + j];
                    }
                }
            }
            dx
        })
    }

    /// 2x2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2x(self) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(x.shape(), "avg_pool2x");
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2x: input too small");
        let quarter = T::lit(0.25);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = s * quarter;
                }
            }
        }
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (src, dst) in g.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                for i in 0..oh {
                    for j in 0..ow {
                        let v = src[i * ow + j] * quarter;
                        dst[2 * i * w + 2 * j] += v;
                        dst[2 * i * w + 2 * j + 1] += v;
                        dst[(2 * i + 1) * w + 2 * j] += v;
                        dst[(2 * i + 1) * w + 2 * j + 1] += v;
                    }
                }
            }
            dx
        })
    }

    /// Normalizes every `(sample, channel)` plane to zero mean and unit
    /// variance (biased variance, `eps` added before the square root).
    pub fn instance_norm(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(x.shape(), "instance_norm");
        let hw = h * w;
        let n = T::lit(hw as f64);
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let mut inv_std = Vec::with_capacity(b * c);
        for (src, dst) in x.data().chunks(hw).zip(out.data_mut().chunks_mut(hw)) {
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let y = Arc::new(out);
        let yc = y.clone();
        self.unary((*y).clone(), move |g| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (p, ((gp, yp), dp)) in
                g.data().chunks(hw).zip(yc.data().chunks(hw)).zip(dx.data_mut().chunks_mut(hw)).enumerate()
            {
                let mean_g = gp.iter().copied().sum::<T>() / n;
                let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / n;
                let is = inv_std[p];
                for ((d, &gv), &yv) in dp.iter_mut().zip(gp).zip(yp) {
                    *d = is * (gv - mean_g - yv * mean_gy);
                }
            }
            dx
        })
    }

    /// `x * scale + shift` with per-sample, per-channel `scale`/`shift` of shape `[B, C]`.
    pub fn modulate(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Var<'g, T> {
        let (x, s, t) = (self.value(), scale.value(), shift.value());
        let (b, c, h, w) = dims4(x.shape(), "modulate");
        assert_eq!(s.shape(), &[b, c], "modulate: scale must be [B, C]");
        assert_eq!(t.shape(), &[b, c], "modulate: shift must be [B, C]");
        let hw = h * w;
        let mut out = (*x).clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let (sv, tv) = (s.data()[p], t.data()[p]);
            for v in plane {
                *v = *v * sv + tv;
            }
        }
        self.graph.op(out, &[self, scale, shift], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = g.clone();
                for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                    let sv = s.data()[p];
                    for v in plane {
                        *v *= sv;
                    }
                }
                dx
            });
            let ds = needs[1].then(|| {
                let data = g
                    .data()
                    .chunks(hw)
                    .zip(x.data().chunks(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                Tensor::new(&[b, c], data)
            });
            let dt = needs[2].then(|| Tensor::new(&[b, c], g.data().chunks(hw).map(|gp| gp.iter().copied().sum()).collect()));
            vec![dx, ds, dt]
        })
    }

    /// Rows of a `[R, D]` table selected by `ids`, giving `[ids.len(), D]`.
    /// Rows that are not selected receive an exactly-zero gradient.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'g, T> {
        let table = self.value();
        let (r, d) = dims2(table.shape(), "gather_rows");
        for &i in ids {
            assert!(i < r, "gather_rows: row {i} out of range for {r} rows");
        }
        let out = table.select_outer(ids);
        let ids = ids.to_vec();
        self.unary(out, move |g| {
            let mut dt = Tensor::zeros(&[r, d]);
            for (k, &i) in ids.iter().enumerate() {
                let src = &g.data()[k * d..(k + 1) * d];
                for (dst, &v) in dt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *dst += v;
                }
            }
            dt
        })
    }

    /// `[B, p] ++ [B, q] -> [B, p + q]`.
    pub fn concat_cols(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (rows, p) = dims2(a.shape(), "concat_cols");
        let (rows2, q) = dims2(b.shape(), "concat_cols");
        assert_eq!(rows, rows2, "concat_cols: row count mismatch");
        let mut data = Vec::with_capacity(rows * (p + q));
        for i in 0..rows {
            data.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
        }
        let out = Tensor::new(&[rows, p + q], data);
        self.graph.op(out, &[self, other], move |g, needs| {
            let split = |off: usize, width: usize| {
                let mut data = Vec::with_capacity(rows * width);
                for row in g.data().chunks(p + q) {
                    data.extend_from_slice(&row[off..off + width]);
                }
                Tensor::new(&[rows, width], data)
            };
            vec![needs[0].then(|| split(0, p)), needs[1].then(|| split(p, q))]
        })
    }

    /// Columns `start..start + len` of a `[B, n]` matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let (rows, n) = dims2(x.shape(), "slice_cols");
        assert!(start + len <= n, "slice_cols: range out of bounds");
        let mut data = Vec::with_capacity(rows * len);
        for row in x.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data);
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[rows, n]);
            for (dst, src) in dx.data_mut().chunks_mut(n).zip(g.data().chunks(len)) {
                dst[start..start + len].copy_from_slice(src);
            }
            dx
        })
    }

    /// `[B, C, H, W] -> [B, C]` summing each plane.
    pub fn sum_spatial(self) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(x.shape(), "sum_spatial");
        let hw = h * w;
        let out = Tensor::new(&[b, c], x.data().chunks(hw).map(|p| p.iter().copied().sum()).collect());
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                plane.fill(gv);
            }
            dx
        })
    }

    pub fn mean_spatial(self) -> Var<'g, T> {
        let s = self.shape();
        let hw = (s[2] * s[3]) as f64;
        self.sum_spatial().scale(T::lit(1.0 / hw))
    }

    /// `[B, n] -> [B]`.
    pub fn sum_cols(self) -> Var<'g, T> {
        let x = self.value();
        let (rows, n) = dims2(x.shape(), "sum_cols");
        let out = Tensor::new(&[rows], x.data().chunks(n).map(|r| r.iter().copied().sum()).collect());
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[rows, n]);
            for (row, &gv) in dx.data_mut().chunks_mut(n).zip(g.data()) {
                row.fill(gv);
            }
            dx
        })
    }

    /// Repeats the whole tensor along a new leading batch dimension.
    pub fn broadcast_batch(self, batch: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&shape);
        let mut data = Vec::with_capacity(batch * x.len());
        for _ in 0..batch {
            data.extend_from_slice(x.data());
        }
        let n = x.len();
        self.unary(Tensor::new(&out_shape, data), move |g| {
            let mut dx = Tensor::zeros(&shape);
            for chunk in g.data().chunks(n) {
                for (d, &v) in dx.data_mut().iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            dx
        })
    }

    /// Output element `i` is input element `map[i]`, or zero for `None`.
    /// Expresses flips, integer shifts and quarter-turn rotations.
    pub fn gather_elements(self, out_shape: &[usize], map: Arc<Vec<Option<usize>>>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(out_shape.iter().product::<usize>(), map.len(), "gather_elements: map size mismatch");
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(out_shape, map.iter().map(|m| m.map_or(T::zero(), |i| x.data()[i])).collect());
        self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&in_shape);
            for (&gv, m) in g.data().iter().zip(map.iter()) {
                if let Some(i) = m {
                    dx.data_mut()[*i] += gv;
                }
            }
            dx
        })
    }

    /// Mean over rows of `-sum_j target[i, j] * log_softmax(logits)[i, j]`.
    /// `target` rows are probability vectors (one-hot or mixed).
    pub fn softmax_cross_entropy(self, target: &Tensor<T>) -> Var<'g, T> {
        let x = self.value();
        let (rows, n) = dims2(x.shape(), "softmax_cross_entropy");
        assert_eq!(target.shape(), x.shape(), "softmax_cross_entropy: target shape mismatch");
        assert!(rows > 0);
        let mut probs = Vec::with_capacity(rows * n);
        let mut loss = T::zero();
        for (row, trow) in x.data().chunks(n).zip(target.data().chunks(n)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (&v, &t) in row.iter().zip(trow) {
                loss -= t * (v - lse);
                probs.push((v - lse).exp());
            }
        }
        let inv_rows = T::one() / T::lit(rows as f64);
        let target = target.clone();
        self.unary(Tensor::scalar(loss * inv_rows), move |g| {
            let gs = g.item() * inv_rows;
            let data = probs
                .chunks(n)
                .zip(target.data().chunks(n))
                .flat_map(|(p, t)| {
                    let tsum: T = t.iter().copied().sum();
                    p.iter().zip(t).map(move |(&pv, &tv)| gs * (pv * tsum - tv)).collect::<Vec<_>>()
                })
                .collect();
            Tensor::new(&[rows, n], data)
        })
    }
}

impl<'g, T: Scalar> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

/// Overflow-free `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize]) -> Self {
        let (batch, in_c, h, width) = dims4(x, "conv2d");
        let (out_c, in_c2, k, k2) = dims4(w, "conv2d weight");
        assert_eq!(in_c, in_c2, "conv2d: channel mismatch");
        assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be square and odd");
        ConvGeom { batch, in_c, out_c, h, w: width, k }
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// `[C*k*k, H*W]` patch matrix for one sample.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (h, w, k, pad) = (self.h as isize, self.w as isize, self.k, (self.k / 2) as isize);
        let hw = self.hw();
        for c in 0..self.in_c {
            let plane = &x[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * hw..][..hw];
                    let (di, dj) = (ki as isize - pad, kj as isize - pad);
                    for i in 0..h {
                        let si = i + di;
                        let dst = &mut row[(i * w) as usize..((i + 1) * w) as usize];
                        if si < 0 || si >= h {
                            dst.fill(T::zero());
                            continue;
                        }
                        for j in 0..w {
                            let sj = j + dj;
                            dst[j as usize] = if sj < 0 || sj >= w { T::zero() } else { plane[(si * w + sj) as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (h, w, k, pad) = (self.h as isize, self.w as isize, self.k, (self.k / 2) as isize);
        let hw = self.hw();
        for c in 0..self.in_c {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * hw..][..hw];
                    let (di, dj) = (ki as isize - pad, kj as isize - pad);
                    for i in 0..h {
                        let si = i + di;
                        if si < 0 || si >= h {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j + dj;
                            if sj >= 0 && sj < w {
                                plane[(si * w + sj) as usize] += row[(i * w + j) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
        use rayon::prelude::*;
        let (hw, patch) = (self.hw(), self.patch());
        let in_len = self.in_c * hw;
        let mut out = Tensor::zeros(&[self.batch, self.out_c, self.h, self.w]);
        out.data_mut().par_chunks_mut(self.out_c * hw).enumerate().for_each_init(
            || vec![T::zero(); patch * hw],
            |cols, (b, dst)| {
                self.im2col(&x.data()[b * in_len..(b + 1) * in_len], cols);
                gemm(MatRef::new(w.data(), self.out_c, patch), MatRef::new(cols, patch, hw), dst, T::zero());
            },
        );
        out
    }

    /// Per-sample work runs in parallel; the weight gradient is reduced in
    /// sample order so results do not depend on the thread count.
    fn backward<T: Scalar>(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        g: &Tensor<T>,
        need_dx: bool,
        need_dw: bool,
    ) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
        use rayon::prelude::*;
        let (hw, patch) = (self.hw(), self.patch());
        let in_len = self.in_c * hw;
        let out_len = self.out_c * hw;
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..self.batch)
            .into_par_iter()
            .map(|b| {
                let gb = &g.data()[b * out_len..(b + 1) * out_len];
                let mut cols = vec![T::zero(); patch * hw];
                let dw = need_dw.then(|| {
                    self.im2col(&x.data()[b * in_len..(b + 1) * in_len], &mut cols);
                    let mut dw = vec![T::zero(); self.out_c * patch];
                    gemm(MatRef::new(gb, self.out_c, hw), MatRef::new(&cols, patch, hw).t(), &mut dw, T::zero());
                    dw
                });
                let dx = need_dx.then(|| {
                    gemm(MatRef::new(w.data(), self.out_c, patch).t(), MatRef::new(gb, self.out_c, hw), &mut cols, T::zero());
                    let mut dx = vec![T::zero(); in_len];
                    self.col2im(&cols, &mut dx);
                    dx
                });
                (dx, dw)
            })
            .collect();
        let dx = need_dx.then(|| {
            let mut data = Vec::with_capacity(self.batch * in_len);
            for (dx, _) in &per_sample {
                data.extend_from_slice(dx.as_ref().unwrap());
            }
            Tensor::new(&[self.batch, self.in_c, self.h, self.w], data)
        });
        let dw = need_dw.then(|| {
            let mut acc = Tensor::zeros(&[self.out_c, self.in_c, self.k, self.k]);
            for (_, dw) in &per_sample {
                for (a, &v) in acc.data_mut().iter_mut().zip(dw.as_ref().unwrap()) {
                    *a += v;
                }
            }
            acc
        });
        (dx, dw)
    }
}
