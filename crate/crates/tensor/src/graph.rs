//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. Nodes are appended in evaluation order, so walking the tape
//! backwards visits each node after all of its consumers. Parameters are read
//! from a shared [`ParamStore`]; the graph itself is the only mutable state of
//! a forward pass, which keeps several graphs over one store independent.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::real::{gemm, Real};
use crate::tensor::{axis_extents, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over an `H x W x C` (channels-last) image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterMax {
        x: Var,
        source: Vec<Option<usize>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Var,
        in_h: usize,
        in_w: usize,
        cin: usize,
        cout: usize,
    },
    Sum(Var),
    LocalGrad {
        x: Var,
        dx: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass over a parameter store.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`] when
    /// `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::shape(op, other, &[0, 0])),
        }
    }

    /// `op(a) * op(b)` for 2-D operands, optionally transposing either side.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds a vector along the last axis (the only broadcast supported).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(TensorError::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let vb = self.value(bias).data().to_vec();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                for (x, &b) in row.iter_mut().zip(&vb) {
                    *x = *x + b;
                }
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = *va.shape().last().unwrap_or(&0);
        if c == 0 {
            return Err(TensorError::invalid("softmax_rows", "needs at least one column"));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SoftmaxRows(a), rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if c == 0 {
            return Err(TensorError::invalid("layer_norm", "empty last axis"));
        }
        let eps = T::lit(1e-5);
        let cn = T::from_usize(c).expect("usize fits");
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.len() / c;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Maximum over `axis`; the axis is removed from the shape. Gradient flows
    /// to the first maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::invalid(
                "max_axis",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, mid, inner) = axis_extents(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * mid * inner + i;
                for m in 1..mid {
                    let idx = (o * mid + m) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = data[best];
                argmax[o * inner + i] = best;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaxAxis { x, argmax }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let mid = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, mid, inner) = axis_extents(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Selects rows (first axis) of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = *shape.first().unwrap_or(&0);
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("index {bad} out of {rows} rows"),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut s = shape;
        s[0] = index.len();
        let t = Tensor::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Scatters rows of a 2-D `x` (`N x C`) into `n_out` buckets with a
    /// per-channel maximum. `bucket[i] = None` drops row `i`; buckets that
    /// receive no row hold zero.
    pub fn scatter_max_rows(
        &mut self,
        x: Var,
        bucket: &[Option<usize>],
        n_out: usize,
    ) -> Result<Var> {
        let (n, c) = self.dims2(x, "scatter_max_rows")?;
        if bucket.len() != n {
            return Err(TensorError::shape("scatter_max_rows", &[n, c], &[bucket.len()]));
        }
        if let Some(bad) = bucket.iter().flatten().find(|&&b| b >= n_out) {
            return Err(TensorError::invalid(
                "scatter_max_rows",
                format!("bucket {bad} out of {n_out}"),
            ));
        }
        let d = self.value(x).data();
        let mut source: Vec<Option<usize>> = vec![None; n_out * c];
        for (i, b) in bucket.iter().enumerate() {
            let Some(b) = *b else { continue };
            for ch in 0..c {
                let src = i * c + ch;
                let slot = &mut source[b * c + ch];
                match *slot {
                    Some(cur) if d[cur] >= d[src] => {}
                    _ => *slot = Some(src),
                }
            }
        }
        let out = source
            .iter()
            .map(|s| s.map_or(T::zero(), |i| d[i]))
            .collect();
        let t = Tensor::new(vec![n_out, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ScatterMax { x, source }, rg))
    }

    /// 2-D convolution over a channels-last `H x W x Cin` image with weight
    /// `(kh*kw*Cin) x Cout` (row index `(ky*kw + kx)*Cin + ci`) and bias
    /// `Cout`, zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [in_h, in_w, cin] = xs[..] else {
            return Err(TensorError::shape("conv2d", &xs, &[0, 0, 0]));
        };
        let ws = self.shape(w).to_vec();
        let [wk, cout] = ws[..] else {
            return Err(TensorError::shape("conv2d", &xs, &ws));
        };
        if wk != kernel * kernel * cin || self.shape(b) != [cout] {
            return Err(TensorError::shape("conv2d", &xs, &ws));
        }
        if stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return Err(TensorError::invalid("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            in_h,
            in_w,
            cin,
            cout,
            kh: kernel,
            kw: kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); p * cout];
        gemm(
            p,
            geom.patch_len(),
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let t = Tensor::new(vec![geom.out_h, geom.out_w, cout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 over a
    /// channels-last image. Weight is `Cin x (2*2*Cout)` with column index
    /// `(a*2 + b)*Cout + co`, writing output pixel `(2i+a, 2j+b)`. The full
    /// `2H x 2W` result is cropped to `out_h x out_w`.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [in_h, in_w, cin] = xs[..] else {
            return Err(TensorError::shape("deconv2d", &xs, &[0, 0, 0]));
        };
        let ws = self.shape(w).to_vec();
        let [wc, w4] = ws[..] else {
            return Err(TensorError::shape("deconv2d", &xs, &ws));
        };
        if wc != cin || w4 % 4 != 0 {
            return Err(TensorError::shape("deconv2d", &xs, &ws));
        }
        let cout = w4 / 4;
        if self.shape(b) != [cout] {
            return Err(TensorError::shape("deconv2d", &ws, self.shape(b)));
        }
        if out_h > 2 * in_h || out_w > 2 * in_w || out_h + 1 < 2 * in_h || out_w + 1 < 2 * in_w {
            return Err(TensorError::invalid(
                "deconv2d",
                format!("output {out_h}x{out_w} incompatible with input {in_h}x{in_w}"),
            ));
        }
        let p = in_h * in_w;
        let mut tmp = vec![T::zero(); p * 4 * cout];
        gemm(
            p,
            cin,
            4 * cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut tmp,
            false,
        );
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); out_h * out_w * cout];
        for i in 0..in_h {
            for j in 0..in_w {
                for a in 0..2 {
                    for bb in 0..2 {
                        let (oy, ox) = (2 * i + a, 2 * j + bb);
                        if oy >= out_h || ox >= out_w {
                            continue;
                        }
                        let src = (i * in_w + j) * 4 * cout + (a * 2 + bb) * cout;
                        let dst = (oy * out_w + ox) * cout;
                        for co in 0..cout {
                            out[dst + co] = tmp[src + co] + bias[co];
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![out_h, out_w, cout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            t,
            Op::Deconv2d {
                x,
                w,
                b,
                in_h,
                in_w,
                cin,
                cout,
            },
            rg,
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).expect("usize fits"))
    }

    /// A scalar node whose value and gradient with respect to `x` were
    /// computed outside the tape (fused losses).
    pub fn scalar_with_grad(&mut self, x: Var, value: T, dx: Vec<T>) -> Result<Var> {
        if dx.len() != self.value(x).len() {
            return Err(TensorError::shape("scalar_with_grad", self.shape(x), &[dx.len()]));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::LocalGrad { x, dx }, rg))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut out = Gradients::empty(self.store.len());
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves
                        .insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match &mut out.params[id.index()] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                                *a = *a + b;
                            }
                        }
                        slot @ None => *slot = Some(t),
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    ta,
                    tb,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.requires_grad(*a) {
                        let mut da = vec![T::zero(); m * k];
                        if !*ta {
                            gemm(m, n, k, &g, false, bv, !*tb, &mut da, false);
                        } else {
                            gemm(k, n, m, bv, *tb, &g, true, &mut da, false);
                        }
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); k * n];
                        if !*tb {
                            gemm(k, m, n, av, !*ta, &g, false, &mut db, false);
                        } else {
                            gemm(n, m, k, &g, true, av, *ta, &mut db, false);
                        }
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if self.requires_grad(*a) {
                        let da = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                        self.acc(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, g.iter().map(|&v| v * s).collect());
                }
                Op::AddBias(a, bias) => {
                    if self.requires_grad(*bias) {
                        let c = self.value(*bias).len();
                        let mut db = vec![T::zero(); c];
                        if c > 0 {
                            for row in g.chunks(c) {
                                for (d, &v) in db.iter_mut().zip(row) {
                                    *d = *d + v;
                                }
                            }
                        }
                        self.acc(&mut grads, *bias, db);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let da = g
                        .iter()
                        .zip(av)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect();
                    self.acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let da = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (T::one() - s))
                        .collect();
                    self.acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let c = *node.value.shape().last().expect("non-scalar");
                    let mut da = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = self.value(*gamma).len();
                    let gm = self.value(*gamma).data();
                    let cn = T::from_usize(c).expect("usize fits");
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![T::zero(); c];
                        let mut db = vec![T::zero(); c];
                        for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] = dg[j] + gr[j] * hr[j];
                                db[j] = db[j] + gr[j];
                            }
                        }
                        self.acc(&mut grads, *gamma, dg);
                        self.acc(&mut grads, *beta, db);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![T::zero(); g.len()];
                        for (r, ((dr, gr), hr)) in dx
                            .chunks_mut(c)
                            .zip(g.chunks(c))
                            .zip(xhat.chunks(c))
                            .enumerate()
                        {
                            let dh: Vec<T> = gr.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                            let sum_dh: T = dh.iter().copied().sum();
                            let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                            let k = inv_std[r] / cn;
                            for j in 0..c {
                                dr[j] = k * (cn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            }
                        }
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::MaxAxis { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &d) in argmax.iter().zip(&g) {
                        dx[src] = dx[src] + d;
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let (outer, total, inner) = axis_extents(shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let mid = self.shape(p)[*axis];
                        if self.requires_grad(p) {
                            let mut dp = Vec::with_capacity(outer * mid * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                dp.extend_from_slice(&g[base..base + mid * inner]);
                            }
                            self.acc(&mut grads, p, dp);
                        }
                        offset += mid;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xs = self.shape(*x);
                    let (outer, mid, inner) = axis_extents(xs, *axis);
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![T::zero(); outer * mid * inner];
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => self.acc(&mut grads, *x, g),
                Op::GatherRows { x, index } => {
                    let xv = self.value(*x);
                    let width = if index.is_empty() { 0 } else { g.len() / index.len() };
                    let mut dx = vec![T::zero(); xv.len()];
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..width {
                            dx[i * width + j] = dx[i * width + j] + g[r * width + j];
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::ScatterMax { x, source } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (s, &d) in source.iter().zip(&g) {
                        if let Some(s) = *s {
                            dx[s] = dx[s] + d;
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let p = geom.out_h * geom.out_w;
                    let kl = geom.patch_len();
                    let co = geom.cout;
                    if self.requires_grad(*w) {
                        let mut dw = vec![T::zero(); kl * co];
                        gemm(kl, p, co, cols, true, &g, false, &mut dw, false);
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); co];
                        for row in g.chunks(co) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        self.acc(&mut grads, *b, db);
                    }
                    if self.requires_grad(*x) {
                        let mut dcols = vec![T::zero(); p * kl];
                        gemm(p, co, kl, &g, false, self.value(*w).data(), true, &mut dcols, false);
                        let dx = col2im(&dcols, geom);
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Deconv2d {
                    x,
                    w,
                    b,
                    in_h,
                    in_w,
                    cin,
                    cout,
                } => {
                    let (in_h, in_w, cin, cout) = (*in_h, *in_w, *cin, *cout);
                    let (out_h, out_w) = (node.value.shape()[0], node.value.shape()[1]);
                    let p = in_h * in_w;
                    let mut dtmp = vec![T::zero(); p * 4 * cout];
                    let mut db = vec![T::zero(); cout];
                    for i in 0..in_h {
                        for j in 0..in_w {
                            for a in 0..2 {
                                for bb in 0..2 {
                                    let (oy, ox) = (2 * i + a, 2 * j + bb);
                                    if oy >= out_h || ox >= out_w {
                                        continue;
                                    }
                                    let dst = (i * in_w + j) * 4 * cout + (a * 2 + bb) * cout;
                                    let src = (oy * out_w + ox) * cout;
                                    for c in 0..cout {
                                        dtmp[dst + c] = g[src + c];
                                        db[c] = db[c] + g[src + c];
                                    }
                                }
                            }
                        }
                    }
                    if self.requires_grad(*b) {
                        self.acc(&mut grads, *b, db);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![T::zero(); cin * 4 * cout];
                        gemm(
                            cin,
                            p,
                            4 * cout,
                            self.value(*x).data(),
                            true,
                            &dtmp,
                            false,
                            &mut dw,
                            false,
                        );
                        self.acc(&mut grads, *w, dw);
                    }
                    if self.requires_grad(*x) {
                        let mut dx = vec![T::zero(); p * cin];
                        gemm(
                            p,
                            4 * cout,
                            cin,
                            &dtmp,
                            false,
                            self.value(*w).data(),
                            true,
                            &mut dx,
                            false,
                        );
                        self.acc(&mut grads, *x, dx);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.acc(&mut grads, *x, vec![g[0]; n]);
                }
                Op::LocalGrad { x, dx } => {
                    let s = g[0];
                    self.acc(&mut grads, *x, dx.iter().map(|&v| v * s).collect());
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(contrib) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kl = g.patch_len();
    let mut cols = vec![T::zero(); g.out_h * g.out_w * kl];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * kl..(oy * g.out_w + ox + 1) * kl];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let kl = g.patch_len();
    let mut x = vec![T::zero(); g.in_h * g.in_w * g.cin];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * kl..(oy * g.out_w + ox + 1) * kl];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] = x[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
    x
}
