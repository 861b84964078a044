//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node.
//! Parents always precede children on the tape, so a single reverse sweep is
//! a valid topological order.
//!
//! Convolutions are cross-correlations (no kernel flip), the usual deep
//! learning convention. All shape violations are rejected at op construction
//! with [`Error::ShapeMismatch`], never by panicking.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Sqrt(usize),
    Recip(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    PermuteRows {
        src: usize,
        perm: Vec<usize>,
    },
    SoftmaxLastDim(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        channel_axis: usize,
        eps: f64,
    },
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Conv3d {
        x: usize,
        k: usize,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    BiasLastDim {
        x: usize,
        b: usize,
    },
    BiasChannel {
        x: usize,
        b: usize,
        channel_axis: usize,
    },
    MaxPool2d {
        x: usize,
        win: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    AvgPool2d {
        x: usize,
        win: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    MaxPool3d {
        x: usize,
        win: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    },
    GlobalAvgPool(usize),
    SumAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    ScaleRows {
        mat: usize,
        scale: usize,
    },
    SubRowBroadcast {
        mat: usize,
        row: usize,
    },
    SumOffDiagSq(usize),
    RowNorms(usize),
    BceWithLogits {
        logits: usize,
        labels: Vec<f64>,
        pos_weight: f64,
    },
    Img2Patches {
        x: usize,
        patch: usize,
    },
}

/// Reverse-mode tape.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op>,
}

fn conv_extent(input: usize, k: usize, stride: usize, pad: usize, op: &'static str) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::arg(
            op,
            format!("window {k} with stride {stride} does not fit extent {input} (pad {pad})"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                op,
                format!("{:?}", self.values[a.0].shape()),
                format!("{:?}", self.values[b.0].shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let mut out = self.values[a.0].clone();
        for (o, &r) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o += r;
        }
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let mut out = self.values[a.0].clone();
        for (o, &r) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o -= r;
        }
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let mut out = self.values[a.0].clone();
        for (o, &r) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o *= r;
        }
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.values[a.0].map(|v| v * f);
        self.push(out, Op::Scale(a.0, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let out = self.values[a.0].map(|v| v + cv);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|v| v.max_s(T::ZERO));
        self.push(out, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(sigmoid_stable);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|v| v.tanh());
        self.push(out, Op::Tanh(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(gelu_tanh);
        self.push(out, Op::Gelu(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|v| v.sqrt());
        self.push(out, Op::Sqrt(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|v| T::ONE / v);
        self.push(out, Op::Recip(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("[m,k]x[k,n], got {sa:?}"),
                format!("{sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.values[a.0].data(), self.values[b.0].data(), m, k, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", "rank 2", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.values[a.0].data();
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(t, Op::Transpose(a.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[a.0].reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat", "no parts"));
        }
        let first = self.values[parts[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::arg("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0usize;
        for p in parts {
            let s = self.values[p.0].shape();
            if s.len() != first.len() {
                return Err(Error::shape("concat", format!("{first:?}"), format!("{s:?}")));
            }
            for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape("concat", format!("{first:?}"), format!("{s:?}")));
                }
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; out_shape.iter().product()];
        let mut offset = 0usize;
        for p in parts {
            let s = self.values[p.0].shape().to_vec();
            let data = self.values[p.0].data();
            let ext = s[axis];
            for o in 0..outer {
                let dst_base = (o * total + offset) * inner;
                let src_base = o * ext * inner;
                out[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&data[src_base..src_base + ext * inner]);
            }
            offset += ext;
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::arg(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![T::ZERO; outer * len * inner];
        let data = self.values[a.0].data();
        for o in 0..outer {
            let src_base = (o * s[axis] + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&data[src_base..src_base + len * inner]);
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            t,
            Op::Slice {
                src: a.0,
                axis,
                start,
                len,
            },
        ))
    }

    /// Row gather of a rank-2 tensor: `out[i, :] = a[perm[i], :]`. Indices
    /// may repeat; the output has `perm.len()` rows.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.values[a.0].shape();
        if s.len() != 2 {
            return Err(Error::shape("permute_rows", "rank 2", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if perm.is_empty() || perm.iter().any(|&p| p >= r) {
            return Err(Error::arg("permute_rows", "row index out of range"));
        }
        let data = self.values[a.0].data();
        let mut out = vec![T::ZERO; perm.len() * c];
        for (i, &p) in perm.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&data[p * c..(p + 1) * c]);
        }
        let t = Tensor::from_vec(&[perm.len(), c], out)?;
        Ok(self.push(
            t,
            Op::PermuteRows {
                src: a.0,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_last_dim(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if s.is_empty() {
            return Err(Error::shape("softmax", "rank >= 1", "rank 0".to_string()));
        }
        let d = s[s.len() - 1];
        let rows = self.values[a.0].numel() / d;
        let src = self.values[a.0].data();
        let mut out = vec![T::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut m = row[0];
            for &v in row {
                m = m.max_s(v);
            }
            let mut sum = T::ZERO;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                let e = (v - m).exp();
                *o = e;
                sum += e;
            }
            for o in &mut out[r * d..(r + 1) * d] {
                *o /= sum;
            }
        }
        let t = Tensor::from_vec(&s, out)?;
        Ok(self.push(t, Op::SoftmaxLastDim(a.0)))
    }

    /// Layer normalization over the last dimension with affine scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if s.is_empty() {
            return Err(Error::shape("layer_norm", "rank >= 1", "rank 0".to_string()));
        }
        let d = s[s.len() - 1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.values[v.0].shape() != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} of [{d}]"),
                    format!("{:?}", self.values[v.0].shape()),
                ));
            }
        }
        let rows = self.values[x.0].numel() / d;
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let epsv = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let mut out = vec![T::ZERO; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean /= dn;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var /= dn;
            let inv = T::ONE / (var + epsv).sqrt();
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Normalize each channel over every other axis (batch/stack statistics),
    /// then apply per-channel scale/shift. Statistics are always computed from
    /// the current activations; there are no running buffers.
    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if channel_axis >= s.len() {
            return Err(Error::arg("channel_norm", format!("axis {channel_axis} out of range")));
        }
        let c = s[channel_axis];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.values[v.0].shape() != [c] {
                return Err(Error::shape(
                    "channel_norm",
                    format!("{name} of [{c}]"),
                    format!("{:?}", self.values[v.0].shape()),
                ));
            }
        }
        let outer: usize = s[..channel_axis].iter().product();
        let inner: usize = s[channel_axis + 1..].iter().product();
        let m = outer * inner;
        if m == 0 {
            return Err(Error::arg("channel_norm", "empty tensor"));
        }
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let epsv = T::from_f64(eps);
        let mv = T::from_f64(m as f64);
        let mut out = vec![T::ZERO; src.len()];
        for j in 0..c {
            let mut mean = T::ZERO;
            for o in 0..outer {
                let base = (o * c + j) * inner;
                for i in 0..inner {
                    mean += src[base + i];
                }
            }
            mean /= mv;
            let mut var = T::ZERO;
            for o in 0..outer {
                let base = (o * c + j) * inner;
                for i in 0..inner {
                    let d = src[base + i] - mean;
                    var += d * d;
                }
            }
            var /= mv;
            let inv = T::ONE / (var + epsv).sqrt();
            for o in 0..outer {
                let base = (o * c + j) * inner;
                for i in 0..inner {
                    out[base + i] = (src[base + i] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let t = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            t,
            Op::ChannelNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channel_axis,
                eps,
            },
        ))
    }

    /// 2D cross-correlation. Input NCHW, kernel OIKhKw, zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape("conv2d", "NCHW and OIKhKw", format!("{xs:?} / {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {}", ks[1]),
                format!("{}", xs[1]),
            ));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = conv_extent(h, kh, stride, pad, "conv2d")?;
        let ow = conv_extent(w, kw, stride, pad, "conv2d")?;
        let xd = self.values[x.0].data();
        let kd = self.values[k.0].data();
        let mut out = vec![T::ZERO; n * cout * oh * ow];
        for bn in 0..n {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::ZERO;
                        for ic in 0..cin {
                            let x_base = (bn * cin + ic) * h * w;
                            let k_base = (oc * cin + ic) * kh * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[x_base + iy as usize * w + ix as usize]
                                        * kd[k_base + ky * kw + kx];
                                }
                            }
                        }
                        out[((bn * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                stride,
                pad,
            },
        ))
    }

    /// 3D cross-correlation. Input NCDHW, kernel OIKdKhKw, zero padding.
    /// Depth is a spatial axis with its own stride/padding.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        if xs.len() != 5 || ks.len() != 5 {
            return Err(Error::shape("conv3d", "NCDHW and OIKdKhKw", format!("{xs:?} / {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::shape(
                "conv3d",
                format!("input channels {}", ks[1]),
                format!("{}", xs[1]),
            ));
        }
        let (n, cin, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (cout, kd_, kh, kw) = (ks[0], ks[2], ks[3], ks[4]);
        let od = conv_extent(d, kd_, stride[0], pad[0], "conv3d")?;
        let oh = conv_extent(h, kh, stride[1], pad[1], "conv3d")?;
        let ow = conv_extent(w, kw, stride[2], pad[2], "conv3d")?;
        let xd = self.values[x.0].data();
        let kdat = self.values[k.0].data();
        let mut out = vec![T::ZERO; n * cout * od * oh * ow];
        for bn in 0..n {
            for oc in 0..cout {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::ZERO;
                            for ic in 0..cin {
                                let x_base = ((bn * cin + ic) * d) * h * w;
                                let k_base = ((oc * cin + ic) * kd_) * kh * kw;
                                for kz in 0..kd_ {
                                    let iz = (oz * stride[0] + kz) as isize - pad[0] as isize;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let iy = (oy * stride[1] + ky) as isize - pad[1] as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride[2] + kx) as isize - pad[2] as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            acc += xd[x_base
                                                + (iz as usize * h + iy as usize) * w
                                                + ix as usize]
                                                * kdat[k_base + (kz * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                            out[(((bn * cout + oc) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, od, oh, ow], out)?;
        Ok(self.push(
            t,
            Op::Conv3d {
                x: x.0,
                k: k.0,
                stride,
                pad,
            },
        ))
    }

    /// Add a bias vector along the last dimension.
    pub fn bias_last_dim(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("bias", "rank >= 1", "rank 0".to_string()))?;
        if self.values[b.0].shape() != [d] {
            return Err(Error::shape(
                "bias",
                format!("[{d}]"),
                format!("{:?}", self.values[b.0].shape()),
            ));
        }
        let bd = self.values[b.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bd[i % d];
        }
        Ok(self.push(out, Op::BiasLastDim { x: x.0, b: b.0 }))
    }

    /// Add a per-channel bias on the given axis.
    pub fn bias_channel(&mut self, x: Var, b: Var, channel_axis: usize) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if channel_axis >= s.len() {
            return Err(Error::arg("bias_channel", format!("axis {channel_axis} out of range")));
        }
        let c = s[channel_axis];
        if self.values[b.0].shape() != [c] {
            return Err(Error::shape(
                "bias_channel",
                format!("[{c}]"),
                format!("{:?}", self.values[b.0].shape()),
            ));
        }
        let inner: usize = s[channel_axis + 1..].iter().product();
        let bd = self.values[b.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bd[(i / inner) % c];
        }
        Ok(self.push(
            out,
            Op::BiasChannel {
                x: x.0,
                b: b.0,
                channel_axis,
            },
        ))
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        win: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let (t, _) = self.pool2d_forward(x, win, stride, pad, true)?;
        Ok(self.push(t, Op::MaxPool2d { x: x.0, win, stride, pad }))
    }

    pub fn avg_pool2d(
        &mut self,
        x: Var,
        win: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    ) -> Result<Var> {
        let (t, _) = self.pool2d_forward(x, win, stride, pad, false)?;
        Ok(self.push(t, Op::AvgPool2d { x: x.0, win, stride, pad }))
    }

    fn pool2d_forward(
        &self,
        x: Var,
        win: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
        is_max: bool,
    ) -> Result<(Tensor<T>, [usize; 2])> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("pool2d", "NCHW", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if win[0] > h + 2 * pad[0] || win[1] > w + 2 * pad[1] {
            return Err(Error::arg("pool2d", format!("window {win:?} exceeds padded input")));
        }
        let oh = conv_extent(h, win[0], stride[0], pad[0], "pool2d")?;
        let ow = conv_extent(w, win[1], stride[1], pad[1], "pool2d")?;
        let xd = self.values[x.0].data();
        let area = T::from_f64((win[0] * win[1]) as f64);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::from_f64(f64::NEG_INFINITY);
                        let mut sum = T::ZERO;
                        for ky in 0..win[0] {
                            let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..win[1] {
                                let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = xd[base + iy as usize * w + ix as usize];
                                if v > best {
                                    best = v;
                                }
                                sum += v;
                            }
                        }
                        out[((bn * c + ch) * oh + oy) * ow + ox] =
                            if is_max { best } else { sum / area };
                    }
                }
            }
        }
        Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, [oh, ow]))
    }

    pub fn max_pool3d(
        &mut self,
        x: Var,
        win: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 5 {
            return Err(Error::shape("pool3d", "NCDHW", format!("{s:?}")));
        }
        let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let od = conv_extent(d, win[0], stride[0], pad[0], "pool3d")?;
        let oh = conv_extent(h, win[1], stride[1], pad[1], "pool3d")?;
        let ow = conv_extent(w, win[2], stride[2], pad[2], "pool3d")?;
        let xd = self.values[x.0].data();
        let mut out = vec![T::ZERO; n * c * od * oh * ow];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * d * h * w;
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = T::from_f64(f64::NEG_INFINITY);
                            for kz in 0..win[0] {
                                let iz = (oz * stride[0] + kz) as isize - pad[0] as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..win[1] {
                                    let iy = (oy * stride[1] + ky) as isize - pad[1] as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..win[2] {
                                        let ix = (ox * stride[2] + kx) as isize - pad[2] as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let v = xd[base
                                            + (iz as usize * h + iy as usize) * w
                                            + ix as usize];
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                            }
                            out[(((bn * c + ch) * od + oz) * oh + oy) * ow + ox] = best;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool3d { x: x.0, win, stride, pad }))
    }

    /// Reduce all spatial axes to one value per channel: NCHW -> (N, C) or
    /// NCDHW -> (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 && s.len() != 5 {
            return Err(Error::shape("global_avg_pool", "NCHW or NCDHW", format!("{s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let sp = T::from_f64(spatial as f64);
        let xd = self.values[x.0].data();
        let mut out = vec![T::ZERO; n * c];
        for i in 0..n * c {
            let mut acc = T::ZERO;
            for j in 0..spatial {
                acc += xd[i * spatial + j];
            }
            out[i] = acc / sp;
        }
        let t = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x.0)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.values[a.0].data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if axis >= s.len() {
            return Err(Error::arg("sum_axis", format!("axis {axis} out of range")));
        }
        let outer: usize = s[..axis].iter().product();
        let ext = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let xd = self.values[a.0].data();
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let t = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x: a.0, axis }))
    }

    /// `out[i, j] = mat[i, j] * scale[i]` for a rank-2 `mat` and rank-1 `scale`.
    pub fn scale_rows(&mut self, mat: Var, scale: Var) -> Result<Var> {
        let ms = self.values[mat.0].shape().to_vec();
        if ms.len() != 2 || self.values[scale.0].shape() != [ms[0]] {
            return Err(Error::shape(
                "scale_rows",
                format!("[r,c] with scale [r], got {ms:?}"),
                format!("{:?}", self.values[scale.0].shape()),
            ));
        }
        let (r, c) = (ms[0], ms[1]);
        let sd = self.values[scale.0].data().to_vec();
        let md = self.values[mat.0].data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = md[i * c + j] * sd[i];
            }
        }
        let t = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(
            t,
            Op::ScaleRows {
                mat: mat.0,
                scale: scale.0,
            },
        ))
    }

    /// `out[i, j] = mat[i, j] - row[j]` for a rank-2 `mat` and rank-1 `row`.
    pub fn sub_row_broadcast(&mut self, mat: Var, row: Var) -> Result<Var> {
        let ms = self.values[mat.0].shape().to_vec();
        if ms.len() != 2 || self.values[row.0].shape() != [ms[1]] {
            return Err(Error::shape(
                "sub_row_broadcast",
                format!("[r,c] with row [c], got {ms:?}"),
                format!("{:?}", self.values[row.0].shape()),
            ));
        }
        let (r, c) = (ms[0], ms[1]);
        let rd = self.values[row.0].data().to_vec();
        let md = self.values[mat.0].data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = md[i * c + j] - rd[j];
            }
        }
        let t = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(
            t,
            Op::SubRowBroadcast {
                mat: mat.0,
                row: row.0,
            },
        ))
    }

    /// Sum of squared off-diagonal entries of a square matrix.
    pub fn sum_off_diag_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("sum_off_diag_sq", "square matrix", format!("{s:?}")));
        }
        let p = s[0];
        let d = self.values[a.0].data();
        let mut acc = T::ZERO;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    acc += d[i * p + j] * d[i * p + j];
                }
            }
        }
        Ok(self.push(Tensor::scalar(acc), Op::SumOffDiagSq(a.0)))
    }

    /// Euclidean norm of each row of a rank-2 tensor. The forward value at a
    /// zero row is exactly 0; the backward pass guards the norm denominator,
    /// returning a zero subgradient at the kink instead of NaN.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("row_norms", "rank 2", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.values[a.0].data();
        let mut out = vec![T::ZERO; r];
        for i in 0..r {
            let mut acc = T::ZERO;
            for j in 0..c {
                acc += d[i * c + j] * d[i * c + j];
            }
            out[i] = acc.sqrt();
        }
        let t = Tensor::from_vec(&[r], out)?;
        Ok(self.push(t, Op::RowNorms(a.0)))
    }

    /// Mean weighted binary cross-entropy on `sigmoid(logits)`, computed in
    /// the stable softplus form. `pos_weight` multiplies the positive-class
    /// term. Labels must be exactly 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], pos_weight: f64) -> Result<Var> {
        let s = self.values[logits.0].shape().to_vec();
        if s.len() != 1 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits [n] with n = {} labels", labels.len()),
                format!("{s:?}"),
            ));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::arg("bce_with_logits", "labels must be 0 or 1"));
        }
        if !(pos_weight > 0.0) {
            return Err(Error::arg("bce_with_logits", "pos_weight must be positive"));
        }
        let n = labels.len();
        let xd = self.values[logits.0].data();
        let mut acc = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let x = xd[i].to_f64();
            if !x.is_finite() {
                return Err(Error::NonFinite("bce_with_logits input".into()));
            }
            let sp_pos = softplus(-x); // -ln(sigmoid(x))
            let sp_neg = softplus(x); // -ln(1 - sigmoid(x))
            acc += y * pos_weight * sp_pos + (1.0 - y) * sp_neg;
        }
        let loss = T::from_f64(acc / n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                labels: labels.to_vec(),
                pos_weight,
            },
        ))
    }

    /// Split each slice of an (S, C, H, W) stack into non-overlapping
    /// `patch`x`patch` tiles, flattened row-major into (S*Gh*Gw, C*patch*patch).
    pub fn img2patches(&mut self, x: Var, patch: usize) -> Result<Var> {
        let s = self.values[x.0].shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("img2patches", "SCHW", format!("{s:?}")));
        }
        let (sn, c, h, w) = (s[0], s[1], s[2], s[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::arg(
                "img2patches",
                format!("patch {patch} does not divide {h}x{w}"),
            ));
        }
        let (gh, gw) = (h / patch, w / patch);
        let rows = sn * gh * gw;
        let cols = c * patch * patch;
        let xd = self.values[x.0].data();
        let mut out = vec![T::ZERO; rows * cols];
        for sl in 0..sn {
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = (sl * gh + gy) * gw + gx;
                    for ch in 0..c {
                        for py in 0..patch {
                            for px in 0..patch {
                                let col = (ch * patch + py) * patch + px;
                                let src =
                                    ((sl * c + ch) * h + gy * patch + py) * w + gx * patch + px;
                                out[row * cols + col] = xd[src];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[rows, cols], out)?;
        Ok(self.push(t, Op::Img2Patches { x: x.0, patch }))
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node
    /// (None where the node does not influence the root).
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor<T>>>> {
        self.backward_with_seed(root, Tensor::filled(self.values[root.0].shape(), T::ONE))
    }

    /// Reverse sweep with an explicit seed gradient for the root node.
    pub fn backward_with_seed(&self, root: Var, seed: Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        if self.values[root.0].numel() != 1 && seed.shape() != self.values[root.0].shape() {
            return Err(Error::shape(
                "backward",
                format!("{:?}", self.values[root.0].shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(grads)
    }

    fn accumulate_parents(&self, node: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], parent: usize, contrib: Tensor<T>) {
            match &mut grads[parent] {
                Some(g) => g.add_scaled_assign(&contrib, T::ONE),
                slot @ None => *slot = Some(contrib),
            }
        }

        match &self.ops[node] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &self.values[*a];
                let bv = &self.values[*b];
                let mut ga = gy.clone();
                for (g, &r) in ga.data_mut().iter_mut().zip(bv.data()) {
                    *g *= r;
                }
                let mut gb = gy.clone();
                for (g, &l) in gb.data_mut().iter_mut().zip(av.data()) {
                    *g *= l;
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, f) => {
                let fv = T::from_f64(*f);
                acc(grads, *a, gy.map(|v| v * fv));
            }
            Op::AddScalar(a) => {
                acc(grads, *a, gy.clone());
            }
            Op::Relu(a) => {
                let av = &self.values[*a];
                let mut g = gy.clone();
                for (gv, &x) in g.data_mut().iter_mut().zip(av.data()) {
                    if x <= T::ZERO {
                        *gv = T::ZERO;
                    }
                }
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let yv = &self.values[node];
                let mut g = gy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(yv.data()) {
                    *gv *= y * (T::ONE - y);
                }
                acc(grads, *a, g);
            }
            Op::Tanh(a) => {
                let yv = &self.values[node];
                let mut g = gy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(yv.data()) {
                    *gv *= T::ONE - y * y;
                }
                acc(grads, *a, g);
            }
            Op::Gelu(a) => {
                let av = &self.values[*a];
                let mut g = gy.clone();
                for (gv, &x) in g.data_mut().iter_mut().zip(av.data()) {
                    *gv *= gelu_tanh_grad(x);
                }
                acc(grads, *a, g);
            }
            Op::Sqrt(a) => {
                let yv = &self.values[node];
                let half = T::from_f64(0.5);
                let mut g = gy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(yv.data()) {
                    *gv *= half / y;
                }
                acc(grads, *a, g);
            }
            Op::Recip(a) => {
                let yv = &self.values[node];
                let mut g = gy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(yv.data()) {
                    *gv *= -(y * y);
                }
                acc(grads, *a, g);
            }
            Op::MatMul(a, b) => {
                let av = &self.values[*a];
                let bv = &self.values[*b];
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // dA = dY * B^T
                let mut da = vec![T::ZERO; m * k];
                let bd = bv.data();
                let gd = gy.data();
                for i in 0..m {
                    for j in 0..n {
                        let g = gd[i * n + j];
                        if g == T::ZERO {
                            continue;
                        }
                        for l in 0..k {
                            da[i * k + l] += g * bd[l * n + j];
                        }
                    }
                }
                // dB = A^T * dY
                let mut db = vec![T::ZERO; k * n];
                let ad = av.data();
                for i in 0..m {
                    for l in 0..k {
                        let a_il = ad[i * k + l];
                        if a_il == T::ZERO {
                            continue;
                        }
                        for j in 0..n {
                            db[l * n + j] += a_il * gd[i * n + j];
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(&[m, k], da).unwrap());
                acc(grads, *b, Tensor::from_vec(&[k, n], db).unwrap());
            }
            Op::Transpose(a) => {
                let (n, m) = (gy.shape()[0], gy.shape()[1]);
                let gd = gy.data();
                let mut g = vec![T::ZERO; m * n];
                for i in 0..n {
                    for j in 0..m {
                        g[j * n + i] = gd[i * m + j];
                    }
                }
                acc(grads, *a, Tensor::from_vec(&[m, n], g).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.values[*a].shape().to_vec();
                acc(grads, *a, gy.reshaped(&shape).unwrap());
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.values[node].shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let gd = gy.data();
                let mut offset = 0usize;
                for p in parts {
                    let ps = self.values[*p].shape().to_vec();
                    let ext = ps[*axis];
                    let mut g = vec![T::ZERO; self.values[*p].numel()];
                    for o in 0..outer {
                        let src_base = (o * total + offset) * inner;
                        let dst_base = o * ext * inner;
                        g[dst_base..dst_base + ext * inner]
                            .copy_from_slice(&gd[src_base..src_base + ext * inner]);
                    }
                    offset += ext;
                    acc(grads, *p, Tensor::from_vec(&ps, g).unwrap());
                }
            }
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => {
                let ss = self.values[*src].shape().to_vec();
                let outer: usize = ss[..*axis].iter().product();
                let inner: usize = ss[*axis + 1..].iter().product();
                let mut g = vec![T::ZERO; self.values[*src].numel()];
                let gd = gy.data();
                for o in 0..outer {
                    let dst_base = (o * ss[*axis] + start) * inner;
                    let src_base = o * len * inner;
                    g[dst_base..dst_base + len * inner]
                        .copy_from_slice(&gd[src_base..src_base + len * inner]);
                }
                acc(grads, *src, Tensor::from_vec(&ss, g).unwrap());
            }
            Op::PermuteRows { src, perm } => {
                let ss = self.values[*src].shape().to_vec();
                let c = ss[1];
                let mut g = vec![T::ZERO; self.values[*src].numel()];
                let gd = gy.data();
                for (i, &p) in perm.iter().enumerate() {
                    for j in 0..c {
                        g[p * c + j] += gd[i * c + j];
                    }
                }
                acc(grads, *src, Tensor::from_vec(&ss, g).unwrap());
            }
            Op::SoftmaxLastDim(a) => {
                let yv = &self.values[node];
                let s = yv.shape();
                let d = s[s.len() - 1];
                let rows = yv.numel() / d;
                let yd = yv.data();
                let gd = gy.data();
                let mut g = vec![T::ZERO; yv.numel()];
                for r in 0..rows {
                    let mut dot = T::ZERO;
                    for j in 0..d {
                        dot += gd[r * d + j] * yd[r * d + j];
                    }
                    for j in 0..d {
                        g[r * d + j] = yd[r * d + j] * (gd[r * d + j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_vec(s, g).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let d = s[s.len() - 1];
                let rows = xv.numel() / d;
                let xd = xv.data();
                let gvals = self.values[*gamma].data();
                let gd = gy.data();
                let epsv = T::from_f64(*eps);
                let dn = T::from_f64(d as f64);
                let mut gx = vec![T::ZERO; xv.numel()];
                let mut ggamma = vec![T::ZERO; d];
                let mut gbeta = vec![T::ZERO; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean /= dn;
                    let mut var = T::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var /= dn;
                    let inv = T::ONE / (var + epsv).sqrt();
                    // xhat, g = dy .* gamma, and the two row means
                    let mut mean_g = T::ZERO;
                    let mut mean_gx = T::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gj = gd[r * d + j] * gvals[j];
                        mean_g += gj;
                        mean_gx += gj * xhat;
                        ggamma[j] += gd[r * d + j] * xhat;
                        gbeta[j] += gd[r * d + j];
                    }
                    mean_g /= dn;
                    mean_gx /= dn;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gj = gd[r * d + j] * gvals[j];
                        gx[r * d + j] = (gj - mean_g - xhat * mean_gx) * inv;
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
                acc(grads, *gamma, Tensor::from_vec(&[d], ggamma).unwrap());
                acc(grads, *beta, Tensor::from_vec(&[d], gbeta).unwrap());
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta: _,
                channel_axis,
                eps,
            } => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let c = s[*channel_axis];
                let outer: usize = s[..*channel_axis].iter().product();
                let inner: usize = s[*channel_axis + 1..].iter().product();
                let m = outer * inner;
                let xd = xv.data();
                let gvals = self.values[*gamma].data();
                let gd = gy.data();
                let epsv = T::from_f64(*eps);
                let mv = T::from_f64(m as f64);
                let mut gx = vec![T::ZERO; xv.numel()];
                let mut ggamma = vec![T::ZERO; c];
                let mut gbeta = vec![T::ZERO; c];
                for j in 0..c {
                    let mut mean = T::ZERO;
                    for o in 0..outer {
                        let base = (o * c + j) * inner;
                        for i in 0..inner {
                            mean += xd[base + i];
                        }
                    }
                    mean /= mv;
                    let mut var = T::ZERO;
                    for o in 0..outer {
                        let base = (o * c + j) * inner;
                        for i in 0..inner {
                            let d = xd[base + i] - mean;
                            var += d * d;
                        }
                    }
                    var /= mv;
                    let inv = T::ONE / (var + epsv).sqrt();
                    let mut mean_g = T::ZERO;
                    let mut mean_gx = T::ZERO;
                    for o in 0..outer {
                        let base = (o * c + j) * inner;
                        for i in 0..inner {
                            let xhat = (xd[base + i] - mean) * inv;
                            let gj = gd[base + i] * gvals[j];
                            mean_g += gj;
                            mean_gx += gj * xhat;
                            ggamma[j] += gd[base + i] * xhat;
                            gbeta[j] += gd[base + i];
                        }
                    }
                    mean_g /= mv;
                    mean_gx /= mv;
                    for o in 0..outer {
                        let base = (o * c + j) * inner;
                        for i in 0..inner {
                            let xhat = (xd[base + i] - mean) * inv;
                            let gj = gd[base + i] * gvals[j];
                            gx[base + i] = (gj - mean_g - xhat * mean_gx) * inv;
                        }
                    }
                }
                let beta_id = match &self.ops[node] {
                    Op::ChannelNorm { beta, .. } => *beta,
                    _ => unreachable!(),
                };
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
                acc(grads, *gamma, Tensor::from_vec(&[c], ggamma).unwrap());
                acc(grads, beta_id, Tensor::from_vec(&[c], gbeta).unwrap());
            }
            Op::Conv2d { x, k, stride, pad } => {
                let xv = &self.values[*x];
                let kv = &self.values[*k];
                let (n, cin, h, w) = {
                    let s = xv.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (cout, kh, kw) = {
                    let s = kv.shape();
                    (s[0], s[2], s[3])
                };
                let (oh, ow) = {
                    let s = self.values[node].shape();
                    (s[2], s[3])
                };
                let xd = xv.data();
                let kd = kv.data();
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                let mut gk = vec![T::ZERO; kv.numel()];
                for bn in 0..n {
                    for oc in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gd[((bn * cout + oc) * oh + oy) * ow + ox];
                                if g == T::ZERO {
                                    continue;
                                }
                                for ic in 0..cin {
                                    let x_base = (bn * cin + ic) * h * w;
                                    let k_base = (oc * cin + ic) * kh * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = x_base + iy as usize * w + ix as usize;
                                            let ki = k_base + ky * kw + kx;
                                            gx[xi] += g * kd[ki];
                                            gk[ki] += g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                acc(grads, *k, Tensor::from_vec(kv.shape(), gk).unwrap());
            }
            Op::Conv3d { x, k, stride, pad } => {
                let xv = &self.values[*x];
                let kv = &self.values[*k];
                let (n, cin, d, h, w) = {
                    let s = xv.shape();
                    (s[0], s[1], s[2], s[3], s[4])
                };
                let (cout, kd_, kh, kw) = {
                    let s = kv.shape();
                    (s[0], s[2], s[3], s[4])
                };
                let (od, oh, ow) = {
                    let s = self.values[node].shape();
                    (s[2], s[3], s[4])
                };
                let xd = xv.data();
                let kdat = kv.data();
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                let mut gk = vec![T::ZERO; kv.numel()];
                for bn in 0..n {
                    for oc in 0..cout {
                        for oz in 0..od {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g =
                                        gd[(((bn * cout + oc) * od + oz) * oh + oy) * ow + ox];
                                    if g == T::ZERO {
                                        continue;
                                    }
                                    for ic in 0..cin {
                                        let x_base = (bn * cin + ic) * d * h * w;
                                        let k_base = (oc * cin + ic) * kd_ * kh * kw;
                                        for kz in 0..kd_ {
                                            let iz =
                                                (oz * stride[0] + kz) as isize - pad[0] as isize;
                                            if iz < 0 || iz >= d as isize {
                                                continue;
                                            }
                                            for ky in 0..kh {
                                                let iy = (oy * stride[1] + ky) as isize
                                                    - pad[1] as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for kx in 0..kw {
                                                    let ix = (ox * stride[2] + kx) as isize
                                                        - pad[2] as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    let xi = x_base
                                                        + (iz as usize * h + iy as usize) * w
                                                        + ix as usize;
                                                    let ki = k_base + (kz * kh + ky) * kw + kx;
                                                    gx[xi] += g * kdat[ki];
                                                    gk[ki] += g * xd[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                acc(grads, *k, Tensor::from_vec(kv.shape(), gk).unwrap());
            }
            Op::BiasLastDim { x, b } => {
                let d = self.values[*b].numel();
                let gd = gy.data();
                let mut gb = vec![T::ZERO; d];
                for (i, &g) in gd.iter().enumerate() {
                    gb[i % d] += g;
                }
                acc(grads, *x, gy.clone());
                acc(grads, *b, Tensor::from_vec(&[d], gb).unwrap());
            }
            Op::BiasChannel { x, b, channel_axis } => {
                let s = self.values[*x].shape().to_vec();
                let c = s[*channel_axis];
                let inner: usize = s[*channel_axis + 1..].iter().product();
                let gd = gy.data();
                let mut gb = vec![T::ZERO; c];
                for (i, &g) in gd.iter().enumerate() {
                    gb[(i / inner) % c] += g;
                }
                acc(grads, *x, gy.clone());
                acc(grads, *b, Tensor::from_vec(&[c], gb).unwrap());
            }
            Op::MaxPool2d { x, win, stride, pad } => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = self.values[node].shape().to_vec();
                let (oh, ow) = (os[2], os[3]);
                let xd = xv.data();
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = T::from_f64(f64::NEG_INFINITY);
                                let mut best_ix = usize::MAX;
                                for ky in 0..win[0] {
                                    let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..win[1] {
                                        let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let idx = base + iy as usize * w + ix as usize;
                                        if xd[idx] > best {
                                            best = xd[idx];
                                            best_ix = idx;
                                        }
                                    }
                                }
                                if best_ix != usize::MAX {
                                    gx[best_ix] += gd[((bn * c + ch) * oh + oy) * ow + ox];
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
            }
            Op::AvgPool2d { x, win, stride, pad } => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let os = self.values[node].shape().to_vec();
                let (oh, ow) = (os[2], os[3]);
                let area = T::from_f64((win[0] * win[1]) as f64);
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gd[((bn * c + ch) * oh + oy) * ow + ox] / area;
                                for ky in 0..win[0] {
                                    let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..win[1] {
                                        let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        gx[base + iy as usize * w + ix as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
            }
            Op::MaxPool3d { x, win, stride, pad } => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
                let os = self.values[node].shape().to_vec();
                let (od, oh, ow) = (os[2], os[3], os[4]);
                let xd = xv.data();
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * d * h * w;
                        for oz in 0..od {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = T::from_f64(f64::NEG_INFINITY);
                                    let mut best_ix = usize::MAX;
                                    for kz in 0..win[0] {
                                        let iz =
                                            (oz * stride[0] + kz) as isize - pad[0] as isize;
                                        if iz < 0 || iz >= d as isize {
                                            continue;
                                        }
                                        for ky in 0..win[1] {
                                            let iy = (oy * stride[1] + ky) as isize
                                                - pad[1] as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..win[2] {
                                                let ix = (ox * stride[2] + kx) as isize
                                                    - pad[2] as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let idx = base
                                                    + (iz as usize * h + iy as usize) * w
                                                    + ix as usize;
                                                if xd[idx] > best {
                                                    best = xd[idx];
                                                    best_ix = idx;
                                                }
                                            }
                                        }
                                    }
                                    if best_ix != usize::MAX {
                                        gx[best_ix] += gd
                                            [(((bn * c + ch) * od + oz) * oh + oy) * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let f = T::ONE / T::from_f64(spatial as f64);
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                for i in 0..n * c {
                    let g = gd[i] * f;
                    for j in 0..spatial {
                        gx[i * spatial + j] = g;
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
            }
            Op::SumAll(a) => {
                let g = gy.item();
                let shape = self.values[*a].shape().to_vec();
                acc(grads, *a, Tensor::filled(&shape, g));
            }
            Op::SumAxis { x, axis } => {
                let s = self.values[*x].shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let ext = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let gd = gy.data();
                let mut gx = vec![T::ZERO; self.values[*x].numel()];
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        for i in 0..inner {
                            gx[base + i] = gd[o * inner + i];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
            }
            Op::ScaleRows { mat, scale } => {
                let mv = &self.values[*mat];
                let sv = &self.values[*scale];
                let (r, c) = (mv.shape()[0], mv.shape()[1]);
                let md = mv.data();
                let sd = sv.data();
                let gd = gy.data();
                let mut gm = vec![T::ZERO; r * c];
                let mut gs = vec![T::ZERO; r];
                for i in 0..r {
                    for j in 0..c {
                        gm[i * c + j] = gd[i * c + j] * sd[i];
                        gs[i] += gd[i * c + j] * md[i * c + j];
                    }
                }
                acc(grads, *mat, Tensor::from_vec(&[r, c], gm).unwrap());
                acc(grads, *scale, Tensor::from_vec(&[r], gs).unwrap());
            }
            Op::SubRowBroadcast { mat, row } => {
                let (r, c) = {
                    let s = self.values[*mat].shape();
                    (s[0], s[1])
                };
                let gd = gy.data();
                let mut grow = vec![T::ZERO; c];
                for i in 0..r {
                    for j in 0..c {
                        grow[j] -= gd[i * c + j];
                    }
                }
                acc(grads, *mat, gy.clone());
                acc(grads, *row, Tensor::from_vec(&[c], grow).unwrap());
            }
            Op::SumOffDiagSq(a) => {
                let av = &self.values[*a];
                let p = av.shape()[0];
                let g = gy.item();
                let two = T::from_f64(2.0);
                let ad = av.data();
                let mut ga = vec![T::ZERO; p * p];
                for i in 0..p {
                    for j in 0..p {
                        if i != j {
                            ga[i * p + j] = two * ad[i * p + j] * g;
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(&[p, p], ga).unwrap());
            }
            Op::RowNorms(a) => {
                let av = &self.values[*a];
                let (r, c) = (av.shape()[0], av.shape()[1]);
                let norms = self.values[node].data();
                let ad = av.data();
                let gd = gy.data();
                let guard = T::from_f64(1e-12);
                let mut ga = vec![T::ZERO; r * c];
                for i in 0..r {
                    let denom = norms[i].max_s(guard);
                    for j in 0..c {
                        ga[i * c + j] = gd[i] * ad[i * c + j] / denom;
                    }
                }
                acc(grads, *a, Tensor::from_vec(&[r, c], ga).unwrap());
            }
            Op::BceWithLogits {
                logits,
                labels,
                pos_weight,
            } => {
                let xv = &self.values[*logits];
                let n = labels.len();
                let g = gy.item().to_f64();
                let mut gx = vec![T::ZERO; n];
                for (i, &y) in labels.iter().enumerate() {
                    let x = xv.data()[i].to_f64();
                    let s = sigmoid_f64(x);
                    let d = y * pos_weight * (s - 1.0) + (1.0 - y) * s;
                    gx[i] = T::from_f64(d * g / n as f64);
                }
                acc(grads, *logits, Tensor::from_vec(&[n], gx).unwrap());
            }
            Op::Img2Patches { x, patch } => {
                let xv = &self.values[*x];
                let s = xv.shape().to_vec();
                let (sn, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (gh, gw) = (h / patch, w / patch);
                let cols = c * patch * patch;
                let gd = gy.data();
                let mut gx = vec![T::ZERO; xv.numel()];
                for sl in 0..sn {
                    for gy_ in 0..gh {
                        for gx_ in 0..gw {
                            let row = (sl * gh + gy_) * gw + gx_;
                            for ch in 0..c {
                                for py in 0..*patch {
                                    for px in 0..*patch {
                                        let col = (ch * patch + py) * patch + px;
                                        let dst = ((sl * c + ch) * h + gy_ * patch + py) * w
                                            + gx_ * patch
                                            + px;
                                        gx[dst] = gd[row * cols + col];
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(&s, gx).unwrap());
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == T::ZERO {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            let o_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                o_row[j] += a_il * b_row[j];
            }
        }
    }
    out
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.leaf(t64(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_all_ones_sums_window() {
        // direct summation oracle: 1+2+3+4 = 10
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = g.leaf(t64(&[1, 1, 2, 2], &[1., 1., 1., 1.]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data()[0], 10.0);
    }

    #[test]
    fn conv2d_output_shape_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 224, 224]));
        let k = g.leaf(Tensor::zeros(&[64, 3, 7, 7]));
        let y = g.conv2d(x, k, 2, 3).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64, 112, 112]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 8, 8]));
        let k = g.leaf(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(g.conv2d(x, k, 1, 1).is_err());
    }

    #[test]
    fn conv3d_with_unit_depth_matches_conv2d_per_slice() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.3 - 2.0).collect();
        let kdata: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.1).collect();
        let x3 = g.leaf(t64(&[1, 1, 2, 4, 4], &data));
        let k3 = g.leaf(t64(&[1, 1, 1, 3, 3], &kdata));
        let y3 = g.conv3d(x3, k3, [1, 1, 1], [0, 1, 1]).unwrap();
        for s in 0..2 {
            let mut g2 = Graph::<f64>::new();
            let x2 = g2.leaf(t64(&[1, 1, 4, 4], &data[s * 16..(s + 1) * 16]));
            let k2 = g2.leaf(t64(&[1, 1, 3, 3], &kdata));
            let y2 = g2.conv2d(x2, k2, 1, 1).unwrap();
            let got = &g.value(y3).data()[s * 16..(s + 1) * 16];
            for (a, b) in got.iter().zip(g2.value(y2).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 1, 2, 3, 3], &vec![1.5; 18]));
        let k = g.leaf(Tensor::zeros(&[2, 1, 1, 2, 2]));
        let y = g.conv3d(x, k, [1, 1, 1], [0, 0, 0]).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[3, 4], &[0.1, 5., -2., 1., 0., 0., 0., 0., 9., 9., 9., 9.]));
        let y = g.softmax_last_dim(x).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(y).data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // equal logits -> uniform rows
        for &v in &g.value(y).data()[4..8] {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_grad_matches_handwritten() {
        // y = sum(A*B) with A 2x2, B 2x2 -> dA = 1 * B^T row sums etc.
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t64(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.leaf(t64(&[2, 2], &[5., 6., 7., 8.]));
        let y = g.matmul(a, b).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        // d/dA_il sum(AB) = sum_j B_lj; B row sums are 11 and 15
        let ga = grads[a.0].as_ref().unwrap();
        assert_eq!(ga.data(), &[11., 15., 11., 15.]);
        let gb = grads[b.0].as_ref().unwrap();
        assert_eq!(gb.data(), &[4., 4., 6., 6.]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 4], &[3., 3., 3., 3.]));
        let gamma = g.leaf(t64(&[4], &[1., 1., 1., 1.]));
        let beta = g.leaf(t64(&[4], &[0.5, 0.5, 0.5, 0.5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn bce_analytic_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1], &[0.0]));
        let l = g.bce_with_logits(x, &[1.0], 1.0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1], &[50.0]));
        let l = g.bce_with_logits(x, &[1.0], 1.0).unwrap();
        let v = g.value(l).item();
        assert!(v.is_finite() && v <= 1e-20, "loss {v}");

        // |logit| = 100 stays finite on both sides
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[100.0, -100.0]));
        let l = g.bce_with_logits(x, &[0.0, 1.0], 3.0).unwrap();
        assert!(g.value(l).item().is_finite());
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2], &[0.0, 1.0]));
        assert!(g.bce_with_logits(x, &[0.0, 0.5], 1.0).is_err());
    }

    #[test]
    fn max_pool_takes_window_max() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.max_pool2d(x, [2, 2], [2, 2], [0, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn global_avg_pool_of_constant_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(&[1, 3, 4, 5], 2.5f64));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3]);
        for &v in g.value(y).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_concat_roundtrip_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let a = g.slice(x, 1, 0, 2).unwrap();
        let b = g.slice(x, 1, 2, 2).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert!(grads[x.0].as_ref().unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn img2patches_shapes_and_inverse_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t64(&[1, 1, 4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>()));
        let p = g.img2patches(x, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 4]);
        // first patch is the top-left 2x2 block
        assert_eq!(&g.value(p).data()[0..4], &[0., 1., 4., 5.]);
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        assert!(grads[x.0].as_ref().unwrap().data().iter().all(|&v| v == 1.0));
    }
}
