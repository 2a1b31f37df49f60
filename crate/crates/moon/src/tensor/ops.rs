//! Forward primitives and their reverse-mode rules.
//!
//! 3D volumes use layout (C, H, W, D) in row-major order; matrices are
//! (rows, cols). Every op validates shapes up front and returns a
//! [`TensorError`] naming the op and the offending shapes.

use super::{accumulate, Node, Op, Result, Tensor, TensorError};

fn vol_index(h: usize, w: usize, d: usize) -> impl Fn(usize, usize, usize, usize) -> usize {
    move |c, x, y, z| ((c * h + x) * w + y) * d + z
}

fn conv_out_dim(inp: usize, ksize: usize, pad: usize, stride: usize) -> usize {
    (inp + 2 * pad - ksize) / stride + 1
}

impl Tensor {
    fn unary(&self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let rg = self.requires_grad();
        self.graph().push(Node {
            shape,
            data,
            requires_grad: rg,
            grad: None,
            op,
        })
    }

    fn binary(&self, other: &Tensor, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph().push(Node {
            shape,
            data,
            requires_grad: rg,
            grad: None,
            op,
        })
    }

    /// Matrix product of (m,k) and (k,n).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other, "matmul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.value();
        let b = other.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.binary(
            other,
            Op::Matmul {
                a: self.id(),
                b: other.id(),
                m,
                k,
                n,
            },
            vec![m, n],
            out,
        ))
    }

    /// Transpose of a (rows, cols) matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let a = self.value();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        Ok(self.unary(
            Op::Transpose {
                a: self.id(),
                rows,
                cols,
            },
            vec![cols, rows],
            out,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other, "add")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.binary(
            other,
            Op::Add {
                a: self.id(),
                b: other.id(),
            },
            sa,
            data,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other, "mul")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.binary(
            other,
            Op::Mul {
                a: self.id(),
                b: other.id(),
            },
            sa,
            data,
        ))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other, "div")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "div",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.binary(
            other,
            Op::Div {
                a: self.id(),
                b: other.id(),
            },
            sa,
            data,
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.value().iter().map(|x| c * x).collect();
        let shape = self.shape();
        self.unary(Op::Scale { a: self.id(), c }, shape, data)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.value().iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape();
        self.unary(Op::Relu { a: self.id() }, shape, data)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .value()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape();
        self.unary(Op::Sigmoid { a: self.id() }, shape, data)
    }

    pub fn ln(&self) -> Tensor {
        let data = self.value().iter().map(|x| x.ln()).collect();
        let shape = self.shape();
        self.unary(Op::Ln { a: self.id() }, shape, data)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(x[idx(l)]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(self.unary(Op::Softmax { a: self.id(), axis }, shape, out))
    }

    /// Per-column standardization of an (n, d) matrix to mean 0 and
    /// population std 1, with an epsilon floor on the std.
    pub fn standardize_features(&self, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(TensorError::Invalid {
                op: "standardize",
                msg: format!("needs an (n>=2, d) matrix, got shape {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value();
        let mut mean = vec![0.0; cols];
        let mut std = vec![0.0; cols];
        for j in 0..cols {
            let mut m = 0.0;
            for i in 0..rows {
                m += x[i * cols + j];
            }
            m /= rows as f64;
            let mut v = 0.0;
            for i in 0..rows {
                let z = x[i * cols + j] - m;
                v += z * z;
            }
            mean[j] = m;
            std[j] = (v / rows as f64).sqrt();
        }
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = (x[i * cols + j] - mean[j]) / (std[j] + eps);
            }
        }
        Ok(self.unary(
            Op::Standardize {
                a: self.id(),
                eps,
                rows,
                cols,
                mean,
                std,
            },
            s,
            out,
        ))
    }

    /// Frobenius norm, as a scalar tensor.
    pub fn frobenius_norm(&self) -> Tensor {
        let n: f64 = self.value().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.unary(Op::FrobNorm { a: self.id() }, vec![1], vec![n])
    }

    /// Tr(AᵀB) = Σᵢⱼ AᵢⱼBᵢⱼ for same-shape A, B, as a scalar tensor.
    pub fn trace_of_gram(&self, other: &Tensor) -> Result<Tensor> {
        self.same_graph(other, "trace_of_gram")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "trace_of_gram",
                lhs: sa,
                rhs: sb,
            });
        }
        let t: f64 = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.binary(
            other,
            Op::TraceGram {
                a: self.id(),
                b: other.id(),
            },
            vec![1],
            vec![t],
        ))
    }

    /// Mean over all entries, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let m: f64 = self.value().iter().sum::<f64>() / n;
        self.unary(Op::Mean { a: self.id() }, vec![1], vec![m])
    }

    /// Sum over all entries (mean times element count).
    pub fn sum(&self) -> Tensor {
        let n = self.numel() as f64;
        self.mean().scale(n)
    }

    /// Mean squared error against a same-shape tensor. Composed from
    /// primitives so it differentiates for free.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }

    /// Affine map of an (n, din) matrix: x·W + b with W (din, dout), b (dout).
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_graph(w, "linear")?;
        self.same_graph(b, "linear")?;
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb != vec![sw[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sw,
                rhs: sb,
            });
        }
        let (n, din, dout) = (sx[0], sx[1], sw[1]);
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let orow = &mut out[i * dout..(i + 1) * dout];
            orow.copy_from_slice(&bv);
            for p in 0..din {
                let xv = x[i * din + p];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wv[p * dout..(p + 1) * dout];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.graph().push(Node {
            shape: vec![n, dout],
            data: out,
            requires_grad: rg,
            grad: None,
            op: Op::Linear {
                x: self.id(),
                w: w.id(),
                b: b.id(),
                n,
                din,
                dout,
            },
        }))
    }

    /// 3D convolution of a (Cin, H, W, D) volume with (Cout, Cin, k, k, k)
    /// weights, zero padding k/2 and one stride for all axes. Output spatial
    /// dims are ceil(input/stride) for odd k.
    pub fn conv3d(&self, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
        self.same_graph(w, "conv3d")?;
        self.same_graph(b, "conv3d")?;
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: "stride must be >= 1".into(),
            });
        }
        let (cin, h, wd, d) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, ksize) = (sw[0], sw[2]);
        if b.shape() != vec![cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: sw,
                rhs: b.shape(),
            });
        }
        let pad = ksize / 2;
        let (oh, ow, od) = (
            conv_out_dim(h, ksize, pad, stride),
            conv_out_dim(wd, ksize, pad, stride),
            conv_out_dim(d, ksize, pad, stride),
        );
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        let xi = vol_index(h, wd, d);
        let mut out = vec![0.0; cout * oh * ow * od];
        let widx = |co: usize, ci: usize, kx: usize, ky: usize, kz: usize| {
            (((co * cin + ci) * ksize + kx) * ksize + ky) * ksize + kz
        };
        let mut oi = 0;
        for co in 0..cout {
            for ox in 0..oh {
                for oy in 0..ow {
                    for oz in 0..od {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            for kx in 0..ksize {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= h {
                                    continue;
                                }
                                for ky in 0..ksize {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= wd {
                                        continue;
                                    }
                                    for kz in 0..ksize {
                                        let iz = (oz * stride + kz) as isize - pad as isize;
                                        if iz < 0 || iz as usize >= d {
                                            continue;
                                        }
                                        acc += x[xi(ci, ix as usize, iy as usize, iz as usize)]
                                            * wv[widx(co, ci, kx, ky, kz)];
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.graph().push(Node {
            shape: vec![cout, oh, ow, od],
            data: out,
            requires_grad: rg,
            grad: None,
            op: Op::Conv3d {
                x: self.id(),
                w: w.id(),
                b: b.id(),
                stride,
                in_dims: [h, wd, d],
                out_dims: [oh, ow, od],
                cin,
                cout,
                ksize,
            },
        }))
    }

    /// Adaptive average pooling of a (C, H, W, D) volume to a target spatial
    /// size. Each output cell averages the bin [⌊i·in/out⌋, ⌈(i+1)·in/out⌉).
    pub fn adaptive_avg_pool3d(&self, target: [usize; 3]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "adaptive_avg_pool3d",
                msg: format!("expected a (C,H,W,D) volume, got shape {s:?}"),
            });
        }
        let in_dims = [s[1], s[2], s[3]];
        for a in 0..3 {
            if target[a] == 0 || target[a] > in_dims[a] {
                return Err(TensorError::Invalid {
                    op: "adaptive_avg_pool3d",
                    msg: format!("target {target:?} incompatible with input dims {in_dims:?}"),
                });
            }
        }
        let c = s[0];
        let x = self.value();
        let xi = vol_index(in_dims[0], in_dims[1], in_dims[2]);
        let mut out = vec![0.0; c * target[0] * target[1] * target[2]];
        let mut oi = 0;
        for ch in 0..c {
            for ox in 0..target[0] {
                let (x0, x1) = pool_bin(ox, in_dims[0], target[0]);
                for oy in 0..target[1] {
                    let (y0, y1) = pool_bin(oy, in_dims[1], target[1]);
                    for oz in 0..target[2] {
                        let (z0, z1) = pool_bin(oz, in_dims[2], target[2]);
                        let mut acc = 0.0;
                        for ix in x0..x1 {
                            for iy in y0..y1 {
                                for iz in z0..z1 {
                                    acc += x[xi(ch, ix, iy, iz)];
                                }
                            }
                        }
                        let count = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                        out[oi] = acc / count;
                        oi += 1;
                    }
                }
            }
        }
        Ok(self.unary(
            Op::AdaptiveAvgPool3d {
                x: self.id(),
                in_dims,
                out_dims: target,
                channels: c,
            },
            vec![c, target[0], target[1], target[2]],
            out,
        ))
    }

    /// Nearest-neighbor resize of a (C, H, W, D) volume; output cell i reads
    /// source index ⌊i·in/out⌋.
    pub fn nearest_interpolate3d(&self, target: [usize; 3]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Invalid {
                op: "nearest_interpolate3d",
                msg: format!("expected a (C,H,W,D) volume, got shape {s:?}"),
            });
        }
        if target.iter().any(|&t| t == 0) {
            return Err(TensorError::Invalid {
                op: "nearest_interpolate3d",
                msg: "target dims must be positive".into(),
            });
        }
        let in_dims = [s[1], s[2], s[3]];
        let c = s[0];
        let x = self.value();
        let xi = vol_index(in_dims[0], in_dims[1], in_dims[2]);
        let mut out = vec![0.0; c * target[0] * target[1] * target[2]];
        let mut oi = 0;
        for ch in 0..c {
            for ox in 0..target[0] {
                let ix = ox * in_dims[0] / target[0];
                for oy in 0..target[1] {
                    let iy = oy * in_dims[1] / target[1];
                    for oz in 0..target[2] {
                        let iz = oz * in_dims[2] / target[2];
                        out[oi] = x[xi(ch, ix, iy, iz)];
                        oi += 1;
                    }
                }
            }
        }
        Ok(self.unary(
            Op::NearestInterp3d {
                x: self.id(),
                in_dims,
                out_dims: target,
                channels: c,
            },
            vec![c, target[0], target[1], target[2]],
            out,
        ))
    }

    /// View of a contiguous range along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::BadAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.unary(
            Op::SliceAxis {
                a: self.id(),
                axis,
                start,
                len,
            },
            oshape,
            out,
        ))
    }

    /// Reinterpret the same data with a new shape (element count preserved).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        // Identity on data; recorded as a scale by 1 so gradients pass through.
        let data = self.value();
        Ok(self.unary(Op::Scale { a: self.id(), c: 1.0 }, shape, data))
    }
}

fn pool_bin(i: usize, inp: usize, out: usize) -> (usize, usize) {
    let start = i * inp / out;
    let end = ((i + 1) * inp).div_ceil(out);
    (start, end)
}

/// Concatenate tensors along `axis`. All other dims must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(TensorError::BadAxis {
            op: "concat",
            axis,
            shape: base,
        });
    }
    let mut total_axis = 0;
    for t in tensors {
        first.same_graph(t, "concat")?;
        let s = t.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base,
                rhs: s,
            });
        }
        total_axis += s[axis];
    }
    let inner: usize = base[axis + 1..].iter().product();
    let outer: usize = base[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    let values: Vec<Vec<f64>> = tensors.iter().map(|t| t.value()).collect();
    let axes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    for o in 0..outer {
        for (v, &al) in values.iter().zip(&axes) {
            let base_i = o * al * inner;
            out.extend_from_slice(&v[base_i..base_i + al * inner]);
        }
    }
    let mut oshape = base;
    oshape[axis] = total_axis;
    let rg = tensors.iter().any(|t| t.requires_grad());
    Ok(first.graph().push(Node {
        shape: oshape,
        data: out,
        requires_grad: rg,
        grad: None,
        op: Op::Concat {
            inputs: tensors.iter().map(|t| t.id()).collect(),
            axis,
        },
    }))
}

/// Propagate the output gradient `g` of node `id` into its parents'
/// working-gradient slots. Parents that do not track gradients are skipped.
pub(crate) fn backprop_node(
    nodes: &mut [Node],
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let op = nodes[id].op.clone();
    let needs = |nodes: &[Node], p: usize| nodes[p].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            if needs(nodes, a) {
                let bv = &nodes[b].data;
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                accumulate(&mut grads[a], &ga, m * k);
            }
            if needs(nodes, b) {
                let av = &nodes[a].data;
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &mut gb[p * n..(p + 1) * n];
                        for (o, gv) in brow.iter_mut().zip(grow) {
                            *o += x * gv;
                        }
                    }
                }
                accumulate(&mut grads[b], &gb, k * n);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if needs(nodes, a) {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        ga[i * cols + j] = g[j * rows + i];
                    }
                }
                accumulate(&mut grads[a], &ga, rows * cols);
            }
        }
        Op::Add { a, b } => {
            if needs(nodes, a) {
                accumulate(&mut grads[a], g, g.len());
            }
            if needs(nodes, b) {
                accumulate(&mut grads[b], g, g.len());
            }
        }
        Op::Mul { a, b } => {
            if needs(nodes, a) {
                let gb: Vec<f64> = g.iter().zip(&nodes[b].data).map(|(g, y)| g * y).collect();
                accumulate(&mut grads[a], &gb, g.len());
            }
            if needs(nodes, b) {
                let ga: Vec<f64> = g.iter().zip(&nodes[a].data).map(|(g, x)| g * x).collect();
                accumulate(&mut grads[b], &ga, g.len());
            }
        }
        Op::Div { a, b } => {
            if needs(nodes, a) {
                let ga: Vec<f64> = g.iter().zip(&nodes[b].data).map(|(g, y)| g / y).collect();
                accumulate(&mut grads[a], &ga, g.len());
            }
            if needs(nodes, b) {
                let gb: Vec<f64> = g
                    .iter()
                    .zip(nodes[a].data.iter().zip(&nodes[b].data))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                accumulate(&mut grads[b], &gb, g.len());
            }
        }
        Op::Scale { a, c } => {
            if needs(nodes, a) {
                let ga: Vec<f64> = g.iter().map(|g| g * c).collect();
                accumulate(&mut grads[a], &ga, g.len());
            }
        }
        Op::Concat { inputs, axis } => {
            let inner: usize = nodes[id].shape[axis + 1..].iter().product();
            let outer: usize = nodes[id].shape[..axis].iter().product();
            let total = nodes[id].shape[axis];
            let mut offset = 0;
            for p in inputs {
                let al = nodes[p].shape[axis];
                if needs(nodes, p) {
                    let mut gp = Vec::with_capacity(outer * al * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + al * inner]);
                    }
                    accumulate(&mut grads[p], &gp, outer * al * inner);
                }
                offset += al;
            }
        }
        Op::SliceAxis {
            a,
            axis,
            start,
            len,
        } => {
            if needs(nodes, a) {
                let shape = &nodes[a].shape;
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let al = shape[axis];
                let mut ga = vec![0.0; nodes[a].data.len()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * al + start) * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::Linear {
            x,
            w,
            b,
            n,
            din,
            dout,
        } => {
            if needs(nodes, x) {
                let wv = &nodes[w].data;
                let mut gx = vec![0.0; n * din];
                for i in 0..n {
                    for p in 0..din {
                        let mut acc = 0.0;
                        for j in 0..dout {
                            acc += g[i * dout + j] * wv[p * dout + j];
                        }
                        gx[i * din + p] = acc;
                    }
                }
                accumulate(&mut grads[x], &gx, n * din);
            }
            if needs(nodes, w) {
                let xv = &nodes[x].data;
                let mut gw = vec![0.0; din * dout];
                for i in 0..n {
                    for p in 0..din {
                        let xval = xv[i * din + p];
                        if xval == 0.0 {
                            continue;
                        }
                        let grow = &g[i * dout..(i + 1) * dout];
                        let wrow = &mut gw[p * dout..(p + 1) * dout];
                        for (o, gv) in wrow.iter_mut().zip(grow) {
                            *o += xval * gv;
                        }
                    }
                }
                accumulate(&mut grads[w], &gw, din * dout);
            }
            if needs(nodes, b) {
                let mut gb = vec![0.0; dout];
                for i in 0..n {
                    for j in 0..dout {
                        gb[j] += g[i * dout + j];
                    }
                }
                accumulate(&mut grads[b], &gb, dout);
            }
        }
        Op::Conv3d {
            x,
            w,
            b,
            stride,
            in_dims,
            out_dims,
            cin,
            cout,
            ksize,
        } => {
            let pad = ksize / 2;
            let [h, wd, d] = in_dims;
            let [oh, ow, od] = out_dims;
            let xi = vol_index(h, wd, d);
            let widx = |co: usize, ci: usize, kx: usize, ky: usize, kz: usize| {
                (((co * cin + ci) * ksize + kx) * ksize + ky) * ksize + kz
            };
            let need_x = needs(nodes, x);
            let need_w = needs(nodes, w);
            let need_b = needs(nodes, b);
            let mut gx = if need_x {
                vec![0.0; nodes[x].data.len()]
            } else {
                Vec::new()
            };
            let mut gw = if need_w {
                vec![0.0; nodes[w].data.len()]
            } else {
                Vec::new()
            };
            let mut gb = if need_b { vec![0.0; cout] } else { Vec::new() };
            {
                let xv = &nodes[x].data;
                let wv = &nodes[w].data;
                let mut oi = 0;
                for co in 0..cout {
                    for ox in 0..oh {
                        for oy in 0..ow {
                            for oz in 0..od {
                                let go = g[oi];
                                oi += 1;
                                if go == 0.0 {
                                    continue;
                                }
                                if need_b {
                                    gb[co] += go;
                                }
                                for ci in 0..cin {
                                    for kx in 0..ksize {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= h {
                                            continue;
                                        }
                                        for ky in 0..ksize {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy as usize >= wd {
                                                continue;
                                            }
                                            for kz in 0..ksize {
                                                let iz =
                                                    (oz * stride + kz) as isize - pad as isize;
                                                if iz < 0 || iz as usize >= d {
                                                    continue;
                                                }
                                                let xid =
                                                    xi(ci, ix as usize, iy as usize, iz as usize);
                                                let wid = widx(co, ci, kx, ky, kz);
                                                if need_w {
                                                    gw[wid] += go * xv[xid];
                                                }
                                                if need_x {
                                                    gx[xid] += go * wv[wid];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if need_x {
                accumulate(&mut grads[x], &gx, gx.len());
            }
            if need_w {
                accumulate(&mut grads[w], &gw, gw.len());
            }
            if need_b {
                accumulate(&mut grads[b], &gb, gb.len());
            }
        }
        Op::AdaptiveAvgPool3d {
            x,
            in_dims,
            out_dims,
            channels,
        } => {
            if needs(nodes, x) {
                let xi = vol_index(in_dims[0], in_dims[1], in_dims[2]);
                let mut gx = vec![0.0; nodes[x].data.len()];
                let mut oi = 0;
                for ch in 0..channels {
                    for ox in 0..out_dims[0] {
                        let (x0, x1) = pool_bin(ox, in_dims[0], out_dims[0]);
                        for oy in 0..out_dims[1] {
                            let (y0, y1) = pool_bin(oy, in_dims[1], out_dims[1]);
                            for oz in 0..out_dims[2] {
                                let (z0, z1) = pool_bin(oz, in_dims[2], out_dims[2]);
                                let count = ((x1 - x0) * (y1 - y0) * (z1 - z0)) as f64;
                                let go = g[oi] / count;
                                oi += 1;
                                for ix in x0..x1 {
                                    for iy in y0..y1 {
                                        for iz in z0..z1 {
                                            gx[xi(ch, ix, iy, iz)] += go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x], &gx, gx.len());
            }
        }
        Op::NearestInterp3d {
            x,
            in_dims,
            out_dims,
            channels,
        } => {
            if needs(nodes, x) {
                let xi = vol_index(in_dims[0], in_dims[1], in_dims[2]);
                let mut gx = vec![0.0; nodes[x].data.len()];
                let mut oi = 0;
                for ch in 0..channels {
                    for ox in 0..out_dims[0] {
                        let ix = ox * in_dims[0] / out_dims[0];
                        for oy in 0..out_dims[1] {
                            let iy = oy * in_dims[1] / out_dims[1];
                            for oz in 0..out_dims[2] {
                                let iz = oz * in_dims[2] / out_dims[2];
                                gx[xi(ch, ix, iy, iz)] += g[oi];
                                oi += 1;
                            }
                        }
                    }
                }
                accumulate(&mut grads[x], &gx, gx.len());
            }
        }
        Op::Softmax { a, axis } => {
            if needs(nodes, a) {
                let shape = &nodes[id].shape;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let y = &nodes[id].data;
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[idx(l)] * y[idx(l)];
                        }
                        for l in 0..len {
                            ga[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::Relu { a } => {
            if needs(nodes, a) {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&nodes[a].data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::Sigmoid { a } => {
            if needs(nodes, a) {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&nodes[id].data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::Ln { a } => {
            if needs(nodes, a) {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&nodes[a].data)
                    .map(|(g, x)| g / x)
                    .collect();
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::Standardize {
            a,
            eps,
            rows,
            cols,
            mean,
            std,
        } => {
            if needs(nodes, a) {
                let xv = &nodes[a].data;
                let nf = rows as f64;
                let mut ga = vec![0.0; xv.len()];
                for j in 0..cols {
                    let s = std[j] + eps;
                    let mut gsum = 0.0;
                    let mut gz = 0.0;
                    for i in 0..rows {
                        let z = xv[i * cols + j] - mean[j];
                        gsum += g[i * cols + j];
                        gz += g[i * cols + j] * z;
                    }
                    let gmean = gsum / nf;
                    // d(std)/dx_k = z_k / (n * std); skip when std underflows.
                    let sigma_term = if std[j] > 1e-300 {
                        gz / (s * s * nf * std[j])
                    } else {
                        0.0
                    };
                    for i in 0..rows {
                        let z = xv[i * cols + j] - mean[j];
                        ga[i * cols + j] = (g[i * cols + j] - gmean) / s - sigma_term * z;
                    }
                }
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::FrobNorm { a } => {
            if needs(nodes, a) {
                let norm = nodes[id].data[0];
                let go = g[0];
                let ga: Vec<f64> = if norm > 0.0 {
                    nodes[a].data.iter().map(|x| go * x / norm).collect()
                } else {
                    vec![0.0; nodes[a].data.len()]
                };
                accumulate(&mut grads[a], &ga, ga.len());
            }
        }
        Op::TraceGram { a, b } => {
            let go = g[0];
            if needs(nodes, a) {
                let ga: Vec<f64> = nodes[b].data.iter().map(|y| go * y).collect();
                accumulate(&mut grads[a], &ga, ga.len());
            }
            if needs(nodes, b) {
                let gb: Vec<f64> = nodes[a].data.iter().map(|x| go * x).collect();
                accumulate(&mut grads[b], &gb, gb.len());
            }
        }
        Op::Mean { a } => {
            if needs(nodes, a) {
                let n = nodes[a].data.len();
                let ga = vec![g[0] / n as f64; n];
                accumulate(&mut grads[a], &ga, n);
            }
        }
    }
}
