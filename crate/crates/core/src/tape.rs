//! Operation-level reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. Nodes are appended in evaluation order, so walking the
//! list backwards is a valid topological order for [`Tape::backward`].
//! Tracked tensors are never mutated in place.

use crate::error::{Error, Result};
use crate::tensor::{gemm_rm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    /// `b`'s shape is a suffix of `a`'s and is repeated over the leading dims.
    AddBroadcast(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        logits: Var,
        targets: Vec<T>,
        pos_weight: T,
    },
    CrossEntropy {
        logits: Var,
        classes: Vec<usize>,
        probs: Vec<T>,
    },
    Gather {
        x: Var,
        indices: Vec<Vec<usize>>,
    },
    PrependRow {
        x: Var,
        row: Var,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records a computation and replays it backwards.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let dinner = c * (one + T::from_f64(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * dinner;
    (value, deriv)
}

fn softplus<T: Scalar>(z: T) -> T {
    // log(1 + e^z) without overflow
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn conv_out(len: usize, k: usize, spec: Conv2dSpec) -> Option<usize> {
    let padded = len + 2 * spec.padding;
    if padded < k || spec.stride == 0 || !(padded - k).is_multiple_of(spec.stride) {
        None
    } else {
        Some((padded - k) / spec.stride + 1)
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfold one image (C×H×W) into a (C·kh·kw)×(Ho·Wo) matrix.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ol..(row + 1) * ol];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let dst_row = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii as usize >= self.h {
                            dst_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, d) in dst_row.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            *d = if jj < 0 || jj as usize >= self.w {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let ol = self.out_len();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ol..(row + 1) * ol];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < self.w {
                                dst[jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    /// A leaf whose gradient is recorded by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ----------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                "add_broadcast",
                format!("{sb:?} is not a suffix of {sa:?}"),
            ));
        }
        let nb = vb.len();
        let bd = vb.data();
        let data = va
            .data()
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| *x + *y))
            .collect();
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.derived(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| *x * c).collect(),
        )?;
        Ok(self.derived(out, Op::Scale(a, c), &[a]))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_constant(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(Error::shape(
                "mul_constant",
                format!("{:?} vs {:?}", va.shape(), c.shape()),
            ));
        }
        let data = va.data().iter().zip(c.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::MulConst(a, c.into_data()), &[a]))
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = va.len() / k;
        let mut data = vec![T::zero(); m * n];
        gemm_rm(m, k, n, va.data(), false, vb.data(), false, &mut data, false);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with `b[B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let bad = || Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut data = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_rm(
                m,
                k,
                n,
                &va.data()[i * m * k..(i + 1) * m * k],
                false,
                &vb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(vec![batch, m, n], data)?;
        Ok(self.derived(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let n = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Softmax(a), &[a]))
    }

    /// Per-row normalisation over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    vx.shape(),
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let eps = T::from_f64(LN_EPS);
        let dn = T::from_f64(d as f64);
        let rows = vx.len() / d;
        let mut normed = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / dn;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                normed[r * d + j] = xh;
                data[r * d + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| gelu_parts(x).0).collect(),
        )?;
        Ok(self.derived(out, Op::Gelu(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x.max(T::zero())).collect(),
        )?;
        Ok(self.derived(out, Op::Relu(a), &[a]))
    }

    /// Cross-correlation with zero padding. `x` is `[C,H,W]` or `[B,C,H,W]`,
    /// `w` is `[O,C,kh,kw]`, `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape().to_vec(), vw.shape().to_vec());
        let (batch, xs) = match sx.len() {
            3 => (1, &sx[..]),
            4 => (sx[0], &sx[1..]),
            _ => return Err(Error::shape("conv2d", format!("input {sx:?}"))),
        };
        if sw.len() != 4 || sw[1] != xs[0] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} outputs", self.value(b).shape(), sw[0]),
                ));
            }
        }
        let (ho, wo) = match (conv_out(xs[1], sw[2], spec), conv_out(xs[2], sw[3], spec)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "non-integral output for input {sx:?}, kernel {sw:?}, stride {}, padding {}",
                        spec.stride, spec.padding
                    ),
                ))
            }
        };
        let g = ConvGeom {
            c: xs[0],
            h: xs[1],
            w: xs[2],
            kh: sw[2],
            kw: sw[3],
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        };
        let o = sw[0];
        let in_len = g.c * g.h * g.w;
        let mut cols = vec![T::zero(); g.patch_len() * g.out_len()];
        let mut data = vec![T::zero(); batch * o * g.out_len()];
        for bi in 0..batch {
            g.im2col(&vx.data()[bi * in_len..(bi + 1) * in_len], &mut cols);
            let dst = &mut data[bi * o * g.out_len()..(bi + 1) * o * g.out_len()];
            gemm_rm(o, g.patch_len(), g.out_len(), vw.data(), false, &cols, false, dst, false);
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(g.out_len()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let shape = if sx.len() == 3 {
            vec![o, ho, wo]
        } else {
            vec![batch, o, ho, wo]
        };
        let out = Tensor::new(shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.derived(out, Op::Conv2d { x, w, bias, spec }, &inputs))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_f64(hw as f64);
        let data = va
            .data()
            .chunks(hw)
            .map(|c| c.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.derived(out, Op::GlobalAvgPool(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(self.derived(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::from_f64(va.len() as f64);
        Ok(self.derived(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Mean binary cross-entropy on logits. `pos_weight` scales the positive term (1 = unweighted).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], pos_weight: T) -> Result<Var> {
        let vz = self.value(logits);
        if vz.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", vz.len(), targets.len()),
            ));
        }
        let mut total = T::zero();
        for (&z, &y) in vz.data().iter().zip(targets) {
            total += pos_weight * y * softplus(-z) + (T::one() - y) * softplus(z);
        }
        let loss = total / T::from_f64(targets.len() as f64);
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[class]`; `logits` is `[C]` or `[B,C]`.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let vz = self.value(logits);
        let c = *vz.shape().last().unwrap();
        let rows = vz.len() / c;
        if rows != classes.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows vs {} labels", classes.len()),
            ));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of range for {c} logits"
            )));
        }
        let mut probs = vz.data().to_vec();
        let mut total = T::zero();
        for (row, (chunk, &k)) in vz.data().chunks(c).zip(classes).enumerate() {
            let max = chunk.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = chunk.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            total += lse - chunk[k];
            softmax_in_place(&mut probs[row * c..(row + 1) * c]);
        }
        let loss = total / T::from_f64(rows as f64);
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                classes: classes.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Row gather `[B,N,D] -> [B,k,D]`; gradients scatter back to the selected rows only.
    pub fn gather_rows(&mut self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || indices.len() != s[0] {
            return Err(Error::shape(
                "gather_rows",
                format!("input {s:?} with {} index lists", indices.len()),
            ));
        }
        let (n, d) = (s[1], s[2]);
        let k = indices.first().map_or(0, |v| v.len());
        for list in indices {
            check_index_list(list, n, k)?;
        }
        let mut data = Vec::with_capacity(s[0] * k * d);
        for (b, list) in indices.iter().enumerate() {
            for &i in list {
                data.extend_from_slice(&vx.data()[(b * n + i) * d..(b * n + i + 1) * d]);
            }
        }
        let out = Tensor::new(vec![s[0], k, d], data)?;
        Ok(self.derived(
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// `[B,n,D]` with a shared `[D]` row prepended to every batch item.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let s = vx.shape();
        if s.len() != 3 || vr.shape() != [s[2]] {
            return Err(Error::shape(
                "prepend_row",
                format!("{s:?} with row {:?}", vr.shape()),
            ));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(vr.data());
            data.extend_from_slice(&vx.data()[bi * n * d..(bi + 1) * n * d]);
        }
        let out = Tensor::new(vec![b, n + 1, d], data)?;
        Ok(self.derived(out, Op::PrependRow { x, row }, &[x, row]))
    }

    /// `[B,S,D] -> [B,D]` taking sequence position `row`.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || row >= s[1] {
            return Err(Error::shape("select_row", format!("row {row} of {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(&vx.data()[(bi * n + row) * d..(bi * n + row + 1) * d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        Ok(self.derived(out, Op::SelectRow { x, row }, &[x]))
    }

    /// `[B,S,H·dh] -> [B·H,S,dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut data = vec![T::zero(); vx.len()];
        permute_heads(vx.data(), &mut data, b, n, heads, dh, false);
        let out = Tensor::new(vec![b * heads, n, dh], data)?;
        Ok(self.derived(out, Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[B·H,S,dh] -> [B,S,H·dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", format!("{s:?} from {heads} heads")));
        }
        let (bh, n, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let mut data = vec![T::zero(); vx.len()];
        permute_heads(vx.data(), &mut data, b, n, heads, dh, true);
        let out = Tensor::new(vec![b, n, heads * dh], data)?;
        Ok(self.derived(out, Op::MergeHeads { x, heads }, &[x]))
    }

    // ------------------------------------------------------------ backward

    /// Accumulate `∂loss/∂v` into every tracked node. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut pass: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pass[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut pass);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pass: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let tracked = |v: Var| nodes[v.0].tracked;
        // Returns the gradient buffer for an input, or None when it is untracked.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !tracked(v) {
                return;
            }
            let buf = pass[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                with(*b, &mut |d| add_into(d, g));
            }
            Op::AddBroadcast(a, b) => {
                with(*a, &mut |d| add_into(d, g));
                let nb = val(*b).len();
                with(*b, &mut |d| {
                    for chunk in g.chunks(nb) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Scale(a, c) => with(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *c)
            }),
            Op::MulConst(a, c) => with(*a, &mut |d| {
                d.iter_mut().zip(g.iter().zip(c)).for_each(|(x, (y, m))| *x += *y * *m)
            }),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k;
                with(*a, &mut |d| gemm_rm(m, n, k, g, false, vb.data(), true, d, true));
                with(*b, &mut |d| gemm_rm(k, m, n, va.data(), true, g, false, d, true));
            }
            Op::Bmm { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = if *trans_b { vb.shape()[1] } else { vb.shape()[2] };
                with(*a, &mut |d| {
                    for bi in 0..batch {
                        gemm_rm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &vb.data()[bi * k * n..(bi + 1) * k * n],
                            !*trans_b,
                            &mut d[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                });
                with(*b, &mut |d| {
                    for bi in 0..batch {
                        let ga = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let db = &mut d[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_rm(n, m, k, ga, true, aa, false, db, true);
                        } else {
                            gemm_rm(k, m, n, aa, true, ga, false, db, true);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &nodes[i].value;
                let n = *y.shape().last().unwrap();
                with(*a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.data().chunks(n)).zip(g.chunks(n)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (p, q)| acc + *p * *q);
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let gd = val(*gamma).data();
                let d = gd.len();
                with(*gamma, &mut |dg| {
                    for (gr, nr) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * nr[j];
                        }
                    }
                });
                with(*beta, &mut |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
                let dn = T::from_f64(d as f64);
                with(*x, &mut |dx| {
                    for (r, (gr, nr)) in g.chunks(d).zip(normed.chunks(d)).enumerate() {
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gd[j];
                            mean_g += gh;
                            mean_gx += gh * nr[j];
                        }
                        mean_g = mean_g / dn;
                        mean_gx = mean_gx / dn;
                        for j in 0..d {
                            let gh = gr[j] * gd[j];
                            dx[r * d + j] += rstd[r] * (gh - mean_g - nr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xa = val(*a).data();
                with(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * gelu_parts(xa[j]).1;
                    }
                });
            }
            Op::Relu(a) => {
                let xa = val(*a).data();
                with(*a, &mut |d| {
                    for j in 0..d.len() {
                        if xa[j] > T::zero() {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, bias, spec } => {
                let (vx, vw) = (val(*x), val(*w));
                let sx = vx.shape();
                let (batch, xs) = if sx.len() == 3 { (1, sx) } else { (sx[0], &sx[1..]) };
                let sw = vw.shape();
                let out = nodes[i].value.shape();
                let (ho, wo) = (out[out.len() - 2], out[out.len() - 1]);
                let geom = ConvGeom {
                    c: xs[0],
                    h: xs[1],
                    w: xs[2],
                    kh: sw[2],
                    kw: sw[3],
                    ho,
                    wo,
                    stride: spec.stride,
                    pad: spec.padding,
                };
                let o = sw[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let in_len = geom.c * geom.h * geom.w;
                if let Some(b) = bias {
                    with(*b, &mut |db| {
                        for gb in g.chunks(o * ol) {
                            for (oc, chunk) in gb.chunks(ol).enumerate() {
                                db[oc] += chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                            }
                        }
                    });
                }
                let mut cols = vec![T::zero(); pl * ol];
                if tracked(*w) {
                    with(*w, &mut |dw| {
                        for bi in 0..batch {
                            geom.im2col(&vx.data()[bi * in_len..(bi + 1) * in_len], &mut cols);
                            gemm_rm(o, ol, pl, &g[bi * o * ol..(bi + 1) * o * ol], false, &cols, true, dw, true);
                        }
                    });
                }
                with(*x, &mut |dx| {
                    for bi in 0..batch {
                        gemm_rm(pl, o, ol, vw.data(), true, &g[bi * o * ol..(bi + 1) * o * ol], false, &mut cols, false);
                        geom.col2im(&cols, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_f64(hw as f64);
                with(*a, &mut |d| {
                    for (chunk, &gv) in d.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += gv * inv);
                    }
                });
            }
            Op::Reshape(a) => with(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => with(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = T::from_f64(val(*a).len() as f64);
                with(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Bce {
                logits,
                targets,
                pos_weight,
            } => {
                let z = val(*logits).data();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                with(*logits, &mut |d| {
                    for j in 0..d.len() {
                        let s = sigmoid(z[j]);
                        let y = targets[j];
                        d[j] += scale * (*pos_weight * y * (s - T::one()) + (T::one() - y) * s);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                classes,
                probs,
            } => {
                let c = probs.len() / classes.len();
                let scale = g[0] / T::from_f64(classes.len() as f64);
                with(*logits, &mut |d| {
                    for (row, &k) in classes.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == k { T::one() } else { T::zero() };
                            d[row * c + j] += scale * (probs[row * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                let s = val(*x).shape();
                let (n, dd) = (s[1], s[2]);
                let k = indices.first().map_or(0, |v| v.len());
                with(*x, &mut |d| {
                    for (b, list) in indices.iter().enumerate() {
                        for (slot, &idx) in list.iter().enumerate() {
                            let src = &g[(b * k + slot) * dd..(b * k + slot + 1) * dd];
                            add_into(&mut d[(b * n + idx) * dd..(b * n + idx + 1) * dd], src);
                        }
                    }
                });
            }
            Op::PrependRow { x, row } => {
                let s = val(*x).shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                with(*row, &mut |dr| {
                    for bi in 0..b {
                        add_into(dr, &g[bi * (n + 1) * d..][..d]);
                    }
                });
                with(*x, &mut |dx| {
                    for bi in 0..b {
                        add_into(
                            &mut dx[bi * n * d..(bi + 1) * n * d],
                            &g[(bi * (n + 1) + 1) * d..(bi + 1) * (n + 1) * d],
                        );
                    }
                });
            }
            Op::SelectRow { x, row } => {
                let s = val(*x).shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                with(*x, &mut |dx| {
                    for bi in 0..b {
                        add_into(&mut dx[(bi * n + row) * d..][..d], &g[bi * d..(bi + 1) * d]);
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = val(*x).shape();
                let (b, n, d) = (s[0], s[1], s[2]);
                with(*x, &mut |dx| {
                    let mut tmp = vec![T::zero(); dx.len()];
                    permute_heads(g, &mut tmp, b, n, *heads, d / heads, true);
                    add_into(dx, &tmp);
                });
            }
            Op::MergeHeads { x, heads } => {
                let s = val(*x).shape();
                let (bh, n, dh) = (s[0], s[1], s[2]);
                with(*x, &mut |dx| {
                    let mut tmp = vec![T::zero(); dx.len()];
                    permute_heads(g, &mut tmp, bh / heads, n, *heads, dh, false);
                    add_into(dx, &tmp);
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `[B,S,H,dh] <-> [B,H,S,dh]`. `inverse = false` splits, `true` merges.
fn permute_heads<T: Scalar>(
    src: &[T],
    dst: &mut [T],
    b: usize,
    n: usize,
    heads: usize,
    dh: usize,
    inverse: bool,
) {
    for bi in 0..b {
        for s in 0..n {
            for h in 0..heads {
                let merged = ((bi * n + s) * heads + h) * dh;
                let split = ((bi * heads + h) * n + s) * dh;
                let (from, to) = if inverse { (split, merged) } else { (merged, split) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

/// Indices must be in range and free of duplicates; all lists share one length.
pub(crate) fn check_index_list(list: &[usize], n: usize, k: usize) -> Result<()> {
    if list.len() != k {
        return Err(Error::InvalidArgument(format!(
            "index lists have different lengths ({} vs {k})",
            list.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in list {
        if i >= n {
            return Err(Error::InvalidArgument(format!(
                "patch index {i} out of range for {n} patches"
            )));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!("duplicate patch index {i}")));
        }
    }
    Ok(())
}
