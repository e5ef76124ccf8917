use super::conv::{self, ConvGeometry};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization source for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with statistics of the current batch.
    Train { eps: T },
    /// Normalize with externally tracked running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n-1) variance, the quantity folded into running estimates.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    PRelu {
        x: Var,
        alpha: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Replicate {
        x: Var,
        copies: usize,
    },
    GroupSum {
        x: Var,
        groups: usize,
    },
    SignRows(Var),
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        x: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    leaf_grad: Option<Vec<T>>,
    param: Option<usize>,
}

/// Tape of recorded operations. Node order is creation order, which is a
/// topological order of the data flow.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel extent and per-channel inner size of a `[B, C, ...]` tensor.
fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::Rank {
            op,
            expected: 2,
            got: shape.len(),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::Shape {
            op,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            leaf_grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf holding a copy of a stored `f32` parameter, tagged with `id` so
    /// gradients can be routed back with [`Graph::param_grads`].
    pub fn param(&mut self, value: &Tensor<f32>, id: usize, requires_grad: bool) -> Var {
        let v = self.push(value.cast(), Op::Leaf, requires_grad);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    /// `(param id, gradient)` for every parameter leaf reached by backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.leaf_grad.as_deref()?)))
    }

    fn unary_map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.needs(x);
        self.push(value, op, rg)
    }

    fn binary_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(name, va.shape(), vb.shape())?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary_map(x, Op::Scale(x, c), |v| v * c)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                got: if sa.len() != 2 { sa.len() } else { sb.len() },
            });
        }
        if sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                expected: vec![sa[1], sb[1]],
                got: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        // SAFETY: row-major extents match the slice lengths checked above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                da.as_ptr(),
                k as isize,
                1,
                db.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Fully connected layer: `x [B, in]`, `w [out, in]`, `b [out]` -> `[B, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 {
            return Err(TensorError::Rank {
                op: "dense",
                expected: 2,
                got: sx.len(),
            });
        }
        if sw.len() != 2 || sw[1] != sx[1] {
            return Err(TensorError::Shape {
                op: "dense",
                expected: vec![sw.first().copied().unwrap_or(0), sx[1]],
                got: sw,
            });
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            same_shape("dense bias", &[out], self.shape(b))?;
        }
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bias);
            }
        }
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        // SAFETY: w is read transposed through its strides; extents checked above.
        unsafe {
            T::gemm(
                batch,
                inp,
                out,
                T::one(),
                dx.as_ptr(),
                inp as isize,
                1,
                dw.as_ptr(),
                1,
                inp as isize,
                T::one(),
                y.as_mut_ptr(),
                out as isize,
                1,
            );
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new([batch, out], y)?,
            Op::Dense {
                x,
                w,
                b,
                batch,
                inp,
                out,
            },
            rg,
        ))
    }

    /// Grouped stride-1 convolution of `x [B, C, H, W]` with
    /// `w [O, C/groups, kh, kw]`, zero padded by `padding = (ph, pw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                got: sx.len(),
            });
        }
        if sw.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d weight",
                expected: 4,
                got: sw.len(),
            });
        }
        let geo = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            groups,
            pad_h: padding.0,
            pad_w: padding.1,
        };
        geo.validate()?;
        if sw[1] != geo.in_per_group() {
            return Err(TensorError::Shape {
                op: "conv2d weight",
                expected: geo.weight_shape().to_vec(),
                got: sw,
            });
        }
        if let Some(b) = b {
            same_shape("conv2d bias", &[geo.out_channels], self.shape(b))?;
        }
        let y = conv::forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(geo.out_shape(), y)?,
            Op::Conv2d { x, w, b, geo },
            rg,
        ))
    }

    /// Per-channel batch normalization of a `[B, C, ...]` tensor. In training
    /// mode the observed batch statistics are returned for running-average
    /// bookkeeping.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (batch, ch, inner) = channel_layout("batch_norm", self.shape(x))?;
        same_shape("batch_norm gamma", &[ch], self.shape(gamma))?;
        same_shape("batch_norm beta", &[ch], self.shape(beta))?;
        let xd = self.value(x).data();
        let count = batch * inner;
        let (mean, inv_std, stats, train) = match mode {
            BnMode::Train { eps } => {
                let mut sum = vec![0f64; ch];
                for (j, plane) in xd.chunks_exact(inner).enumerate() {
                    sum[j % ch] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
                let mut sq = vec![0f64; ch];
                for (j, plane) in xd.chunks_exact(inner).enumerate() {
                    let m = mean[j % ch];
                    sq[j % ch] += plane
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::of_f64(1.0 / (v + eps.as_f64()).sqrt()))
                    .collect();
                let unbiased = var
                    .iter()
                    .map(|&v| {
                        if count > 1 {
                            v * count as f64 / (count - 1) as f64
                        } else {
                            v
                        }
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                let mean = mean.into_iter().map(T::of_f64).collect();
                (mean, inv_std, Some(stats), true)
            }
            BnMode::Eval { mean, var, eps } => {
                same_shape("batch_norm running mean", &[ch], &[mean.len()])?;
                same_shape("batch_norm running var", &[ch], &[var.len()])?;
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = Vec::with_capacity(xd.len());
        for (j, plane) in xd.chunks_exact(inner).enumerate() {
            let c = j % ch;
            let (m, k, sh) = (mean[c], inv_std[c] * g[c], b[c]);
            data.extend(plane.iter().map(|&v| (v - m) * k + sh));
        }
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Parametric ReLU with one slope per channel, or a single shared slope
    /// when `alpha` has one element.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (_, ch, inner) = channel_layout("prelu", self.shape(x))?;
        let na = self.value(alpha).len();
        if na != ch && na != 1 {
            return Err(TensorError::Shape {
                op: "prelu",
                expected: vec![ch],
                got: self.shape(alpha).to_vec(),
            });
        }
        let a = self.value(alpha).data();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        for (j, plane) in xd.chunks_exact(inner).enumerate() {
            let s = a[if na == 1 { 0 } else { j % ch }];
            data.extend(
                plane
                    .iter()
                    .map(|&v| if v >= T::zero() { v } else { s * v }),
            );
        }
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        let rg = self.needs(x) || self.needs(alpha);
        Ok(self.push(value, Op::PRelu { x, alpha }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary_map(x, Op::LeakyRelu { x, slope }, |v| {
            if v >= T::zero() {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_map(
            x,
            Op::Relu(x),
            |v| if v >= T::zero() { v } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[B, C, ...] -> [B, copies*C, ...]`; copy `n` occupies channels
    /// `n*C .. (n+1)*C`.
    pub fn replicate_channels(&mut self, x: Var, copies: usize) -> Result<Var> {
        let (batch, ch, inner) = channel_layout("replicate_channels", self.shape(x))?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * copies);
        for b in 0..batch {
            let sample = &src[b * ch * inner..(b + 1) * ch * inner];
            for _ in 0..copies {
                data.extend_from_slice(sample);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = ch * copies;
        let rg = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Replicate { x, copies }, rg))
    }

    /// `[B, groups*C, ...] -> [B, C, ...]` summing the channel groups.
    pub fn group_sum(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (batch, ch, inner) = channel_layout("group_sum", self.shape(x))?;
        if groups == 0 || ch % groups != 0 {
            return Err(TensorError::Groups {
                op: "group_sum",
                channels: ch,
                groups,
            });
        }
        let per = ch / groups;
        let block = per * inner;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); batch * block];
        for b in 0..batch {
            let dst = &mut data[b * block..(b + 1) * block];
            for g in 0..groups {
                let s = &src[(b * groups + g) * block..(b * groups + g + 1) * block];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d = *d + v;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = per;
        let rg = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::GroupSum { x, groups }, rg))
    }

    /// Row-wise scaled sign of a `[rows, cols]` latent matrix:
    /// `alpha_r * sign(w_rc)` with `alpha_r = mean_c |w_rc|` and `sign(0) = +1`.
    /// The backward pass is the clipped straight-through estimator: the
    /// upstream gradient is copied where `|w| <= 1` and zeroed elsewhere.
    pub fn sign_rows(&mut self, latent: Var) -> Result<Var> {
        let shape = self.shape(latent).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "sign_rows",
                expected: 2,
                got: shape.len(),
            });
        }
        let cols = shape[1];
        let src = self.value(latent).data();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(cols) {
            let alpha = row_scale(row);
            data.extend(
                row.iter()
                    .map(|&w| if w >= T::zero() { alpha } else { -alpha }),
            );
        }
        let rg = self.needs(latent);
        Ok(self.push(Tensor { shape, data }, Op::SignRows(latent), rg))
    }

    /// Applies `f` elementwise in the forward pass and passes the gradient
    /// through unchanged in the backward pass.
    pub fn straight_through(&mut self, x: Var, f: impl Fn(T) -> T) -> Var {
        self.unary_map(x, Op::StraightThrough(x), f)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s: f64 = d.iter().map(|v| v.as_f64()).sum::<f64>() / d.len() as f64;
        let rg = self.needs(x);
        self.push(Tensor::scalar(T::of_f64(s)), Op::Mean(x), rg)
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, x: Var, target: Var) -> Result<Var> {
        same_shape("mse_loss", self.shape(x), self.shape(target))?;
        let (a, b) = (self.value(x).data(), self.value(target).data());
        let s: f64 = a
            .iter()
            .zip(b)
            .map(|(&p, &q)| {
                let d = p.as_f64() - q.as_f64();
                d * d
            })
            .sum::<f64>()
            / a.len() as f64;
        let rg = self.needs(x) || self.needs(target);
        Ok(self.push(Tensor::scalar(T::of_f64(s)), Op::Mse { x, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.leaf_grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    None => node.leaf_grad = Some(g),
                }
                continue;
            }
            self.propagate(idx, g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
            None => grads[v.0] = Some(contrib),
        }
    }

    fn propagate(&self, idx: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.send(grads, *b, g.iter().map(|&v| -v).collect());
                }
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.send(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    self.send(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.send(grads, *x, g.into_iter().map(|d| d * c).collect());
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut ga = vec![T::zero(); m * k];
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            g.as_ptr(),
                            n as isize,
                            1,
                            vb.as_ptr(),
                            1,
                            n as isize,
                            T::zero(),
                            ga.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    self.send(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut gb = vec![T::zero(); k * n];
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            va.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            T::zero(),
                            gb.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Dense {
                x,
                w,
                b,
                batch,
                inp,
                out,
            } => {
                let (batch, inp, out) = (*batch, *inp, *out);
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![T::zero(); out];
                        for row in g.chunks_exact(out) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                        self.send(grads, *b, gb);
                    }
                }
                if self.needs(*w) {
                    // dW = dY^T * X  ([out, B] x [B, in])
                    let xd = self.value(*x).data();
                    let mut gw = vec![T::zero(); out * inp];
                    unsafe {
                        T::gemm(
                            out,
                            batch,
                            inp,
                            T::one(),
                            g.as_ptr(),
                            1,
                            out as isize,
                            xd.as_ptr(),
                            inp as isize,
                            1,
                            T::zero(),
                            gw.as_mut_ptr(),
                            inp as isize,
                            1,
                        );
                    }
                    self.send(grads, *w, gw);
                }
                if self.needs(*x) {
                    // dX = dY * W  ([B, out] x [out, in])
                    let wd = self.value(*w).data();
                    let mut gx = vec![T::zero(); batch * inp];
                    unsafe {
                        T::gemm(
                            batch,
                            out,
                            inp,
                            T::one(),
                            g.as_ptr(),
                            out as isize,
                            1,
                            wd.as_ptr(),
                            inp as isize,
                            1,
                            T::zero(),
                            gx.as_mut_ptr(),
                            inp as isize,
                            1,
                        );
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::Conv2d { x, w, b, geo } => {
                if let Some(b) = b {
                    if self.needs(*b) {
                        let plane = geo.out_h() * geo.out_w();
                        let mut gb = vec![T::zero(); geo.out_channels];
                        for (i, chunk) in g.chunks_exact(plane).enumerate() {
                            let s: T = chunk.iter().copied().sum();
                            gb[i % geo.out_channels] = gb[i % geo.out_channels] + s;
                        }
                        self.send(grads, *b, gb);
                    }
                }
                let (nx, nw) = (self.needs(*x), self.needs(*w));
                if nx || nw {
                    let (gx, gw) = conv::backward(
                        geo,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                        nx,
                        nw,
                    );
                    if let Some(gx) = gx {
                        self.send(grads, *x, gx);
                    }
                    if let Some(gw) = gw {
                        self.send(grads, *w, gw);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let xv = self.value(*x);
                let (batch, ch, inner) =
                    channel_layout("batch_norm", xv.shape()).expect("validated in forward");
                let count = (batch * inner) as f64;
                let xd = xv.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0f64; ch];
                let mut sum_gx = vec![0f64; ch];
                for (j, (gp, xp)) in g
                    .chunks_exact(inner)
                    .zip(xd.chunks_exact(inner))
                    .enumerate()
                {
                    let c = j % ch;
                    let (m, is) = (mean[c], inv_std[c]);
                    let (mut sg, mut sgx) = (0f64, 0f64);
                    for (&d, &v) in gp.iter().zip(xp) {
                        sg += d.as_f64();
                        sgx += (d * ((v - m) * is)).as_f64();
                    }
                    sum_g[c] += sg;
                    sum_gx[c] += sgx;
                }
                if self.needs(*gamma) {
                    self.send(
                        grads,
                        *gamma,
                        sum_gx.iter().map(|&v| T::of_f64(v)).collect(),
                    );
                }
                if self.needs(*beta) {
                    self.send(grads, *beta, sum_g.iter().map(|&v| T::of_f64(v)).collect());
                }
                if self.needs(*x) {
                    let gx = if *train {
                        let mg: Vec<T> = sum_g.iter().map(|&s| T::of_f64(s / count)).collect();
                        let mgx: Vec<T> = sum_gx.iter().map(|&s| T::of_f64(s / count)).collect();
                        let mut gx = Vec::with_capacity(g.len());
                        for (j, (gp, xp)) in g
                            .chunks_exact(inner)
                            .zip(xd.chunks_exact(inner))
                            .enumerate()
                        {
                            let c = j % ch;
                            let (m, is, k) = (mean[c], inv_std[c], gam[c] * inv_std[c]);
                            let (a, b) = (mg[c], mgx[c]);
                            gx.extend(
                                gp.iter()
                                    .zip(xp)
                                    .map(|(&d, &v)| k * (d - a - (v - m) * is * b)),
                            );
                        }
                        gx
                    } else {
                        let mut gx = Vec::with_capacity(g.len());
                        for (j, gp) in g.chunks_exact(inner).enumerate() {
                            let k = gam[j % ch] * inv_std[j % ch];
                            gx.extend(gp.iter().map(|&d| d * k));
                        }
                        gx
                    };
                    self.send(grads, *x, gx);
                }
            }
            Op::PRelu { x, alpha } => {
                let xv = self.value(*x);
                let (_, ch, inner) = channel_layout("prelu", xv.shape()).expect("validated");
                let a = self.value(*alpha).data();
                let shared = a.len() == 1;
                let chan = |j: usize| if shared { 0 } else { j % ch };
                let planes = || {
                    g.chunks_exact(inner)
                        .zip(xv.data().chunks_exact(inner))
                        .enumerate()
                };
                if self.needs(*alpha) {
                    let mut ga = vec![0f64; a.len()];
                    for (j, (gp, xp)) in planes() {
                        ga[chan(j)] += gp
                            .iter()
                            .zip(xp)
                            .map(|(&d, &v)| if v < T::zero() { (d * v).as_f64() } else { 0.0 })
                            .sum::<f64>();
                    }
                    self.send(grads, *alpha, ga.into_iter().map(T::of_f64).collect());
                }
                if self.needs(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for (j, (gp, xp)) in planes() {
                        let s = a[chan(j)];
                        gx.extend(
                            gp.iter()
                                .zip(xp)
                                .map(|(&d, &v)| if v >= T::zero() { d } else { s * d }),
                        );
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let slope = *slope;
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v >= T::zero() { d } else { slope * d })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.send(grads, *x, g),
            Op::Replicate { x, copies } => {
                let (batch, ch, inner) =
                    channel_layout("replicate_channels", self.shape(*x)).expect("validated");
                let block = ch * inner;
                let mut gx = vec![T::zero(); batch * block];
                for b in 0..batch {
                    let dst = &mut gx[b * block..(b + 1) * block];
                    for c in 0..*copies {
                        let s = &g[(b * copies + c) * block..(b * copies + c + 1) * block];
                        dst.iter_mut().zip(s).for_each(|(a, &v)| *a = *a + v);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::GroupSum { x, groups } => {
                let block = g.len() / self.shape(*x)[0];
                let mut gx = Vec::with_capacity(g.len() * groups);
                for sample in g.chunks_exact(block) {
                    for _ in 0..*groups {
                        gx.extend_from_slice(sample);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SignRows(latent) => {
                let one = T::one();
                let gx = g
                    .iter()
                    .zip(self.value(*latent).data())
                    .map(|(&d, &w)| if w.abs() <= one { d } else { T::zero() })
                    .collect();
                self.send(grads, *latent, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = g[0] / T::of_f64(n as f64);
                self.send(grads, *x, vec![v; n]);
            }
            Op::Mse { x, target } => {
                let (a, b) = (self.value(*x).data(), self.value(*target).data());
                let k = g[0] * T::of_f64(2.0 / a.len() as f64);
                if self.needs(*x) {
                    self.send(
                        grads,
                        *x,
                        a.iter().zip(b).map(|(&p, &q)| k * (p - q)).collect(),
                    );
                }
                if self.needs(*target) {
                    self.send(
                        grads,
                        *target,
                        a.iter().zip(b).map(|(&p, &q)| k * (q - p)).collect(),
                    );
                }
            }
        }
    }
}

/// Mean absolute value of a latent row, floored at `1e-8` for all-zero rows.
pub(crate) fn row_scale<T: Scalar>(row: &[T]) -> T {
    let s: f64 = row.iter().map(|v| v.abs().as_f64()).sum::<f64>() / row.len() as f64;
    if s == 0.0 {
        log::warn!("binarized row has all-zero latent weights; using scale 1e-8");
        T::of_f64(1e-8)
    } else {
        T::of_f64(s)
    }
}
