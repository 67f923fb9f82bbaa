use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    MaxReduce {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
        groups: Vec<usize>,
        n_groups: usize,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    WeightedSumPool {
        features: Var,
        weights: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: T,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    SliceAxis0 {
        input: Var,
        offset: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, which is also a
/// topological order, so the tape is acyclic by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// 2-D convolution. `input` is N×H×W×Cin, `kernel` is kh×kw×Cin×Cout.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects NHWC input and 4-D kernel, got {xs:?} and {ks:?}"
            )));
        }
        let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, kc, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kc}"
            )));
        }
        let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {kh}x{kw} exceeds padded input {h}x{w} (pad {pad}, stride {stride})"
                )))
            }
        };
        let kk = kh * kw * cin;
        let rows = n * oh * ow;
        let x = self.data(input);
        let mut cols = vec![T::zero(); rows * kk];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((b * oh + oy) * ow + ox) * kk;
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
                            let src = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let dst = base + (ky * kw + kx) * cin;
                            cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            kk,
            cout,
            T::one(),
            &cols,
            kk,
            1,
            self.data(kernel),
            cout,
            1,
            T::zero(),
            &mut out,
            cout,
            1,
        );
        let value = Tensor::new(&[n, oh, ow, cout], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(input).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match channel count {c}",
                self.shape(bias)
            )));
        }
        let b = self.data(bias);
        let out: Vec<T> = self
            .data(input)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let value = Tensor::new(self.shape(input), out)?;
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(value, Op::BiasAdd { input, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out: Vec<T> = self
            .data(input)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(input), out).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Spatial max pooling over NHWC input; padded cells never win.
    pub fn max_pool2d(&mut self, input: Var, size: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || pad >= size {
            return Err(Error::shape(format!(
                "max_pool2d expects NHWC input and pad < size, got {xs:?}, size {size}, pad {pad}"
            )));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = match (conv_out(h, size, stride, pad), conv_out(w, size, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("max_pool2d window exceeds input")),
        };
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..size {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..size {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = ((b * h + iy as usize) * w + ix as usize) * c + ch;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, oh, ow, c], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Maximum over one axis, which is kept with extent 1. Ties go to the
    /// lowest index.
    pub fn max_reduce(&mut self, input: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let x = self.data(input);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best_idx = o * len * inner + i;
                for a in 1..len {
                    let idx = (o * len + a) * inner + i;
                    if x[idx] > x[best_idx] {
                        best_idx = idx;
                    }
                }
                out.push(x[best_idx]);
                argmax.push(best_idx);
            }
        }
        let mut shape = xs;
        shape[axis] = 1;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxReduce { input, argmax }, rg))
    }

    /// Softmax jointly over the named axes, separately for every setting of
    /// the remaining axes. Stabilized by subtracting the per-group maximum.
    pub fn softmax_over(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("softmax_over needs at least one axis"));
        }
        if let Some(&bad) = axes.iter().find(|&&a| a >= xs.len()) {
            return Err(Error::shape(format!("axis {bad} out of range for {xs:?}")));
        }
        let (groups, n_groups) = group_index(&xs, axes);
        let x = self.data(input);
        let mut maxes = vec![T::neg_infinity(); n_groups];
        for (&v, &g) in x.iter().zip(&groups) {
            if v > maxes[g] {
                maxes[g] = v;
            }
        }
        let mut out: Vec<T> = x
            .iter()
            .zip(&groups)
            .map(|(&v, &g)| (v - maxes[g]).exp())
            .collect();
        let mut sums = vec![T::zero(); n_groups];
        for (&v, &g) in out.iter().zip(&groups) {
            sums[g] += v;
        }
        for (v, &g) in out.iter_mut().zip(&groups) {
            *v = *v / sums[g];
        }
        let value = Tensor::new(&xs, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::Softmax {
                input,
                groups,
                n_groups,
            },
            rg,
        ))
    }

    /// Scales every vector along the last axis to unit L2 norm. Vectors with
    /// norm below 1e-12 pass through unchanged.
    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let xs = self.shape(input).to_vec();
        let width = *xs.last().unwrap();
        let eps = T::lit(1e-12);
        let x = self.data(input);
        let mut out = x.to_vec();
        let mut norms = Vec::with_capacity(x.len() / width);
        for row in out.chunks_mut(width) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm < eps {
                norms.push(T::zero());
            } else {
                row.iter_mut().for_each(|v| *v = *v / norm);
                norms.push(norm);
            }
        }
        let value = Tensor::new(&xs, out).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::L2Normalize { input, norms }, rg)
    }

    /// `input` (B×in) times `weight` (in×out) plus optional `bias` (out).
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!(
                "fully_connected: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (rows, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(format!(
                    "fully_connected: bias {:?} vs width {fan_out}",
                    self.shape(b)
                )));
            }
            let bd = self.data(b);
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bd);
            }
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            self.data(input),
            fan_in,
            1,
            self.data(weight),
            fan_out,
            1,
            T::one(),
            &mut out,
            fan_out,
            1,
        );
        let value = Tensor::new(&[rows, fan_out], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Attention-weighted sum of feature vectors.
    ///
    /// `features` is (..)×C and `weights` is (..)×P with identical leading
    /// extents; the result is P×C with row p = Σ_cells weights[cell, p] · features[cell].
    pub fn weighted_sum_pool(&mut self, features: Var, weights: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let ws = self.shape(weights).to_vec();
        if fs.len() != ws.len() || fs[..fs.len() - 1] != ws[..ws.len() - 1] {
            return Err(Error::shape(format!(
                "weighted_sum_pool: features {fs:?} and weights {ws:?} disagree on leading extents"
            )));
        }
        let c = *fs.last().unwrap();
        let p = *ws.last().unwrap();
        let cells = self.value(features).len() / c;
        let mut out = vec![T::zero(); p * c];
        T::gemm(
            p,
            cells,
            c,
            T::one(),
            self.data(weights),
            1,
            p,
            self.data(features),
            c,
            1,
            T::zero(),
            &mut out,
            c,
            1,
        );
        let value = Tensor::new(&[p, c], out)?;
        let rg = self.any_grad(&[features, weights]);
        Ok(self.push(value, Op::WeightedSumPool { features, weights }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), out).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// `scale * input + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let out = self.data(input).iter().map(|&v| scale * v + shift).collect();
        let value = Tensor::new(self.shape(input), out).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Affine { input, scale }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        self.affine(input, factor, T::zero())
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().copied().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let mut value = value;
        value.take_grad();
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut blocks = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
            blocks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.data(v)[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            rg,
        ))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_axis0(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).slice_axis0(start, len)?;
        let inner = value.len() / len;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::SliceAxis0 {
                input,
                offset: start * inner,
            },
            rg,
        ))
    }

    /// Stacks the leading-axis entries named by `indices` (repeats allowed).
    pub fn gather_axis0(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if indices.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xs[0]) {
            return Err(Error::shape(format!("gather index {bad} out of range for {xs:?}")));
        }
        let inner = self.value(input).len() / xs[0];
        let x = self.data(input);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&x[i * inner..(i + 1) * inner]);
        }
        let mut shape = xs;
        shape[0] = indices.len();
        let value = Tensor::new(&shape, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of B×M logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {ls:?} vs {} labels",
                labels.len()
            )));
        }
        let m = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(format!("label {bad} outside {m} classes")));
        }
        let x = self.data(logits);
        let mut probs = Vec::with_capacity(x.len());
        let mut total = T::zero();
        for (row, &label) in x.chunks(m).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`. Gradients accumulate into
    /// whatever is already stored on the nodes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            propagate(before, &rest[0], &g);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }
}

/// Maps each flat index to the index of its reduction group.
fn group_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let rank = shape.len();
    let mut gstride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            gstride[d] = acc;
            acc *= shape[d];
        }
    }
    let len: usize = shape.iter().product();
    let mut groups = Vec::with_capacity(len);
    let mut idx = vec![0usize; rank];
    for _ in 0..len {
        groups.push(idx.iter().zip(&gstride).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (groups, acc)
}

fn acc_grad<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &mut nodes[v.0];
    if node.requires_grad {
        f(node.value.grad_mut());
    }
}

fn propagate<T: Real>(before: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
            cols,
        } => {
            let xs = before[input.0].value.shape().to_vec();
            let ks = before[kernel.0].value.shape().to_vec();
            let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
            let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            let kk = kh * kw * cin;
            let rows = n * oh * ow;
            acc_grad(before, *kernel, |gk| {
                T::gemm(kk, rows, cout, T::one(), cols, 1, kk, g, cout, 1, T::one(), gk, cout, 1);
            });
            if before[input.0].requires_grad {
                let mut dcols = vec![T::zero(); rows * kk];
                T::gemm(
                    rows,
                    cout,
                    kk,
                    T::one(),
                    g,
                    cout,
                    1,
                    before[kernel.0].value.data(),
                    1,
                    cout,
                    T::zero(),
                    &mut dcols,
                    kk,
                    1,
                );
                let gx = before[input.0].value.grad_mut();
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = ((b * oh + oy) * ow + ox) * kk;
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
                                    let dst = ((b * h + iy as usize) * w + ix as usize) * cin;
                                    let src = base + (ky * kw + kx) * cin;
                                    for c in 0..cin {
                                        gx[dst + c] += dcols[src + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BiasAdd { input, bias } => {
            acc_grad(before, *input, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            });
            acc_grad(before, *bias, |gb| {
                let c = gb.len();
                for (i, &s) in g.iter().enumerate() {
                    gb[i % c] += s;
                }
            });
        }
        Op::Relu { input } => {
            let y = out.data();
            acc_grad(before, *input, |gx| {
                for ((d, &s), &yv) in gx.iter_mut().zip(g).zip(y) {
                    if yv > T::zero() {
                        *d += s;
                    }
                }
            });
        }
        Op::MaxPool2d { input, argmax } | Op::MaxReduce { input, argmax } => {
            acc_grad(before, *input, |gx| {
                for (&idx, &s) in argmax.iter().zip(g) {
                    gx[idx] += s;
                }
            });
        }
        Op::Softmax {
            input,
            groups,
            n_groups,
        } => {
            let y = out.data();
            let mut dots = vec![T::zero(); *n_groups];
            for ((&gy, &yv), &grp) in g.iter().zip(y).zip(groups) {
                dots[grp] += gy * yv;
            }
            acc_grad(before, *input, |gx| {
                for (i, d) in gx.iter_mut().enumerate() {
                    *d += y[i] * (g[i] - dots[groups[i]]);
                }
            });
        }
        Op::L2Normalize { input, norms } => {
            let y = out.data();
            let width = *out.shape().last().unwrap();
            acc_grad(before, *input, |gx| {
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let gxr = &mut gx[span];
                    if norm == T::zero() {
                        gxr.iter_mut().zip(gr).for_each(|(d, &s)| *d += s);
                        continue;
                    }
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *d += (gv - yv * dot) / norm;
                    }
                }
            });
        }
        Op::FullyConnected {
            input,
            weight,
            bias,
        } => {
            let rows = out.shape()[0];
            let fan_out = out.shape()[1];
            let fan_in = before[input.0].value.shape()[1];
            if before[input.0].requires_grad {
                let w = before[weight.0].value.data().to_vec();
                let gx = before[input.0].value.grad_mut();
                T::gemm(rows, fan_out, fan_in, T::one(), g, fan_out, 1, &w, 1, fan_out, T::one(), gx, fan_in, 1);
            }
            if before[weight.0].requires_grad {
                let x = before[input.0].value.data().to_vec();
                let gw = before[weight.0].value.grad_mut();
                T::gemm(fan_in, rows, fan_out, T::one(), &x, 1, fan_in, g, fan_out, 1, T::one(), gw, fan_out, 1);
            }
            if let Some(b) = bias {
                acc_grad(before, *b, |gb| {
                    for row in g.chunks(fan_out) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                });
            }
        }
        Op::WeightedSumPool { features, weights } => {
            let (p, c) = (out.shape()[0], out.shape()[1]);
            let cells = before[features.0].value.len() / c;
            if before[features.0].requires_grad {
                let w = before[weights.0].value.data().to_vec();
                let gf = before[features.0].value.grad_mut();
                T::gemm(cells, p, c, T::one(), &w, p, 1, g, c, 1, T::one(), gf, c, 1);
            }
            if before[weights.0].requires_grad {
                let f = before[features.0].value.data().to_vec();
                let gw = before[weights.0].value.grad_mut();
                T::gemm(cells, c, p, T::one(), &f, c, 1, g, 1, c, T::one(), gw, p, 1);
            }
        }
        Op::Add { a, b } => {
            acc_grad(before, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            acc_grad(before, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
        }
        Op::Sub { a, b } => {
            acc_grad(before, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            acc_grad(before, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
        }
        Op::Mul { a, b } => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            acc_grad(before, *a, |ga| {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(&bv) {
                    *d += s * o;
                }
            });
            acc_grad(before, *b, |gb| {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(&av) {
                    *d += s * o;
                }
            });
        }
        Op::Affine { input, scale } => {
            acc_grad(before, *input, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += *scale * s)
            });
        }
        Op::Sum { input } => {
            acc_grad(before, *input, |gx| gx.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Reshape { input } => {
            acc_grad(before, *input, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
        }
        Op::Concat {
            inputs,
            outer,
            blocks,
        } => {
            let stride: usize = blocks.iter().sum();
            let mut start = 0;
            for (&v, &blk) in inputs.iter().zip(blocks) {
                acc_grad(before, v, |gx| {
                    for o in 0..*outer {
                        let src = &g[o * stride + start..o * stride + start + blk];
                        gx[o * blk..(o + 1) * blk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                });
                start += blk;
            }
        }
        Op::SliceAxis0 { input, offset } => {
            acc_grad(before, *input, |gx| {
                gx[*offset..offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &s)| *d += s)
            });
        }
        Op::Gather { input, indices } => {
            let inner = g.len() / indices.len();
            acc_grad(before, *input, |gx| {
                for (r, &i) in indices.iter().enumerate() {
                    gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(d, &s)| *d += s);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let m = probs.len() / labels.len();
            let scale = g[0] / T::lit(labels.len() as f64);
            acc_grad(before, *logits, |gx| {
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..m {
                        let target = if j == label { T::one() } else { T::zero() };
                        gx[r * m + j] += scale * (probs[r * m + j] - target);
                    }
                }
            });
        }
    }
}
