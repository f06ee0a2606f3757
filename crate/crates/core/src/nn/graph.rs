//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. [`Graph::backward`] walks the tape in
//! reverse once. A graph lives for one forward/backward pass.

use std::collections::BTreeMap;

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How FiLM parameters broadcast against the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FilmMode {
    /// γ and β have the same shape as x.
    Same,
    /// γ and β are `[C]`, shared by every row.
    Row,
    /// x is `[T, G, C]` and γ, β are `[T, C]`, shared across G.
    PerStep { groups: usize },
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Vec<F>),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Silu(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, F, F),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        kernel: usize,
        cols: Vec<F>,
    },
    Upsample(Var),
    GraphMix {
        x: Var,
        adj: Vec<F>,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: FilmMode,
    },
    NormLast(Var),
    Sum(Var),
    Mean(Var),
    Narrow {
        a: Var,
        start: usize,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Named parameter values bound into a graph.
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per bound parameter; zeros for parameters the loss ignores.
    pub fn named(&self, graph: &Graph<F>, bindings: &Bindings) -> BTreeMap<String, Tensor<F>> {
        bindings
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn parameter(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Adds every tensor of `params` as a trainable leaf.
    pub fn bind(&mut self, params: &BTreeMap<String, Tensor<F>>) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), self.parameter(t.clone())))
            .collect();
        Bindings { vars }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[C]` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).len() != c {
            return shape_err(format!(
                "bias of {} elements for {c} columns",
                self.value(bias).len()
            ));
        }
        let vb = self.value(bias).data().to_vec();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (x, &b) in row.iter_mut().zip(&vb) {
                *x += b;
            }
        }
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = F::from_f64(s);
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return shape_err(format!("add_const: {:?} vs {:?}", self.shape(a), c.shape()));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::AddConst(a), ng))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        if self.value(a).len() != c.len() {
            return shape_err(format!("mul_const: {:?} vs {:?}", self.shape(a), c.shape()));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), ng))
    }

    /// `a · b` over the last axis of `a`: `[.., K] × [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ` for `a: [M, K]`, `b: [N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 {
            return shape_err(format!("matmul rhs must be 2-D, got {sb:?}"));
        }
        let k = *sa.last().unwrap_or(&0);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err(format!("matmul {sa:?} x {sb:?} (transposed: {trans_b})"));
        }
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![F::ZERO; m * n];
        gemm(false, trans_b, m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (F::ONE + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > F::ZERO { x } else { F::ZERO });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::from_f64(lo), F::from_f64(hi));
        let out = self.value(a).map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let ng = self.ng(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Normalizes each row over its last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return shape_err(format!("layer_norm parameters do not match {c} columns"));
        }
        let eps = F::from_f64(1e-5);
        let n = F::from_f64(c as f64);
        let vx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks_exact(c) {
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / n;
            let mut var = F::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            let r = F::ONE / (var / n + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mut max = row[0];
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(va.shape(), out).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        if start + len > c {
            return shape_err(format!("slice {start}..{} of {c} columns", start + len));
        }
        let mut out = Vec::with_capacity(va.rows() * len);
        for row in va.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return shape_err("concat_cols: row counts differ".into());
            }
            total += self.value(p).cols();
        }
        let mut out = vec![F::ZERO; rows * total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for (r, row) in v.data().chunks_exact(c).enumerate() {
                out[r * total + offset..r * total + offset + c].copy_from_slice(row);
            }
            offset += c;
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Same-padded 1-D convolution along the first axis of `x: [T, G, Cin]`
    /// with `w: [K, Cin, Cout]` and `b: [Cout]`, shared over the G groups.
    /// Output length is `ceil(T / stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || self.value(b).len() != sw[2] {
            return shape_err(format!("conv1d x {sx:?}, w {sw:?}"));
        }
        if sw[0] % 2 == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv1d needs an odd kernel and positive stride, got {} / {stride}",
                sw[0]
            )));
        }
        let (t_in, groups, cin) = (sx[0], sx[1], sx[2]);
        let (kernel, cout) = (sw[0], sw[2]);
        let pad = kernel / 2;
        let t_out = t_in.div_ceil(stride);
        let width = kernel * cin;
        let rows = t_out * groups;
        let xd = self.value(x).data();
        let mut cols = vec![F::ZERO; rows * width];
        for o in 0..t_out {
            for kk in 0..kernel {
                let t = (o * stride + kk) as isize - pad as isize;
                if t < 0 || t >= t_in as isize {
                    continue;
                }
                let t = t as usize;
                for g in 0..groups {
                    let src = &xd[(t * groups + g) * cin..(t * groups + g + 1) * cin];
                    let dst = (o * groups + g) * width + kk * cin;
                    cols[dst..dst + cin].copy_from_slice(src);
                }
            }
        }
        let mut out = vec![F::ZERO; rows * cout];
        gemm(false, false, rows, width, cout, &cols, self.value(w).data(), &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[t_out, groups, cout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                kernel,
                cols,
            },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling by two along the first axis, cut to `len`.
    pub fn upsample2(&mut self, x: Var, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let t_in = sx[0];
        if len > 2 * t_in || len == 0 {
            return shape_err(format!("cannot upsample {t_in} frames to {len}"));
        }
        let inner: usize = sx[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(len * inner);
        for t in 0..len {
            let s = t / 2;
            out.extend_from_slice(&xd[s * inner..(s + 1) * inner]);
        }
        let mut shape = sx;
        shape[0] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample(x), ng))
    }

    /// Mixes joints with a fixed `[J, J]` matrix: `y[t, j] = Σ_i adj[j, i] x[t, i]`.
    pub fn graph_mix(&mut self, x: Var, adj: &Tensor<F>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let j = adj.shape()[0];
        if sx.len() != 3 || sx[1] != j || adj.shape() != [j, j] {
            return shape_err(format!("graph_mix x {sx:?}, adjacency {:?}", adj.shape()));
        }
        let (t, c) = (sx[0], sx[2]);
        let xd = self.value(x).data();
        let mut out = vec![F::ZERO; t * j * c];
        for step in 0..t {
            let range = step * j * c..(step + 1) * j * c;
            gemm(false, false, j, j, c, adj.data(), &xd[range.clone()], &mut out[range], false);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::GraphMix {
                x,
                adj: adj.data().to_vec(),
            },
            ng,
        ))
    }

    /// Feature-wise modulation `γ ⊙ x + β`. γ and β either match `x`, are a
    /// single `[C]` row, or are `[T, C]` for `x: [T, G, C]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.same_shape(gamma, beta, "film gamma/beta")?;
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gamma).to_vec();
        let c = *sx.last().unwrap();
        let mode = if sg == sx {
            FilmMode::Same
        } else if sg.iter().product::<usize>() == c && *sg.last().unwrap() == c {
            FilmMode::Row
        } else if sx.len() == 3 && sg == [sx[0], sx[2]] {
            FilmMode::PerStep { groups: sx[1] }
        } else {
            return shape_err(format!("film: features {sx:?}, modulation {sg:?}"));
        };
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let out: Vec<F> = (0..xd.len())
            .map(|i| {
                let m = film_index(mode, i, c);
                gd[m] * xd[i] + bd[m]
            })
            .collect();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::Film {
                x,
                gamma,
                beta,
                mode,
            },
            ng,
        ))
    }

    /// Euclidean norm over the last axis; `[.., D] -> [..]`.
    pub fn norm_last(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let out: Vec<F> = va
            .data()
            .chunks_exact(c)
            .map(|row| {
                let mut s = F::ZERO;
                for &v in row {
                    s += v * v;
                }
                s.sqrt()
            })
            .collect();
        let mut shape = va.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, out).unwrap(), Op::NormLast(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = F::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut s = F::ZERO;
        for &v in va.data() {
            s += v;
        }
        let n = F::from_f64(va.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), ng)
    }

    /// Rows `start..start+len` of the first axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if start + len > sa[0] {
            return shape_err(format!("narrow {start}..{} of {}", start + len, sa[0]));
        }
        let inner: usize = sa[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = sa;
        shape[0] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Narrow { a, start }, ng))
    }

    /// Selects entries of the second axis of `a: [T, J, C]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || index.iter().any(|&i| i >= sa[1]) {
            return shape_err(format!("gather {index:?} from {sa:?}"));
        }
        let (t, j, c) = (sa[0], sa[1], sa[2]);
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(t * index.len() * c);
        for step in 0..t {
            for &i in index {
                out.extend_from_slice(&ad[(step * j + i) * c..(step * j + i + 1) * c]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[t, index.len(), c], out)?,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::ONE));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<F>) -> Tensor<F> {
        Tensor::new(self.shape(v), data).expect("gradient shape")
    }

    fn backprop(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let d = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let d = gd.iter().zip(vb).map(|(&g, &y)| g / y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.ng(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let mut d = vec![F::ZERO; c];
                    for row in gd.chunks_exact(c) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * *s)),
            Op::AddConst(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::MulConst(a, c) => {
                let d = gd.iter().zip(c).map(|(&g, &c)| g * c).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    // dA = dY · op(B)ᵀ
                    let mut d = vec![F::ZERO; m * k];
                    gemm(false, !*trans_b, m, n, k, gd, self.value(*b).data(), &mut d, false);
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.ng(*b) {
                    let mut d = vec![F::ZERO; k * n];
                    if *trans_b {
                        // B is [n, k]: dB = dYᵀ · A
                        gemm(true, false, n, m, k, gd, self.value(*a).data(), &mut d, false);
                    } else {
                        gemm(true, false, k, m, n, self.value(*a).data(), gd, &mut d, false);
                    }
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(&g, &x)| {
                        let s = F::ONE / (F::ONE + (-x).exp());
                        g * s * (F::ONE + x * (F::ONE - s))
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(&g, &x)| if x > F::ZERO { g } else { F::ZERO })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(&g, &x)| {
                        if x > F::ZERO {
                            g
                        } else if x < F::ZERO {
                            -g
                        } else {
                            F::ZERO
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { F::ZERO })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let n = F::from_f64(c as f64);
                if self.ng(*x) {
                    let mut d = vec![F::ZERO; gd.len()];
                    for r in 0..rstd.len() {
                        let row = r * c..(r + 1) * c;
                        let mut m1 = F::ZERO;
                        let mut m2 = F::ZERO;
                        for j in 0..c {
                            let dh = gd[row.start + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[row.start + j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..c {
                            let dh = gd[row.start + j] * gv[j];
                            d[row.start + j] = rstd[r] * (dh - m1 - xhat[row.start + j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![F::ZERO; c];
                    let mut db = vec![F::ZERO; c];
                    for (idx, &g) in gd.iter().enumerate() {
                        dg[idx % c] += g * xhat[idx];
                        db[idx % c] += g;
                    }
                    self.accumulate(grads, *gain, self.like(*gain, dg));
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let y = out.data();
                let mut d = vec![F::ZERO; y.len()];
                for r in 0..y.len() / c {
                    let row = r * c..(r + 1) * c;
                    let mut dot = F::ZERO;
                    for j in row.clone() {
                        dot += gd[j] * y[j];
                    }
                    for j in row {
                        d[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::SliceCols { a, start } => {
                let c = self.value(*a).cols();
                let len = out.cols();
                let mut d = vec![F::ZERO; self.value(*a).len()];
                for (r, row) in gd.chunks_exact(len).enumerate() {
                    d[r * c + start..r * c + start + len].copy_from_slice(row);
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(self.value(p).len());
                        for row in gd.chunks_exact(total) {
                            d.extend_from_slice(&row[offset..offset + c]);
                        }
                        self.accumulate(grads, p, self.like(p, d));
                    }
                    offset += c;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                kernel,
                cols,
            } => {
                let sx = self.shape(*x);
                let (t_in, groups, cin) = (sx[0], sx[1], sx[2]);
                let cout = out.cols();
                let t_out = out.shape()[0];
                let rows = t_out * groups;
                let width = kernel * cin;
                if self.ng(*w) {
                    let mut d = vec![F::ZERO; width * cout];
                    gemm(true, false, width, rows, cout, cols, gd, &mut d, false);
                    self.accumulate(grads, *w, self.like(*w, d));
                }
                if self.ng(*b) {
                    let mut d = vec![F::ZERO; cout];
                    for row in gd.chunks_exact(cout) {
                        for (acc, &v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, d));
                }
                if self.ng(*x) {
                    let mut dcols = vec![F::ZERO; rows * width];
                    gemm(false, true, rows, cout, width, gd, self.value(*w).data(), &mut dcols, false);
                    let pad = kernel / 2;
                    let mut d = vec![F::ZERO; t_in * groups * cin];
                    for o in 0..t_out {
                        for kk in 0..*kernel {
                            let t = (o * stride + kk) as isize - pad as isize;
                            if t < 0 || t >= t_in as isize {
                                continue;
                            }
                            let t = t as usize;
                            for g in 0..groups {
                                let src = (o * groups + g) * width + kk * cin;
                                let dst = (t * groups + g) * cin;
                                for ci in 0..cin {
                                    d[dst + ci] += dcols[src + ci];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, d));
                }
            }
            Op::Upsample(x) => {
                let sx = self.shape(*x);
                let inner: usize = sx[1..].iter().product();
                let mut d = vec![F::ZERO; self.value(*x).len()];
                for t in 0..out.shape()[0] {
                    let s = t / 2;
                    for e in 0..inner {
                        d[s * inner + e] += gd[t * inner + e];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::GraphMix { x, adj } => {
                let sx = self.shape(*x);
                let (t, j, c) = (sx[0], sx[1], sx[2]);
                let mut d = vec![F::ZERO; t * j * c];
                for step in 0..t {
                    let range = step * j * c..(step + 1) * j * c;
                    gemm(true, false, j, j, c, adj, &gd[range.clone()], &mut d[range], false);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Film {
                x,
                gamma,
                beta,
                mode,
            } => {
                let c = out.cols();
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let d = (0..gd.len()).map(|i| gd[i] * gam[film_index(*mode, i, c)]).collect();
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![F::ZERO; gam.len()];
                    let mut db = vec![F::ZERO; gam.len()];
                    for i in 0..gd.len() {
                        let m = film_index(*mode, i, c);
                        dg[m] += gd[i] * xd[i];
                        db[m] += gd[i];
                    }
                    self.accumulate(grads, *gamma, self.like(*gamma, dg));
                    self.accumulate(grads, *beta, self.like(*beta, db));
                }
            }
            Op::NormLast(a) => {
                let va = self.value(*a).data();
                let c = self.value(*a).cols();
                let norms = out.data();
                let mut d = vec![F::ZERO; va.len()];
                for r in 0..norms.len() {
                    if norms[r] > F::ZERO {
                        let s = gd[r] / norms[r];
                        for j in 0..c {
                            d[r * c + j] = s * va[r * c + j];
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = gd[0] / F::from_f64(n.max(1) as f64);
                self.accumulate(grads, *a, self.like(*a, vec![v; n]));
            }
            Op::Narrow { a, start } => {
                let inner = out.len() / out.shape()[0].max(1);
                let mut d = vec![F::ZERO; self.value(*a).len()];
                d[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Gather { a, index } => {
                let sa = self.shape(*a);
                let (t, j, c) = (sa[0], sa[1], sa[2]);
                let l = index.len();
                let mut d = vec![F::ZERO; t * j * c];
                for step in 0..t {
                    for (slot, &src) in index.iter().enumerate() {
                        for e in 0..c {
                            d[(step * j + src) * c + e] += gd[(step * l + slot) * c + e];
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
        }
    }
}

fn film_index(mode: FilmMode, i: usize, c: usize) -> usize {
    match mode {
        FilmMode::Same => i,
        FilmMode::Row => i % c,
        FilmMode::PerStep { groups } => (i / (groups * c)) * c + i % c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn film_identity_and_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let y = g.film(x, one, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let gz = g.constant(Tensor::zeros(&[2, 3]));
        let c = g.constant(Tensor::full(&[2, 3], 4.5));
        let y = g.film(x, gz, c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn film_per_step_matches_loop() {
        let mut g = Graph::<f64>::new();
        let (tt, gg, c) = (3, 2, 4);
        let xs: Vec<f64> = (0..tt * gg * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let gs: Vec<f64> = (0..tt * c).map(|i| 1.0 + (i as f64 * 0.11).cos()).collect();
        let bs: Vec<f64> = (0..tt * c).map(|i| i as f64 * 0.01).collect();
        let x = g.constant(t(&[tt, gg, c], &xs));
        let ga = g.constant(t(&[tt, c], &gs));
        let be = g.constant(t(&[tt, c], &bs));
        let y = g.film(x, ga, be).unwrap();
        for s in 0..tt {
            for j in 0..gg {
                for k in 0..c {
                    let want = gs[s * c + k] * xs[(s * gg + j) * c + k] + bs[s * c + k];
                    assert!((g.value(y).data()[(s * gg + j) * c + k] - want).abs() < 1e-12);
                }
            }
        }
        let bad = g.constant(Tensor::zeros(&[5]));
        assert!(matches!(g.film(x, bad, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn conv1d_matches_direct_convolution() {
        // impulse through a 3-tap kernel, one channel
        let mut g = Graph::<f64>::new();
        let mut xs = vec![0.0; 7];
        xs[3] = 1.0;
        let x = g.constant(t(&[7, 1, 1], &xs));
        let w = g.constant(t(&[3, 1, 1], &[0.25, 0.5, -1.0]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        // y[o] = Σ_k w[k] x[o + k - 1]
        let direct: Vec<f64> = (0..7)
            .map(|o| {
                (0..3)
                    .map(|k| {
                        let i = o as isize + k as isize - 1;
                        if (0..7).contains(&i) { [0.25, 0.5, -1.0][k] * xs[i as usize] } else { 0.0 }
                    })
                    .sum()
            })
            .collect();
        assert_eq!(g.value(y).data(), &direct[..]);
        let y2 = g.conv1d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y2), &[4, 1, 1]);
        let even = g.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(g.conv1d(x, even, b, 1), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_through_shared_use() {
        // f = sum(x * x) has gradient 2x
        let mut g = Graph::<f64>::new();
        let x = g.parameter(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.parameter(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
