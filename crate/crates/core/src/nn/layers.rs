//! Network blocks. Each block owns a name prefix, registers its parameters in
//! a [`ParamStore`] and builds its forward pass on a [`Graph`] from bound
//! parameters, so the same definition runs in `f32` and `f64`.

use rand_chacha::ChaCha8Rng;

use super::graph::{Bindings, Graph, Var};
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// How a layer's final projection is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Scaled normal, std `1/sqrt(fan_in)`.
    Default,
    /// All zeros; used for residual heads so a fresh block is the identity.
    Zero,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut ChaCha8Rng) -> Result<()> {
        let std = match init {
            Init::Default => 1.0 / (self.din as f64).sqrt(),
            Init::Zero => 0.0,
        };
        store.init_normal(&format!("{}.w", self.name), &[self.din, self.dout], std, rng)?;
        store.init_const(&format!("{}.b", self.name), &[self.dout], 0.0)
    }

    /// `[.., din] -> [.., dout]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.init_const(&format!("{}.g", self.name), &[self.dim], 1.0)?;
        store.init_const(&format!("{}.b", self.name), &[self.dim], 0.0)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<Var> {
        let gain = p.get(&format!("{}.g", self.name))?;
        let bias = p.get(&format!("{}.b", self.name))?;
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub dim: usize,
    pub heads: usize,
    qkv: Linear,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            dim,
            heads,
            qkv: Linear::new(format!("{name}.qkv"), dim, 3 * dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.qkv.init(store, Init::Default, rng)?;
        self.out.init(store, Init::Default, rng)
    }

    /// Self-attention over the rows of `x: [T, D]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x)?.0)
    }

    /// Also returns the `[T, T]` attention matrix of every head.
    pub fn forward_with_weights<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let dh = self.dim / self.heads;
        let qkv = self.qkv.forward(g, p, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, self.dim + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * self.dim + h * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax(scores);
            weights.push(att);
            heads.push(g.matmul(att, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((self.out.forward(g, p, merged)?, weights))
    }
}

/// Pre-norm transformer encoder with a final normalization.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub dim: usize,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerEncoder {
    pub fn new(name: &str, dim: usize, depth: usize, heads: usize, ff_mult: usize) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let n = format!("{name}.{i}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(format!("{n}.ln1"), dim),
                    attn: MultiHeadAttention::new(&format!("{n}.attn"), dim, heads)?,
                    norm2: LayerNorm::new(format!("{n}.ln2"), dim),
                    ff1: Linear::new(format!("{n}.ff1"), dim, ff_mult * dim),
                    ff2: Linear::new(format!("{n}.ff2"), ff_mult * dim, dim),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if depth == 0 {
            return Err(Error::Config("encoder depth must be positive".into()));
        }
        Ok(Self {
            dim,
            layers,
            final_norm: LayerNorm::new(format!("{name}.ln"), dim),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in &self.layers {
            l.norm1.init(store)?;
            l.attn.init(store, rng)?;
            l.norm2.init(store)?;
            l.ff1.init(store, Init::Default, rng)?;
            l.ff2.init(store, Init::Default, rng)?;
        }
        self.final_norm.init(store)
    }

    /// `[T, D] -> [T, D]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<Var> {
        let mut x = x;
        for l in &self.layers {
            let h = l.norm1.forward(g, p, x)?;
            let h = l.attn.forward(g, p, h)?;
            x = g.add(x, h)?;
            let h = l.norm2.forward(g, p, x)?;
            let h = l.ff1.forward(g, p, h)?;
            let h = g.silu(h);
            let h = l.ff2.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        self.final_norm.forward(g, p, x)
    }
}

/// Sinusoidal position table, `[len, dim]`.
pub fn sinusoidal_positions<F: Scalar>(len: usize, dim: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = F::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, dim], data).expect("position table shape")
}

/// Stack of residual temporal convolution blocks over `[T, D]`.
#[derive(Debug, Clone)]
pub struct TemporalResNet {
    pub name: String,
    pub dim: usize,
    pub blocks: usize,
    pub kernel: usize,
}

impl TemporalResNet {
    pub fn new(name: impl Into<String>, dim: usize, blocks: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            blocks,
            kernel,
        })
    }

    fn conv_names(&self, block: usize, which: usize) -> (String, String) {
        (
            format!("{}.{block}.conv{which}.w", self.name),
            format!("{}.{block}.conv{which}.b", self.name),
        )
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let fan_in = (self.kernel * self.dim) as f64;
        for b in 0..self.blocks {
            for which in 1..=2 {
                let (w, bias) = self.conv_names(b, which);
                let std = if which == 1 { 1.0 / fan_in.sqrt() } else { 0.0 };
                store.init_normal(&w, &[self.kernel, self.dim, self.dim], std, rng)?;
                store.init_const(&bias, &[self.dim], 0.0)?;
            }
        }
        Ok(())
    }

    /// `[T, D] -> [T, D]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let mut x = g.reshape(x, &[t, 1, self.dim])?;
        for b in 0..self.blocks {
            let h = g.silu(x);
            let (w, bias) = self.conv_names(b, 1);
            let h = g.conv1d(h, p.get(&w)?, p.get(&bias)?, 1)?;
            let h = g.silu(h);
            let (w, bias) = self.conv_names(b, 2);
            let h = g.conv1d(h, p.get(&w)?, p.get(&bias)?, 1)?;
            x = g.add(x, h)?;
        }
        g.reshape(x, &[t, self.dim])
    }
}

/// Spatial graph convolution over `[T, J, Cin] -> [T, J, Cout]`:
/// `Σ_p A_p · X · W_p + b` with one normalized adjacency per partition.
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub partitions: usize,
}

impl GraphConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, partitions: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            partitions,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: Init, rng: &mut ChaCha8Rng) -> Result<()> {
        let std = match init {
            Init::Default => 1.0 / ((self.cin * self.partitions) as f64).sqrt(),
            Init::Zero => 0.0,
        };
        for k in 0..self.partitions {
            store.init_normal(&format!("{}.w{k}", self.name), &[self.cin, self.cout], std, rng)?;
        }
        store.init_const(&format!("{}.b", self.name), &[self.cout], 0.0)
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        x: Var,
        adjacency: &[Tensor<F>],
    ) -> Result<Var> {
        if adjacency.len() != self.partitions {
            return Err(Error::Shape(format!(
                "{} adjacency matrices for {} partitions",
                adjacency.len(),
                self.partitions
            )));
        }
        let mut acc = None;
        for (k, a) in adjacency.iter().enumerate() {
            let mixed = g.graph_mix(x, a)?;
            let y = g.matmul(mixed, p.get(&format!("{}.w{k}", self.name))?)?;
            acc = Some(match acc {
                None => y,
                Some(s) => g.add(s, y)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::Config("graph convolution without partitions".into()))?;
        g.add_bias(acc, p.get(&format!("{}.b", self.name))?)
    }
}

/// Two-layer MLP producing FiLM parameters `γ = 1 + Δγ` and `β` from a
/// conditioning signal. The output layer starts at zero so modulation is the
/// identity at init.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    pub features: usize,
    hidden: Linear,
    out: Linear,
}

impl FilmGenerator {
    pub fn new(name: &str, cond_dim: usize, hidden: usize, features: usize) -> Self {
        Self {
            features,
            hidden: Linear::new(format!("{name}.h"), cond_dim, hidden),
            out: Linear::new(format!("{name}.o"), hidden, 2 * features),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.hidden.init(store, Init::Default, rng)?;
        self.out.init(store, Init::Zero, rng)
    }

    /// `cond: [.., cond_dim]` -> `(γ, β)`, each `[.., features]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, cond: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, p, cond)?;
        let h = g.silu(h);
        let o = self.out.forward(g, p, h)?;
        let dg = g.slice_cols(o, 0, self.features)?;
        let beta = g.slice_cols(o, self.features, self.features)?;
        let ones = Tensor::full(g.shape(dg), F::ONE);
        let gamma = g.add_const(dg, &ones)?;
        Ok((gamma, beta))
    }

    /// Modulates `x` with parameters generated from `cond`.
    pub fn apply<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, x: Var, cond: Var) -> Result<Var> {
        let (gamma, beta) = self.forward(g, p, cond)?;
        g.film(x, gamma, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn attention_matches_hand_computation() {
        // one head, D = 2, identity projections
        let att = MultiHeadAttention::new("a", 2, 1).unwrap();
        let mut store = ParamStore::new(0);
        let mut qkv = vec![0.0f32; 2 * 6];
        for blk in 0..3 {
            qkv[blk * 2] = 1.0;
            qkv[6 + blk * 2 + 1] = 1.0;
        }
        store.insert("a.qkv.w", Tensor::new(&[2, 6], qkv).unwrap()).unwrap();
        store.insert("a.qkv.b", Tensor::zeros(&[6])).unwrap();
        store.insert("a.out.w", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        store.insert("a.out.b", Tensor::zeros(&[2])).unwrap();

        let xs = [1.0, 0.0, 0.5, 2.0];
        let mut g = Graph::<f64>::new();
        let p = g.bind(&store.tensors());
        let x = g.constant(Tensor::new(&[2, 2], xs.to_vec()).unwrap());
        let (y, w) = att.forward_with_weights(&mut g, &p, x).unwrap();

        let s = 1.0 / 2f64.sqrt();
        let dot = |a: usize, b: usize| (xs[2 * a] * xs[2 * b] + xs[2 * a + 1] * xs[2 * b + 1]) * s;
        for i in 0..2 {
            let e0 = dot(i, 0).exp();
            let e1 = dot(i, 1).exp();
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let wv = g.value(w[0]).data();
            assert!((wv[2 * i] - w0).abs() < 1e-12);
            assert!((wv[2 * i + 1] - w1).abs() < 1e-12);
            assert!((wv[2 * i] + wv[2 * i + 1] - 1.0).abs() < 1e-5);
            for c in 0..2 {
                let want = w0 * xs[c] + w1 * xs[2 + c];
                assert!((g.value(y).data()[2 * i + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_preserves_shape_and_rejects_bad_heads() {
        assert!(matches!(
            TransformerEncoder::new("e", 10, 1, 3, 2),
            Err(Error::Config(_))
        ));
        let enc = TransformerEncoder::new("e", 16, 2, 4, 2).unwrap();
        let mut store = ParamStore::new(1);
        enc.init(&mut store, &mut rng()).unwrap();
        for t in [1usize, 7] {
            let mut g = Graph::<f32>::new();
            let p = g.bind(&store.tensors());
            let x = g.constant(sinusoidal_positions(t, 16));
            let y = enc.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[t, 16]);
        }
    }

    #[test]
    fn resnet_is_identity_at_init() {
        assert!(TemporalResNet::new("r", 4, 2, 4).is_err());
        let net = TemporalResNet::new("r", 4, 3, 5).unwrap();
        let mut store = ParamStore::new(2);
        net.init(&mut store, &mut rng()).unwrap();
        for t in [1usize, 2, 9] {
            let xs: Vec<f32> = (0..t * 4).map(|i| (i as f32 * 0.3).cos()).collect();
            let mut g = Graph::<f32>::new();
            let p = g.bind(&store.tensors());
            let x = g.constant(Tensor::new(&[t, 4], xs.clone()).unwrap());
            let y = net.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[t, 4]);
            assert_eq!(g.value(y).data(), &xs[..]);
        }
    }

    #[test]
    fn film_generator_starts_at_identity() {
        let f = FilmGenerator::new("f", 3, 8, 5);
        let mut store = ParamStore::new(4);
        f.init(&mut store, &mut rng()).unwrap();
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store.tensors());
        let x = g.constant(Tensor::new(&[2, 5], (0..10).map(|i| i as f32).collect()).unwrap());
        let c = g.constant(Tensor::full(&[2, 3], 0.7));
        let y = f.apply(&mut g, &p, x, c).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn positions_are_bounded() {
        let pe = sinusoidal_positions::<f32>(50, 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.data()[0], 0.0);
        assert_eq!(pe.data()[1], 1.0);
    }
}
