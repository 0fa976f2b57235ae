//! Parameter registry and the layers the encoders are built from.
//!
//! Layers are free functions over a [`Graph`], which binds named parameters
//! from a [`ParamStore`] onto a fresh tape. Parameter names are hierarchical
//! (`img.block0.attn.q.w`); each layer has a matching `*_specs` function that
//! lists the shapes it expects so a store can be initialized up front.

use alloc::{
    collections::BTreeMap,
    format,
    string::{String, ToString},
    vec,
    vec::Vec,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Named parameters in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter, marking it differentiable. Returns the previous
    /// tensor under that name, if any.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.params.insert(name.into(), tensor.with_requires_grad(true))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) {
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(name, t.clone());
        }
    }

    /// Stores `grads` into each tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let t = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside ±2 std.
    TruncatedNormal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if math::abs(z) <= 2.0 {
            return z * std;
        }
    }
}

/// Initializes a store from specs. Specs are drawn in name order from one
/// seeded stream, so the result depends only on `(specs, seed)`.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for w in sorted.windows(2) {
        if w[0].name == w[1].name {
            return Err(Error::Config(format!("duplicate parameter `{}`", w[0].name)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in sorted {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::TruncatedNormal(std) => (0..n).map(|_| truncated_normal(&mut rng, std)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(c) => vec![c; n],
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?);
    }
    Ok(store)
}

/// A forward pass in progress: a tape plus the parameters bound onto it.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<'p> Graph<'p> {
    /// Every parameter is trainable.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters whose names start with any of `prefixes` are bound as
    /// constants and never receive gradient.
    pub fn with_frozen(store: &'p ParamStore, prefixes: &[&str]) -> Self {
        let mut g = Self::new(store);
        g.frozen = prefixes.iter().map(|p| p.to_string()).collect();
        g
    }

    /// Inference only: nothing is trainable.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_frozen(store, &[""])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Binds (once per graph) and returns the named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let trainable = !self.is_frozen(name);
        let v = if trainable {
            self.tape.leaf(t)
        } else {
            let leaf = t.clone().with_requires_grad(false);
            self.tape.leaf(&leaf)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Gradient for every trainable parameter in the store; parameters the
    /// graph never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, t) in self.store.iter() {
            if self.is_frozen(name) {
                continue;
            }
            let g = self
                .bound
                .get(name)
                .and_then(|v| grads.get(*v))
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            out.insert(name.to_string(), g);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl TransformerBlockConfig {
    pub fn new(d_model: usize, n_heads: usize, mlp_ratio: f64) -> Result<Self> {
        let cfg = Self {
            d_model,
            n_heads,
            mlp_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        let h = math::round(self.d_model as f64 * self.mlp_ratio) as usize;
        h.max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[d_in, d_out], Init::TruncatedNormal(INIT_STD)),
        ParamSpec::new(format!("{prefix}.b"), &[d_out], Init::Zeros),
    ]
}

pub fn layer_norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gain"), &[d], Init::Ones),
        ParamSpec::new(format!("{prefix}.bias"), &[d], Init::Zeros),
    ]
}

pub fn mlp_specs(prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.fc1"), d_in, hidden);
    v.extend(linear_specs(&format!("{prefix}.fc2"), hidden, d_out));
    v
}

pub fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    ["q", "k", "v", "o"]
        .iter()
        .flat_map(|p| linear_specs(&format!("{prefix}.{p}"), d, d))
        .collect()
}

pub fn block_specs(prefix: &str, cfg: &TransformerBlockConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut v = layer_norm_specs(&format!("{prefix}.ln1"), d);
    v.extend(attention_specs(&format!("{prefix}.attn"), d));
    v.extend(layer_norm_specs(&format!("{prefix}.ln2"), d));
    v.extend(mlp_specs(&format!("{prefix}.mlp"), d, cfg.hidden(), d));
    v
}

/// `x · W + b` over the last axis. Accepts `[in]` or `[rows×in]`.
pub fn linear(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let shape = g.tape.shape(x).to_vec();
    let x2 = if shape.len() == 1 {
        g.tape.reshape(x, &[1, shape[0]])?
    } else {
        x
    };
    let y = g.tape.matmul(x2, w)?;
    let y = g.tape.add_bias(y, b)?;
    if shape.len() == 1 {
        let out = g.tape.shape(y)[1];
        Ok(g.tape.reshape(y, &[out])?)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    Ok(g.tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
}

pub fn embedding_lookup(g: &mut Graph<'_>, ids: &[usize], table: &str) -> Result<Var> {
    let t = g.param(table)?;
    Ok(g.tape.gather(t, ids)?)
}

/// linear → GELU → linear.
pub fn two_layer_mlp(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Unmasked multi-head self-attention over `x: [l×d]`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    x: Var,
    prefix: &str,
    cfg: &TransformerBlockConfig,
) -> Result<Var> {
    let q = linear(g, x, &format!("{prefix}.q"))?;
    let k = linear(g, x, &format!("{prefix}.k"))?;
    let v = linear(g, x, &format!("{prefix}.v"))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.tape.slice_cols(q, h * dh, dh)?;
        let kh = g.tape.slice_cols(k, h * dh, dh)?;
        let vh = g.tape.slice_cols(v, h * dh, dh)?;
        let kt = g.tape.transpose(kh)?;
        let scores = g.tape.matmul(qh, kt)?;
        let scores = g.tape.scale(scores, scale)?;
        let attn = g.tape.softmax_rows(scores)?;
        heads.push(g.tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat_last(&heads)?
    };
    linear(g, merged, &format!("{prefix}.o"))
}

/// Pre-norm block: `h = x + attn(ln1(x))`, `out = h + mlp(ln2(h))`.
pub fn transformer_block(
    g: &mut Graph<'_>,
    x: Var,
    prefix: &str,
    cfg: &TransformerBlockConfig,
) -> Result<Var> {
    let n1 = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let a = multi_head_attention(g, n1, &format!("{prefix}.attn"), cfg)?;
    let h = g.tape.add(x, a)?;
    let n2 = layer_norm(g, h, &format!("{prefix}.ln2"))?;
    let m = two_layer_mlp(g, n2, &format!("{prefix}.mlp"))?;
    Ok(g.tape.add(h, m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_from(specs: &[ParamSpec], seed: u64) -> ParamStore {
        init_params(specs, seed).unwrap()
    }

    fn set(store: &mut ParamStore, name: &str, shape: &[usize], data: Vec<f64>) {
        store.insert(name, Tensor::new(shape.to_vec(), data).unwrap());
    }

    fn eye(n: usize) -> Vec<f64> {
        Tensor::eye(n).into_data()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        assert!(TransformerBlockConfig::new(10, 3, 4.0).is_err());
        assert!(TransformerBlockConfig::new(12, 3, 4.0).is_ok());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = TransformerBlockConfig::new(8, 2, 4.0).unwrap();
        let specs = block_specs("b", &cfg);
        let a = store_from(&specs, 7);
        let b = store_from(&specs, 7);
        let c = store_from(&specs, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.iter() {
            assert!(t.requires_grad());
            if name.ends_with(".b") || name.ends_with(".bias") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            }
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|v| *v == 1.0), "{name}");
            }
            if name.ends_with(".w") {
                assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
            }
        }
        let names: Vec<&str> = a.names().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn linear_identity() {
        let mut store = ParamStore::new();
        set(&mut store, "l.w", &[3, 3], eye(3));
        set(&mut store, "l.b", &[3], vec![0.0; 3]);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let y = linear(&mut g, x, "l").unwrap();
        assert_eq!(g.tape.value(y), g.tape.value(x));
        let v = g.tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = linear(&mut g, v, "l").unwrap();
        assert_eq!(g.tape.shape(y), &[3]);
    }

    #[test]
    fn mlp_zero_and_identity_fixtures() {
        let specs = mlp_specs("m", 3, 3, 3);
        let mut store = store_from(&specs, 1);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.tape.constant(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = two_layer_mlp(&mut g, x, "m").unwrap();
        assert!(g.tape.value(y).iter().all(|v| *v == 0.0));

        set(&mut store, "m.fc1.w", &[3, 3], eye(3));
        set(&mut store, "m.fc2.w", &[3, 3], eye(3));
        let mut g = Graph::new(&store);
        let x = g.tape.constant(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = two_layer_mlp(&mut g, x, "m").unwrap();
        let gx = g.tape.gelu(x).unwrap();
        assert_eq!(g.tape.value(y), g.tape.value(gx));
    }

    /// Scalar re-derivation of a 2→3→2 MLP.
    #[test]
    fn mlp_matches_scalar_oracle() {
        let w1 = [[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        let b1 = [0.1, -0.2, 0.05];
        let w2 = [[0.9, -0.3], [-1.2, 0.4], [0.6, 0.8]];
        let b2 = [0.01, -0.02];
        let x = [1.5, -0.5];

        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()));
        let mut hidden = [0.0; 3];
        for j in 0..3 {
            let mut s = b1[j];
            for i in 0..2 {
                s += x[i] * w1[i][j];
            }
            hidden[j] = gelu(s);
        }
        let mut expect = [0.0; 2];
        for k in 0..2 {
            let mut s = b2[k];
            for j in 0..3 {
                s += hidden[j] * w2[j][k];
            }
            expect[k] = s;
        }

        let mut store = ParamStore::new();
        set(&mut store, "m.fc1.w", &[2, 3], w1.iter().flatten().copied().collect());
        set(&mut store, "m.fc1.b", &[3], b1.to_vec());
        set(&mut store, "m.fc2.w", &[3, 2], w2.iter().flatten().copied().collect());
        set(&mut store, "m.fc2.b", &[2], b2.to_vec());
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(&[2], x.to_vec()).unwrap();
        let y = two_layer_mlp(&mut g, xv, "m").unwrap();
        for (a, b) in g.tape.value(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let cfg = TransformerBlockConfig::new(4, 2, 4.0).unwrap();
        let mut store = store_from(&attention_specs("a", 4), 3);
        set(&mut store, "a.o.w", &[4, 4], eye(4));
        let mut g = Graph::new(&store);
        let x = g.tape.constant(&[1, 4], vec![0.3, -0.2, 1.0, 0.7]).unwrap();
        let y = multi_head_attention(&mut g, x, "a", &cfg).unwrap();
        let v = linear(&mut g, x, "a.v").unwrap();
        for (a, b) in g.tape.value(y).iter().zip(g.tape.value(v)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = TransformerBlockConfig::new(4, 2, 2.0).unwrap();
        let mut store = store_from(&block_specs("b", &cfg), 3);
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let x = g
            .tape
            .constant(&[3, 4], (0..12).map(|i| i as f64 * 0.1 - 0.4).collect())
            .unwrap();
        let y = transformer_block(&mut g, x, "b", &cfg).unwrap();
        assert_eq!(g.tape.value(y), g.tape.value(x));
    }

    #[test]
    fn block_preserves_shape_and_reaches_every_param() {
        let cfg = TransformerBlockConfig::new(8, 2, 4.0).unwrap();
        let store = store_from(&block_specs("b", &cfg), 11);
        for l in [1usize, 2, 5] {
            let mut g = Graph::new(&store);
            let data: Vec<f64> = (0..l * 8).map(|i| libm::sin(i as f64 * 0.37)).collect();
            let x = g.tape.constant(&[l, 8], data).unwrap();
            let y = transformer_block(&mut g, x, "b", &cfg).unwrap();
            assert_eq!(g.tape.shape(y), &[l, 8]);
            if l == 5 {
                // Cubed output so the mean is not flat in the final bias.
                let sq = g.tape.mul(y, y).unwrap();
                let cube = g.tape.mul(sq, y).unwrap();
                let loss = g.tape.mean_all(cube).unwrap();
                let grads = g.tape.backward(loss).unwrap();
                for (name, gr) in g.param_grads(&grads) {
                    assert!(gr.iter().any(|v| *v != 0.0), "dead parameter {name}");
                }
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let store = store_from(&mlp_specs("m", 2, 3, 2), 5);
        let mut g = Graph::with_frozen(&store, &["m.fc1"]);
        let x = g.tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let y = two_layer_mlp(&mut g, x, "m").unwrap();
        let loss = g.tape.sum_all(y).unwrap();
        let grads = g.tape.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        assert!(!pg.contains_key("m.fc1.w"));
        assert!(pg.contains_key("m.fc2.w"));
    }
}
