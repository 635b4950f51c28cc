//! Parameterised building blocks on top of [`Graph`].

use alloc::format;
use alloc::vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{InitScheme, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = InitScheme::UniformFanIn { fan_in: d_in };
        let weight = store.add(&format!("{name}.weight"), vec![d_in, d_out], init, rng)?;
        let bias = store.add(&format!("{name}.bias"), vec![d_out], init, rng)?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), vec![d], InitScheme::Ones, rng)?;
        let shift = store.add(&format!("{name}.shift"), vec![d], InitScheme::Zeros, rng)?;
        Ok(Self { gain, shift })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        g.layer_norm(x, gain, shift)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, rng)?,
            out: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Projected attention inputs plus the head maps, before the value product.
pub struct AttentionMaps {
    pub maps: Var,
    pub values: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("width {d_model} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            d_model,
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng)?,
        })
    }

    /// Project queries and keys/values and compute the per-head maps.
    pub fn maps(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys: Var,
        values: Var,
        key_mask: Option<&[bool]>,
        gate: Option<Var>,
    ) -> Result<AttentionMaps> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, values)?;
        let maps = g.attention_maps(q, k, self.heads, key_mask, gate)?;
        Ok(AttentionMaps { maps, values: v })
    }

    /// Output rows `rows` of the attention: head concat then output projection.
    pub fn apply(&self, g: &mut Graph<'_>, m: &AttentionMaps, rows: &[usize]) -> Result<Var> {
        let heads = g.attention_apply(m.maps, m.values, self.heads, rows)?;
        self.output.forward(g, heads)
    }

    /// Standard attention over all query rows. Returns `(output, maps)`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        keys: Var,
        values: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let m = self.maps(g, queries, keys, values, key_mask, None)?;
        let nq = g.dims(queries).0;
        let rows: alloc::vec::Vec<usize> = (0..nq).collect();
        let out = self.apply(g, &m, &rows)?;
        Ok((out, m.maps))
    }
}
