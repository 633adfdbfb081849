//! Parameterised building blocks shared by the generator, discriminator
//! and classifier. Each block owns only [`ParamId`]s; values live in the
//! network's [`ParamStore`] and are bound onto a [`Graph`] per pass.

use crate::autodiff::{ConvGeom, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How a block's parameters enter the graph.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.bind(self.store, id, self.trainable)
    }
}

/// Fan-in scaled Gaussian for convolution and dense weights.
pub fn fan_in_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// `k × k` convolution with bias over NHWC input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let std = fan_in_std(kernel * kernel * cin);
        let weight = store.add(
            format!("{name}.w"),
            Tensor::gaussian_init(rng, &[kernel, kernel, cin, cout], std)?,
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Ok(Self {
            weight,
            bias,
            geom: ConvGeom {
                kernel,
                stride,
                pad,
            },
        })
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.conv2d(x, w, self.geom)?;
        g.add_bias(y, b)
    }
}

/// Affine map `x W + b` on `[N, in]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, out: usize) -> Result<Self> {
        let weight = store.add(
            format!("{name}.w"),
            Tensor::gaussian_init(rng, &[fan_in, out], fan_in_std(fan_in))?,
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[out]));
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Learnable lookup table from attribute id to a dense vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, vocab: usize, dim: usize, std: f64) -> Result<Self> {
        let table = store.add(format!("{name}.table"), Tensor::gaussian_init(rng, &[vocab, dim], std)?);
        Ok(Self { table })
    }

    pub fn vocab(&self, store: &ParamStore) -> usize {
        store.get(self.table).shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, p: Bind, ids: &[usize]) -> Result<Var> {
        let t = p.var(g, self.table);
        g.gather(t, ids)
    }
}

/// Tiles `c[N, E]` over an `H × W` grid, giving `[N, H, W, E]`.
pub fn tile_condition(g: &mut Graph, c: Var, h: usize, w: usize) -> Result<Var> {
    let (n, e) = g.value(c).dims2()?;
    let tiled = g.repeat_rows(c, h * w);
    g.reshape(tiled, &[n, h, w, e])
}
