//! Conditioning layers fusing a feature vector `I_f ∈ R^D` with a
//! condition vector `I_c ∈ R^D'` into `I_o ∈ R^O`.
//!
//! | layer        | output                                  |
//! |--------------|-----------------------------------------|
//! | concatenation| `I_f W_f + I_c W_c`                     |
//! | FiLM         | `(I_f W_f) ⊙ (I_c W̄_c) + I_c W_c`       |
//! | bilinear     | `I_o[i] = I_f W_i I_cᵀ`                 |
//! | low-rank     | `(I_f U ⊙ I_c V) Pᵀ`                    |
//!
//! Every layer has a graph form working on row batches (`[N, D]` and
//! `[N, D']`), which is what the networks and the gradient checks use,
//! and a single-vector convenience form built on top of it.
//!
//! The bilinear residual layer ([`BilinearResidual`]) applies the
//! low-rank layer at every spatial location of an `[N, H, W, D]` feature
//! map with the condition tiled across locations, adds the input back and
//! applies an activation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;

/// Refuse full bilinear tensors above this many weights.
pub const MAX_BILINEAR_PARAMS: usize = 10_000_000;

/// Slope of the leaky rectifier used inside the fusing stack.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    /// `D`, width of `I_f`.
    pub feature: usize,
    /// `D'`, width of `I_c`.
    pub condition: usize,
    /// `O`, width of `I_o`.
    pub output: usize,
}

impl LayerDims {
    pub fn new(feature: usize, condition: usize, output: usize) -> Self {
        Self {
            feature,
            condition,
            output,
        }
    }

    /// Parses `DxD'xO`, e.g. `8x4x6`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parameter(format!("bad dims {s:?}: {e}")))?;
        match parts[..] {
            [d, dc, o] if d > 0 && dc > 0 && o > 0 => Ok(Self::new(d, dc, o)),
            _ => Err(Error::Parameter(format!("dims must be DxD'xO, got {s:?}"))),
        }
    }
}

fn expect_shape(op: &'static str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(dim_err(op, t.shape(), want));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcatParams {
    /// `[D, O]`
    pub w_f: Tensor,
    /// `[D', O]`
    pub w_c: Tensor,
}

impl ConcatParams {
    pub fn new(w_f: Tensor, w_c: Tensor) -> Result<Self> {
        let (_, o) = w_f.dims2()?;
        let (dc, o2) = w_c.dims2()?;
        if o != o2 {
            return Err(dim_err("ConcatParams", w_f.shape(), w_c.shape()));
        }
        let _ = dc;
        Ok(Self { w_f, w_c })
    }

    pub fn init(rng: &mut Rng, dims: LayerDims, std: f64) -> Result<Self> {
        Self::new(
            Tensor::gaussian_init(rng, &[dims.feature, dims.output], std)?,
            Tensor::gaussian_init(rng, &[dims.condition, dims.output], std)?,
        )
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims::new(self.w_f.shape()[0], self.w_c.shape()[0], self.w_f.shape()[1])
    }

    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_f", &self.w_f), ("w_c", &self.w_c)]
    }

    /// `x W_f + c W_c` on row batches; `w = [W_f, W_c]`.
    pub fn apply(g: &mut Graph, w: &[Var], x: Var, c: Var) -> Result<Var> {
        let xf = g.matmul(x, w[0])?;
        let cc = g.matmul(c, w[1])?;
        g.add(xf, cc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilmParams {
    /// `[D, O]`
    pub w_f: Tensor,
    /// `W̄_c`, `[D', O]`: produces the per-feature gain.
    pub gain: Tensor,
    /// `[D', O]`: produces the per-feature bias.
    pub w_c: Tensor,
}

impl FilmParams {
    pub fn new(w_f: Tensor, gain: Tensor, w_c: Tensor) -> Result<Self> {
        let (_, o) = w_f.dims2()?;
        let (dc, o2) = gain.dims2()?;
        if o2 != o {
            return Err(dim_err("FilmParams", w_f.shape(), gain.shape()));
        }
        expect_shape("FilmParams", &w_c, &[dc, o])?;
        Ok(Self { w_f, gain, w_c })
    }

    pub fn init(rng: &mut Rng, dims: LayerDims, std: f64) -> Result<Self> {
        Self::new(
            Tensor::gaussian_init(rng, &[dims.feature, dims.output], std)?,
            Tensor::gaussian_init(rng, &[dims.condition, dims.output], std)?,
            Tensor::gaussian_init(rng, &[dims.condition, dims.output], std)?,
        )
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims::new(self.w_f.shape()[0], self.w_c.shape()[0], self.w_f.shape()[1])
    }

    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w_f", &self.w_f), ("gain", &self.gain), ("w_c", &self.w_c)]
    }

    /// `(x W_f) ⊙ (c W̄_c) + c W_c`; `w = [W_f, W̄_c, W_c]`.
    pub fn apply(g: &mut Graph, w: &[Var], x: Var, c: Var) -> Result<Var> {
        let xf = g.matmul(x, w[0])?;
        let gain = g.matmul(c, w[1])?;
        let bias = g.matmul(c, w[2])?;
        let modulated = g.mul(xf, gain)?;
        g.add(modulated, bias)
    }

    /// Column `i` of each weight: `(w_fᵢ, w̄_cᵢ, w_cᵢ)`.
    pub fn output_columns(&self, i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let col = |t: &Tensor| {
            let (r, _) = t.dims2().expect("matrix");
            (0..r).map(|k| t.at(&[k, i])).collect()
        };
        (col(&self.w_f), col(&self.gain), col(&self.w_c))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilinearParams {
    /// `[O, D, D']`, one matrix `W_i` per output feature.
    pub w: Tensor,
}

impl BilinearParams {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 3 {
            return Err(Error::Parameter(format!(
                "bilinear weights must be [O, D, D'], got {:?}",
                w.shape()
            )));
        }
        if w.len() > MAX_BILINEAR_PARAMS {
            return Err(Error::Config(format!(
                "full bilinear layer with {} weights exceeds the {MAX_BILINEAR_PARAMS} limit",
                w.len()
            )));
        }
        Ok(Self { w })
    }

    pub fn init(rng: &mut Rng, dims: LayerDims, std: f64) -> Result<Self> {
        let n = dims.output * dims.feature * dims.condition;
        if n > MAX_BILINEAR_PARAMS {
            return Err(Error::Config(format!(
                "full bilinear layer with {n} weights exceeds the {MAX_BILINEAR_PARAMS} limit"
            )));
        }
        Self::new(Tensor::gaussian_init(
            rng,
            &[dims.output, dims.feature, dims.condition],
            std,
        )?)
    }

    /// Builds the layer from explicit per-output matrices `W_i[D, D']`.
    pub fn from_slices(slices: &[Tensor]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Parameter("no output slices".into()))?;
        let (d, dc) = first.dims2()?;
        let mut data = Vec::with_capacity(slices.len() * d * dc);
        for s in slices {
            expect_shape("BilinearParams::from_slices", s, &[d, dc])?;
            data.extend_from_slice(s.data());
        }
        Self::new(Tensor::new(&[slices.len(), d, dc], data)?)
    }

    pub fn slice(&self, i: usize) -> Tensor {
        let s = self.w.shape();
        let n = s[1] * s[2];
        Tensor::new(&[s[1], s[2]], self.w.data()[i * n..(i + 1) * n].to_vec()).expect("slice")
    }

    pub fn dims(&self) -> LayerDims {
        let s = self.w.shape();
        LayerDims::new(s[1], s[2], s[0])
    }

    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w", &self.w)]
    }

    pub fn apply(g: &mut Graph, w: &[Var], x: Var, c: Var) -> Result<Var> {
        g.bilinear(x, w[0], c)
    }
}

/// Factors `U[D, d]`, `V[D', d]` and projection `P[O, d]` of the low-rank
/// bilinear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankParams {
    pub u: Tensor,
    pub v: Tensor,
    pub p: Tensor,
}

impl LowRankParams {
    pub fn new(u: Tensor, v: Tensor, p: Tensor) -> Result<Self> {
        let (d_f, rank) = u.dims2()?;
        let (d_c, r2) = v.dims2()?;
        let (_, r3) = p.dims2()?;
        if r2 != rank || r3 != rank {
            return Err(Error::Dimension {
                op: "LowRankParams",
                lhs: u.shape().to_vec(),
                rhs: vec![d_c, r2, r3],
            });
        }
        if rank > d_f.min(d_c) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds min(D, D') = {}",
                d_f.min(d_c)
            )));
        }
        Ok(Self { u, v, p })
    }

    pub fn init(rng: &mut Rng, dims: LayerDims, rank: usize, std: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        Self::new(
            Tensor::gaussian_init(rng, &[dims.feature, rank], std)?,
            Tensor::gaussian_init(rng, &[dims.condition, rank], std)?,
            Tensor::gaussian_init(rng, &[dims.output, rank], std)?,
        )
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims::new(self.u.shape()[0], self.v.shape()[0], self.p.shape()[0])
    }

    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("u", &self.u), ("v", &self.v), ("p", &self.p)]
    }

    /// `(x U ⊙ c V) Pᵀ`; `w = [U, V, P]`.
    pub fn apply(g: &mut Graph, w: &[Var], x: Var, c: Var) -> Result<Var> {
        let xu = g.matmul(x, w[0])?;
        let cv = g.matmul(c, w[1])?;
        let joint = g.mul(xu, cv)?;
        let pt = g.transpose(w[2])?;
        g.matmul(joint, pt)
    }

    /// The equivalent full bilinear layer, `W_i = U diag(P[i, :]) Vᵀ`.
    pub fn to_bilinear(&self) -> Result<BilinearParams> {
        let dims = self.dims();
        let rank = self.rank();
        let mut slices = Vec::with_capacity(dims.output);
        for i in 0..dims.output {
            let mut scaled = self.u.clone();
            for row in scaled.data_mut().chunks_exact_mut(rank) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= self.p.at(&[i, j]);
                }
            }
            slices.push(scaled.matmul(&self.v.transpose()?)?);
        }
        BilinearParams::from_slices(&slices)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

/// Bilinear residual layer over spatial feature maps:
/// `out[n, h, w] = act(x[n, h, w] + (x[n, h, w] U ⊙ c[n] V) Pᵀ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearResidual {
    params: LowRankParams,
    activation: Activation,
}

impl BilinearResidual {
    /// Fails unless `O == D`, which the residual add requires.
    pub fn new(params: LowRankParams, activation: Activation) -> Result<Self> {
        check_residual(params.dims())?;
        Ok(Self { params, activation })
    }

    pub fn params(&self) -> &LowRankParams {
        &self.params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Graph form on `x[N, H, W, D]` and `c[N, D']`; `w = [U, V, P]`.
    /// The condition is projected by `V` once per sample and the result
    /// tiled across the `H × W` locations.
    pub fn apply(
        g: &mut Graph,
        w: &[Var],
        x: Var,
        c: Var,
        activation: Activation,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let [n, h, wd, d] = shape[..] else {
            return Err(dim_err("brl", &shape, &[0, 0, 0, 0]));
        };
        if g.value(c).shape().first() != Some(&n) {
            return Err(dim_err("brl", &shape, g.value(c).shape()));
        }
        let rows = g.reshape(x, &[n * h * wd, d])?;
        let xu = g.matmul(rows, w[0])?;
        let cv = g.matmul(c, w[1])?;
        let cv_tiled = g.repeat_rows(cv, h * wd);
        let joint = g.mul(xu, cv_tiled)?;
        let pt = g.transpose(w[2])?;
        let fused = g.matmul(joint, pt)?;
        let sum = g.add(rows, fused)?;
        let act = activation.apply(g, sum);
        g.reshape(act, &shape)
    }
}

pub(crate) fn check_residual(dims: LayerDims) -> Result<()> {
    if dims.output != dims.feature {
        return Err(Error::Config(format!(
            "residual layer needs O == D, got O = {} and D = {}",
            dims.output, dims.feature
        )));
    }
    Ok(())
}

/// Evaluates a graph-form layer on single vectors.
fn eval_single(
    weights: &[(&'static str, &Tensor)],
    i_f: &Tensor,
    i_c: &Tensor,
    apply: impl Fn(&mut Graph, &[Var], Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let w: Vec<Var> = weights.iter().map(|(_, t)| g.constant((*t).clone())).collect();
    let x = g.constant(i_f.reshape(&[1, i_f.len()])?);
    let c = g.constant(i_c.reshape(&[1, i_c.len()])?);
    let out = apply(&mut g, &w, x, c)?;
    let v = g.value(out);
    v.reshape(&[v.len()])
}

fn check_inputs(dims: LayerDims, i_f: &Tensor, i_c: &Tensor) -> Result<()> {
    if i_f.shape() != [dims.feature] {
        return Err(dim_err("conditioning input I_f", i_f.shape(), &[dims.feature]));
    }
    if i_c.shape() != [dims.condition] {
        return Err(dim_err("conditioning input I_c", i_c.shape(), &[dims.condition]));
    }
    Ok(())
}

pub fn concat_condition(p: &ConcatParams, i_f: &Tensor, i_c: &Tensor) -> Result<Tensor> {
    check_inputs(p.dims(), i_f, i_c)?;
    eval_single(&p.weights(), i_f, i_c, ConcatParams::apply)
}

pub fn film_condition(p: &FilmParams, i_f: &Tensor, i_c: &Tensor) -> Result<Tensor> {
    check_inputs(p.dims(), i_f, i_c)?;
    eval_single(&p.weights(), i_f, i_c, FilmParams::apply)
}

pub fn bilinear_condition(p: &BilinearParams, i_f: &Tensor, i_c: &Tensor) -> Result<Tensor> {
    check_inputs(p.dims(), i_f, i_c)?;
    eval_single(&p.weights(), i_f, i_c, BilinearParams::apply)
}

pub fn low_rank_bilinear(p: &LowRankParams, i_f: &Tensor, i_c: &Tensor) -> Result<Tensor> {
    check_inputs(p.dims(), i_f, i_c)?;
    eval_single(&p.weights(), i_f, i_c, LowRankParams::apply)
}

/// Applies a residual layer to one `[H, W, D]` map.
pub fn brl_forward(layer: &BilinearResidual, i_f: &Tensor, i_c: &Tensor) -> Result<Tensor> {
    let dims = layer.params.dims();
    let s = i_f.shape();
    if s.len() != 3 || s[2] != dims.feature {
        return Err(dim_err("brl_forward", s, &[0, 0, dims.feature]));
    }
    if i_c.shape() != [dims.condition] {
        return Err(dim_err("brl_forward", i_c.shape(), &[dims.condition]));
    }
    let mut g = Graph::new();
    let w: Vec<Var> = layer
        .params
        .weights()
        .iter()
        .map(|(_, t)| g.constant((*t).clone()))
        .collect();
    let x = g.constant(i_f.reshape(&[1, s[0], s[1], s[2]])?);
    let c = g.constant(i_c.reshape(&[1, dims.condition])?);
    let out = BilinearResidual::apply(&mut g, &w, x, c, layer.activation)?;
    g.value(out).reshape(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Concat,
    Film,
    Bilinear,
    Brl,
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "film" => Ok(Self::Film),
            "bilinear" => Ok(Self::Bilinear),
            "brl" => Ok(Self::Brl),
            _ => Err(Error::Parameter(format!("unknown layer kind {s:?}"))),
        }
    }
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [Self::Concat, Self::Film, Self::Bilinear, Self::Brl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Concat => "concat",
            Self::Film => "film",
            Self::Bilinear => "bilinear",
            Self::Brl => "brl",
        }
    }
}

/// Any conditioning layer, for storage and generic checks.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Concat(ConcatParams),
    Film(FilmParams),
    Bilinear(BilinearParams),
    /// Residual low-rank layer; `O == D` is enforced.
    Brl(BilinearResidual),
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    kind: LayerKind,
    feature: usize,
    condition: usize,
    output: usize,
    rank: Option<usize>,
    activation: Option<Activation>,
    tensors: Vec<String>,
}

impl LayerParams {
    pub fn init(kind: LayerKind, rng: &mut Rng, dims: LayerDims, rank: usize, std: f64) -> Result<Self> {
        Ok(match kind {
            LayerKind::Concat => Self::Concat(ConcatParams::init(rng, dims, std)?),
            LayerKind::Film => Self::Film(FilmParams::init(rng, dims, std)?),
            LayerKind::Bilinear => Self::Bilinear(BilinearParams::init(rng, dims, std)?),
            LayerKind::Brl => {
                check_residual(dims)?;
                Self::Brl(BilinearResidual::new(
                    LowRankParams::init(rng, dims, rank, std)?,
                    Activation::LeakyRelu(LEAKY_SLOPE),
                )?)
            }
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Self::Concat(_) => LayerKind::Concat,
            Self::Film(_) => LayerKind::Film,
            Self::Bilinear(_) => LayerKind::Bilinear,
            Self::Brl(_) => LayerKind::Brl,
        }
    }

    pub fn dims(&self) -> LayerDims {
        match self {
            Self::Concat(p) => p.dims(),
            Self::Film(p) => p.dims(),
            Self::Bilinear(p) => p.dims(),
            Self::Brl(l) => l.params.dims(),
        }
    }

    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Self::Concat(p) => p.weights(),
            Self::Film(p) => p.weights(),
            Self::Bilinear(p) => p.weights(),
            Self::Brl(l) => l.params.weights(),
        }
    }

    /// Rebuilds a layer of the same kind from replacement weights given in
    /// [`LayerParams::weights`] order.
    pub fn with_weights(&self, w: Vec<Tensor>) -> Result<Self> {
        let mut it = w.into_iter();
        let mut next = || it.next().ok_or_else(|| Error::Parameter("missing weight".into()));
        Ok(match self {
            Self::Concat(_) => Self::Concat(ConcatParams::new(next()?, next()?)?),
            Self::Film(_) => Self::Film(FilmParams::new(next()?, next()?, next()?)?),
            Self::Bilinear(_) => Self::Bilinear(BilinearParams::new(next()?)?),
            Self::Brl(l) => Self::Brl(BilinearResidual::new(
                LowRankParams::new(next()?, next()?, next()?)?,
                l.activation,
            )?),
        })
    }

    /// Graph form. Non-residual layers take `x[N, D]`; the residual layer
    /// takes `x[N, H, W, D]`.
    pub fn apply(&self, g: &mut Graph, w: &[Var], x: Var, c: Var) -> Result<Var> {
        match self {
            Self::Concat(_) => ConcatParams::apply(g, w, x, c),
            Self::Film(_) => FilmParams::apply(g, w, x, c),
            Self::Bilinear(_) => BilinearParams::apply(g, w, x, c),
            Self::Brl(l) => BilinearResidual::apply(g, w, x, c, l.activation),
        }
    }

    /// Writes `manifest.json` plus one `.ten` file per weight into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let dims = self.dims();
        let (rank, activation) = match self {
            Self::Brl(l) => (Some(l.params.rank()), Some(l.activation)),
            _ => (None, None),
        };
        let mut names = Vec::new();
        for (name, t) in self.weights() {
            let file = format!("{name}.ten");
            t.save(dir.join(&file))?;
            names.push(file);
        }
        let manifest = LayerManifest {
            kind: self.kind(),
            feature: dims.feature,
            condition: dims.condition,
            output: dims.output,
            rank,
            activation,
            tensors: names,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: LayerManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let tensors = manifest
            .tensors
            .iter()
            .map(|f| Tensor::load(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let mut it = tensors.into_iter();
        let mut next = || it.next().ok_or_else(|| Error::Format("missing tensor".into()));
        let layer = match manifest.kind {
            LayerKind::Concat => Self::Concat(ConcatParams::new(next()?, next()?)?),
            LayerKind::Film => Self::Film(FilmParams::new(next()?, next()?, next()?)?),
            LayerKind::Bilinear => Self::Bilinear(BilinearParams::new(next()?)?),
            LayerKind::Brl => Self::Brl(BilinearResidual::new(
                LowRankParams::new(next()?, next()?, next()?)?,
                manifest.activation.unwrap_or(Activation::LeakyRelu(LEAKY_SLOPE)),
            )?),
        };
        let dims = layer.dims();
        if dims != LayerDims::new(manifest.feature, manifest.condition, manifest.output) {
            return Err(Error::Format(format!(
                "manifest dims disagree with stored tensors ({dims:?})"
            )));
        }
        Ok(layer)
    }
}
