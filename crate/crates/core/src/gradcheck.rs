//! Finite-difference checks of reverse-mode gradients for every
//! conditioning layer and both adversarial losses.

use crate::autodiff::{finite_diff_grad, max_relative_error, Gradients, Graph, ParamId, ParamStore, FD_STEP};
use crate::conditioning::{LayerDims, LayerKind, LayerParams};
use crate::error::{Error, Result};
use crate::gan::{
    discriminator_loss, discriminator_loss_graph, generator_loss, generator_loss_graph, Batch, Discriminator,
    Generator, NetConfig, Trainable,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative error bound for a passing check.
pub const GRAD_TOL: f64 = 1e-4;
/// Differences below this are treated as agreement regardless of scale.
pub const ABS_FLOOR: f64 = 1e-7;
pub const DEFAULT_DRAWS: usize = 20;

/// Spread of the redrawn parameters in the loss checks.
const NET_STD: f64 = 0.3;


pub const CSV_HEADER: &str = "target,draws,max_rel_err,max_abs_err,pass";

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub target: String,
    pub draws: usize,
    /// Relative error, with differences under [`ABS_FLOOR`] counted as zero.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradRow {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{}",
            self.target,
            self.draws,
            self.max_rel_err,
            self.max_abs_err,
            self.pass()
        )
    }
}

pub fn csv(rows: &[GradRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Central difference of coordinate `i` at step `h`.
fn central<F>(f: &mut F, x: &mut Tensor, i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let orig = x.data()[i];
    x.data_mut()[i] = orig + h;
    let up = f(x)?;
    x.data_mut()[i] = orig - h;
    let down = f(x)?;
    x.data_mut()[i] = orig;
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::NonFinite(format!("objective at coordinate {i}")));
    }
    Ok((up - down) / (2.0 * h))
}

fn agree(a: f64, b: f64) -> bool {
    max_relative_error(&[a], &[b], ABS_FLOOR) <= GRAD_TOL / 10.0
}

/// Smallest step tried when refining a coordinate.
const MIN_STEP: f64 = 1e-9;

/// Numeric gradient whose every coordinate is stable under a tenfold step
/// reduction. A coordinate whose estimate moves is refined with ever
/// smaller steps until two successive estimates agree; this resolves
/// steps that straddle a kink of a piecewise-linear activation without
/// consulting the analytic gradient.
pub fn converged_numeric<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let coarse = finite_diff_grad(&mut f, x, h)?;
    let mut fine = finite_diff_grad(&mut f, x, h / 10.0)?;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let (mut prev, mut cur) = (coarse.data()[i], fine.data()[i]);
        let mut step = h / 10.0;
        while !agree(prev, cur) && step / 10.0 >= MIN_STEP {
            step /= 10.0;
            prev = cur;
            cur = central(&mut f, &mut probe, i, step)?;
        }
        fine.data_mut()[i] = cur;
    }
    Ok(fine)
}

/// Compares `analytic` against converged central differences of `f` for
/// every parameter in `ids`.
fn compare<F>(store: &ParamStore, ids: &[ParamId], analytic: &Gradients, mut f: F) -> Result<Errors>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut worst = Errors::default();
    let mut probe = store.clone();
    for &id in ids {
        let base = store.get(id).clone();
        let numeric = converged_numeric(
            |t| {
                *probe.get_mut(id) = t.clone();
                f(&probe)
            },
            &base,
            FD_STEP,
        )?;
        *probe.get_mut(id) = base.clone();
        let zero = Tensor::zeros(base.shape());
        let a = analytic.get(&id).unwrap_or(&zero);
        worst = worst.max(Errors {
            rel: max_relative_error(a.data(), numeric.data(), ABS_FLOOR),
            abs: a.max_abs_diff(&numeric)?,
        });
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Errors {
    rel: f64,
    abs: f64,
}

impl Errors {
    fn max(self, o: Errors) -> Errors {
        Errors {
            rel: self.rel.max(o.rel),
            abs: self.abs.max(o.abs),
        }
    }
}

/// Small dimensions used by the layer checks; `O == D` so the residual
/// layer qualifies.
pub fn layer_check_dims() -> LayerDims {
    LayerDims::new(4, 3, 4)
}

const LAYER_RANK: usize = 2;
const LAYER_BATCH: usize = 2;
const BRL_GRID: usize = 2;

/// Random linear functional `sum(out ⊙ r)` of the layer output, checked
/// with respect to every weight and both inputs.
fn layer_draw(kind: LayerKind, rng: &mut Rng) -> Result<Errors> {
    let dims = layer_check_dims();
    let layer = LayerParams::init(kind, rng, dims, LAYER_RANK, 1.0)?;
    let mut store = ParamStore::new();
    let w: Vec<ParamId> = layer
        .weights()
        .into_iter()
        .map(|(name, t)| store.add(name, t.clone()))
        .collect();
    let x_shape = if kind == LayerKind::Brl {
        vec![LAYER_BATCH, BRL_GRID, BRL_GRID, dims.feature]
    } else {
        vec![LAYER_BATCH, dims.feature]
    };
    let x = store.add("x", Tensor::gaussian_init(rng, &x_shape, 1.0)?);
    let c = store.add("c", Tensor::gaussian_init(rng, &[LAYER_BATCH, dims.condition], 1.0)?);
    let out_shape = {
        let mut s = x_shape.clone();
        *s.last_mut().expect("non-empty") = dims.output;
        s
    };
    let r = Tensor::gaussian_init(rng, &out_shape, 1.0)?;

    let eval = |s: &ParamStore, g: &mut Graph| -> Result<crate::autodiff::Var> {
        let wv: Vec<_> = w.iter().map(|&id| g.bind(s, id, true)).collect();
        let xv = g.bind(s, x, true);
        let cv = g.bind(s, c, true);
        let y = layer.apply(g, &wv, xv, cv)?;
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv)?;
        Ok(g.sum(prod))
    };
    let mut g = Graph::new();
    let root = eval(&store, &mut g)?;
    let analytic = g.backward(root)?;
    let ids: Vec<ParamId> = store.ids().collect();
    compare(&store, &ids, &analytic, |s| {
        let mut g = Graph::new();
        let root = eval(s, &mut g)?;
        Ok(g.scalar(root))
    })
}

pub fn check_layer(kind: LayerKind, draws: usize, rng: &mut Rng) -> Result<GradRow> {
    if draws == 0 {
        return Err(Error::Parameter("at least one draw required".into()));
    }
    let mut worst = Errors::default();
    for k in 0..draws {
        worst = worst.max(layer_draw(kind, &mut rng.fork(k as u64))?);
    }
    Ok(GradRow {
        target: kind.name().to_string(),
        draws,
        max_rel_err: worst.rel,
        max_abs_err: worst.abs,
    })
}

/// Tiny networks at 8×8 resolution for the loss checks.
pub fn loss_check_net() -> NetConfig {
    NetConfig {
        image_size: 8,
        channels: [3, 4],
        feature_dim: 4,
        embed_dim: 3,
        rank: 2,
        depth: 2,
        classes: 4,
        squash: true,
    }
}

fn redraw(store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = Tensor::gaussian_init(rng, store.get(id).shape(), NET_STD)?;
        store.set(id, t)?;
    }
    Ok(())
}

fn loss_batch(cfg: &NetConfig, rng: &mut Rng) -> Result<Batch> {
    let s = cfg.image_size;
    let images = Tensor::uniform_init(rng, &[2, s, s, 3], -1.0, 1.0)?;
    let mut ids = || rng.below(cfg.classes);
    let matching = vec![ids(), ids()];
    let editing = vec![ids(), ids()];
    let mismatching = matching
        .iter()
        .map(|&t| crate::gan::sample_mismatch(cfg.classes, t, rng))
        .collect::<Result<_>>()?;
    Ok(Batch {
        images,
        matching,
        editing,
        mismatching,
    })
}

fn loss_draw(rng: &mut Rng) -> Result<(Errors, Errors)> {
    let cfg = loss_check_net();
    let mut gen = Generator::new(&cfg, rng)?;
    let mut disc = Discriminator::new(&cfg, rng)?;
    redraw(&mut gen.store, rng)?;
    redraw(&mut disc.store, rng)?;
    let batch = loss_batch(&cfg, rng)?;

    let mut g = Graph::new();
    let ld = discriminator_loss_graph(&mut g, &disc, &gen, &batch, Trainable::Discriminator)?;
    let grads = g.backward(ld)?;
    let ids: Vec<ParamId> = disc.store.ids().collect();
    let mut probe = disc.clone();
    let err_d = compare(&disc.store, &ids, &grads, |s| {
        probe.store.clone_from(s);
        discriminator_loss(&probe, &gen, &batch)
    })?;

    let mut g = Graph::new();
    let lg = generator_loss_graph(&mut g, &disc, &gen, &batch, Trainable::Generator)?;
    let grads = g.backward(lg)?;
    let ids: Vec<ParamId> = gen.store.ids().collect();
    let mut probe = gen.clone();
    let err_g = compare(&gen.store, &ids, &grads, |s| {
        probe.store.clone_from(s);
        generator_loss(&disc, &probe, &batch)
    })?;
    Ok((err_d, err_g))
}

/// Checks the discriminator loss against the discriminator's parameters
/// and the generator loss against the generator's.
pub fn check_losses(draws: usize, rng: &mut Rng) -> Result<[GradRow; 2]> {
    if draws == 0 {
        return Err(Error::Parameter("at least one draw required".into()));
    }
    let (mut wd, mut wg) = (Errors::default(), Errors::default());
    for k in 0..draws {
        let (d, g) = loss_draw(&mut rng.fork(1000 + k as u64))?;
        wd = wd.max(d);
        wg = wg.max(g);
    }
    Ok([
        GradRow {
            target: "loss_d".into(),
            draws,
            max_rel_err: wd.rel,
            max_abs_err: wd.abs,
        },
        GradRow {
            target: "loss_g".into(),
            draws,
            max_rel_err: wg.rel,
            max_abs_err: wg.abs,
        },
    ])
}

/// Layer rows for `layers` followed by both loss rows.
pub fn run(layers: &[LayerKind], include_losses: bool, draws: usize, rng: &mut Rng) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for &kind in layers {
        rows.push(check_layer(kind, draws, rng)?);
    }
    if include_losses {
        rows.extend(check_losses(draws, rng)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_a_few_draws() {
        let mut rng = Rng::new(3);
        for kind in LayerKind::ALL {
            let row = check_layer(kind, 3, &mut rng).unwrap();
            assert!(row.pass(), "{}: {}", row.target, row.max_rel_err);
        }
    }

    #[test]
    fn losses_pass_one_draw() {
        let rows = check_losses(1, &mut Rng::new(5)).unwrap();
        for r in rows {
            assert!(r.pass(), "{}: {}", r.target, r.max_rel_err);
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(&[1.0, 2.0]));
        let mut grads = Gradients::new();
        grads.insert(id, Tensor::vector(&[2.0, 4.0 * 1.01]));
        let err = compare(&store, &[id], &grads, |s| Ok(s.get(id).data().iter().map(|v| v * v).sum())).unwrap();
        assert!(err.rel > GRAD_TOL);
        assert!((err.abs - 0.04).abs() < 1e-6);
    }

    #[test]
    fn refinement_resolves_a_nearby_kink() {
        let leaky = |t: &Tensor| Ok(t.data().iter().map(|&v| if v > 0.0 { v } else { 0.2 * v }).sum());
        let x = Tensor::vector(&[3e-6, -0.5]);
        let plain = finite_diff_grad(leaky, &x, FD_STEP).unwrap();
        assert!((plain.data()[0] - 1.0).abs() > 0.1);
        let refined = converged_numeric(leaky, &x, FD_STEP).unwrap();
        assert!((refined.data()[0] - 1.0).abs() < 1e-9);
        assert!((refined.data()[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn csv_layout() {
        let row = GradRow {
            target: "brl".into(),
            draws: 20,
            max_rel_err: 2.5e-9,
            max_abs_err: 1e-11,
        };
        assert_eq!(
            csv(&[row]),
            "target,draws,max_rel_err,max_abs_err,pass\nbrl,20,2.5e-9,1e-11,true\n"
        );
    }
}
