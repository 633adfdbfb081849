//! Attribute-conditioned editing GAN.
//!
//! The generator encodes an image, fuses it with an attribute embedding
//! through a stack of bilinear residual layers, and decodes back to an
//! image: `G(x, t̂) = up(F(down(x), embed(t̂)))`. The discriminator scores
//! an (image, attribute) pair in `(0, 1)`, conditioning by concatenating
//! the tiled attribute embedding onto its image features.
//!
//! Losses are least-squares:
//!
//! ```text
//! L_D = E[D(x, t̄)²] + E[(D(x, t) − 1)²] + E[D(G(x, t̂), t̂)²]
//! L_G = E[(D(G(x, t̂), t̂) − 1)²]
//! ```
//!
//! with every expectation taken as the mean over one shared batch.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::conditioning::{check_residual, Activation, BilinearResidual, LayerDims, INIT_STD, LEAKY_SLOPE};
use crate::data::{Dataset, SamplePair, ShapeWorldSpec};
use crate::error::{Error, Result};
use crate::nn::{tile_condition, Bind, Conv, Embedding};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture of both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub image_size: usize,
    /// Widths of the two intermediate convolution stages.
    pub channels: [usize; 2],
    /// `D`, channel count of the encoded features.
    pub feature_dim: usize,
    /// `D'`, width of the attribute embedding.
    pub embed_dim: usize,
    /// `d`, rank of each fusion layer.
    pub rank: usize,
    /// `N`, number of fusion layers.
    pub depth: usize,
    /// Attribute vocabulary size.
    pub classes: usize,
    /// Squash the discriminator output through a logistic function.
    pub squash: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: [8, 16],
            feature_dim: 32,
            embed_dim: 16,
            rank: 8,
            depth: 4,
            classes: 8,
            squash: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("fusing depth must be at least 1".into()));
        }
        if self.rank == 0 || self.rank > self.feature_dim.min(self.embed_dim) {
            return Err(Error::Config(format!(
                "rank {} must lie in 1..=min(D, D') = {}",
                self.rank,
                self.feature_dim.min(self.embed_dim)
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 attribute classes".into()));
        }
        if self.channels.contains(&0) || self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the encoded features.
    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn fusion_dims(&self) -> LayerDims {
        LayerDims::new(self.feature_dim, self.embed_dim, self.feature_dim)
    }
}

fn conv3(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Conv> {
    Conv::new(store, rng, name, 3, cin, cout, stride, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: NetConfig,
    pub store: ParamStore,
    encoder: Vec<Conv>,
    embed: Embedding,
    fusion: Vec<[ParamId; 3]>,
    decoder: Vec<Conv>,
}

impl Generator {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        check_residual(cfg.fusion_dims())?;
        let mut s = ParamStore::new();
        let [c1, c2] = cfg.channels;
        let d = cfg.feature_dim;
        let encoder = vec![
            conv3(&mut s, rng, "g.enc0", 3, c1, 1)?,
            conv3(&mut s, rng, "g.enc1", c1, c2, 2)?,
            conv3(&mut s, rng, "g.enc2", c2, d, 2)?,
        ];
        let embed = Embedding::new(&mut s, rng, "g.embed", cfg.classes, cfg.embed_dim, 1.0)?;
        let mut fusion = Vec::with_capacity(cfg.depth);
        for layer in 0..cfg.depth {
            let mut add = |name: &str, shape: &[usize]| -> Result<ParamId> {
                Ok(s.add(
                    format!("g.brl{layer}.{name}"),
                    Tensor::gaussian_init(rng, shape, INIT_STD)?,
                ))
            };
            let u = add("u", &[d, cfg.rank])?;
            let v = add("v", &[cfg.embed_dim, cfg.rank])?;
            let p = add("p", &[d, cfg.rank])?;
            fusion.push([u, v, p]);
        }
        let decoder = vec![
            conv3(&mut s, rng, "g.dec0", d, c2, 1)?,
            conv3(&mut s, rng, "g.dec1", c2, c1, 1)?,
            conv3(&mut s, rng, "g.dec2", c1, 3, 1)?,
        ];
        Ok(Self {
            cfg: cfg.clone(),
            store: s,
            encoder,
            embed,
            fusion,
            decoder,
        })
    }

    /// `x[N, S, S, 3]` and one attribute id per sample to `[N, S, S, 3]`.
    pub fn forward(&self, g: &mut Graph, trainable: bool, x: Var, ids: &[usize]) -> Result<Var> {
        let p = Bind {
            store: &self.store,
            trainable,
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.classes) {
            return Err(Error::Vocabulary {
                id: bad,
                size: self.cfg.classes,
            });
        }
        let mut h = x;
        for conv in &self.encoder {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let c = self.embed.forward(g, p, ids)?;
        for ids in &self.fusion {
            let w: Vec<Var> = ids.iter().map(|&id| p.var(g, id)).collect();
            h = BilinearResidual::apply(g, &w, h, c, Activation::LeakyRelu(LEAKY_SLOPE))?;
        }
        for (k, conv) in self.decoder.iter().enumerate() {
            if k < 2 {
                h = g.upsample2x(h)?;
            }
            h = conv.forward(g, p, h)?;
            h = if k + 1 < self.decoder.len() {
                g.leaky_relu(h, LEAKY_SLOPE)
            } else {
                g.tanh(h)
            };
        }
        Ok(h)
    }

    /// Edited images for a batch, without recording gradients.
    pub fn generate(&self, images: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, false, x, ids)?;
        Ok(g.value(y).clone())
    }

    /// Sets every fusion factor `U` and `V` to zero, which turns each
    /// fusion layer into `act(x)`.
    pub fn zero_fusion_factors(&mut self) {
        for [u, v, _] in &self.fusion {
            for id in [*u, *v] {
                let z = Tensor::zeros(self.store.get(id).shape());
                self.store.set(id, z).expect("same shape");
            }
        }
    }

    /// `(U, V, P)` parameter ids of each fusion layer.
    pub fn fusion_layers(&self) -> &[[ParamId; 3]] {
        &self.fusion
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub cfg: NetConfig,
    pub store: ParamStore,
    encoder: Vec<Conv>,
    embed: Embedding,
    joint: Conv,
    head: Conv,
}

impl Discriminator {
    pub fn new(cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let [c1, c2] = cfg.channels;
        let encoder = vec![
            conv3(&mut s, rng, "d.enc0", 3, c1, 2)?,
            conv3(&mut s, rng, "d.enc1", c1, c2, 2)?,
        ];
        let embed = Embedding::new(&mut s, rng, "d.embed", cfg.classes, cfg.embed_dim, 1.0)?;
        let joint = conv3(&mut s, rng, "d.joint", c2 + cfg.embed_dim, c2, 1)?;
        let fs = cfg.feature_size();
        let head = Conv::new(&mut s, rng, "d.head", fs, c2, 1, 1, 0)?;
        Ok(Self {
            cfg: cfg.clone(),
            store: s,
            encoder,
            embed,
            joint,
            head,
        })
    }

    /// Scores `x[N, S, S, 3]` against one attribute id per sample: `[N]`.
    pub fn forward(&self, g: &mut Graph, trainable: bool, x: Var, ids: &[usize]) -> Result<Var> {
        let p = Bind {
            store: &self.store,
            trainable,
        };
        let mut h = x;
        for conv in &self.encoder {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let fs = self.cfg.feature_size();
        let c = self.embed.forward(g, p, ids)?;
        let tiled = tile_condition(g, c, fs, fs)?;
        h = g.concat(h, tiled)?;
        h = self.joint.forward(g, p, h)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        h = self.head.forward(g, p, h)?;
        let h = g.reshape(h, &[ids.len()])?;
        Ok(if self.cfg.squash { g.sigmoid(h) } else { h })
    }

    pub fn score(&self, images: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, false, x, ids)?;
        Ok(g.value(y).clone())
    }

    /// Zeroes the output layer so every score is `sigmoid(bias)` (or
    /// `bias` unsquashed).
    pub fn set_constant_output(&mut self, bias: f64) {
        let w = Tensor::zeros(self.store.get(self.head.weight).shape());
        self.store.set(self.head.weight, w).expect("same shape");
        self.store.set(self.head.bias, Tensor::scalar(bias)).expect("same shape");
    }
}

/// `mean(neg²) + mean((real − 1)²) + mean(fake²)`.
pub fn lsgan_discriminator_objective(g: &mut Graph, neg: Var, real: Var, fake: Var) -> Var {
    let n2 = g.square(neg);
    let neg_term = g.mean(n2);
    let r = g.add_scalar(real, -1.0);
    let r2 = g.square(r);
    let real_term = g.mean(r2);
    let f2 = g.square(fake);
    let fake_term = g.mean(f2);
    let s = g.add(neg_term, real_term).expect("scalars");
    g.add(s, fake_term).expect("scalars")
}

/// `mean((fake − 1)²)`.
pub fn lsgan_generator_objective(g: &mut Graph, fake: Var) -> Var {
    let f = g.add_scalar(fake, -1.0);
    let f2 = g.square(f);
    g.mean(f2)
}

/// A training batch: images with their three attribute roles.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub matching: Vec<usize>,
    pub editing: Vec<usize>,
    pub mismatching: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SamplePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        Ok(Self {
            images: crate::data::stack_images(pairs.iter().map(|p| &p.image)),
            matching: pairs.iter().map(|p| p.matching).collect(),
            editing: pairs.iter().map(|p| p.editing).collect(),
            mismatching: pairs.iter().map(|p| p.mismatching).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.matching.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matching.is_empty()
    }
}

/// Which network's parameters are trainable on a loss graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Generator,
    Discriminator,
    Neither,
}

pub fn discriminator_loss_graph(
    g: &mut Graph,
    disc: &Discriminator,
    gen: &Generator,
    batch: &Batch,
    trainable: Trainable,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let train_d = trainable == Trainable::Discriminator;
    let train_g = trainable == Trainable::Generator;
    let x = g.constant(batch.images.clone());
    let neg = disc.forward(g, train_d, x, &batch.mismatching)?;
    let real = disc.forward(g, train_d, x, &batch.matching)?;
    let fake_img = gen.forward(g, train_g, x, &batch.editing)?;
    let fake = disc.forward(g, train_d, fake_img, &batch.editing)?;
    Ok(lsgan_discriminator_objective(g, neg, real, fake))
}

pub fn generator_loss_graph(
    g: &mut Graph,
    disc: &Discriminator,
    gen: &Generator,
    batch: &Batch,
    trainable: Trainable,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let x = g.constant(batch.images.clone());
    let fake_img = gen.forward(g, trainable == Trainable::Generator, x, &batch.editing)?;
    let fake = disc.forward(g, trainable == Trainable::Discriminator, fake_img, &batch.editing)?;
    Ok(lsgan_generator_objective(g, fake))
}

pub fn discriminator_loss(disc: &Discriminator, gen: &Generator, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let l = discriminator_loss_graph(&mut g, disc, gen, batch, Trainable::Neither)?;
    Ok(g.scalar(l))
}

pub fn generator_loss(disc: &Discriminator, gen: &Generator, batch: &Batch) -> Result<f64> {
    let mut g = Graph::new();
    let l = generator_loss_graph(&mut g, disc, gen, batch, Trainable::Neither)?;
    Ok(g.scalar(l))
}

/// Uniform draw over attribute classes other than `t`.
pub fn sample_mismatch(num_classes: usize, t: usize, rng: &mut Rng) -> Result<usize> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "mismatch sampling needs at least 2 classes, got {num_classes}"
        )));
    }
    if t >= num_classes {
        return Err(Error::Vocabulary {
            id: t,
            size: num_classes,
        });
    }
    let r = rng.below(num_classes - 1);
    Ok(if r >= t { r + 1 } else { r })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub rank: usize,
    pub depth: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0: never).
    pub checkpoint_every: usize,
    pub squash: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 64,
            epochs: 100,
            rank: 8,
            depth: 4,
            seed: 0,
            checkpoint_every: 0,
            squash: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        if self.rank == 0 || self.depth == 0 {
            return bad("rank and depth must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub fn net_config(&self, data: &Dataset) -> NetConfig {
        self.net_config_for(&data.spec)
    }

    pub fn net_config_for(&self, spec: &ShapeWorldSpec) -> NetConfig {
        NetConfig {
            image_size: spec.image_size,
            classes: spec.num_classes(),
            rank: self.rank,
            depth: self.depth,
            squash: self.squash,
            ..NetConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss_d,loss_g,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3}", self.epoch, self.loss_d, self.loss_g, self.seconds)
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Both networks with their optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    adam_g: AdamState,
    adam_d: AdamState,
    rng: Rng,
}

/// Per-step losses, both evaluated before the respective update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub loss_d: f64,
    pub loss_g: f64,
}

fn check_loss(g: &Graph, loss: Var, what: &str) -> Result<f64> {
    let v = g.scalar(loss);
    if !v.is_finite() {
        let at = g.first_non_finite().unwrap_or_else(|| "unknown node".into());
        return Err(Error::NonFinite(format!("{what} = {v}; first non-finite tensor: {at}")));
    }
    if v < 0.0 {
        return Err(Error::Contract(format!("{what} = {v} is negative")));
    }
    Ok(v)
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, net: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(cfg.seed);
        let gen = Generator::new(net, &mut root.fork(1))?;
        let disc = Discriminator::new(net, &mut root.fork(2))?;
        Ok(Self {
            cfg: cfg.clone(),
            adam_g: AdamState::new(&gen.store),
            adam_d: AdamState::new(&disc.store),
            gen,
            disc,
            rng: root.fork(3),
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let adam = self.cfg.adam();

        let mut g = Graph::new();
        let ld = discriminator_loss_graph(&mut g, &self.disc, &self.gen, batch, Trainable::Discriminator)?;
        let loss_d = check_loss(&g, ld, "discriminator loss")?;
        let grads = g.backward(ld)?;
        drop(g);
        adam_step(&mut self.disc.store, &grads, &mut self.adam_d, &adam)?;

        let mut g = Graph::new();
        let lg = generator_loss_graph(&mut g, &self.disc, &self.gen, batch, Trainable::Generator)?;
        let loss_g = check_loss(&g, lg, "generator loss")?;
        let grads = g.backward(lg)?;
        drop(g);
        adam_step(&mut self.gen.store, &grads, &mut self.adam_g, &adam)?;

        Ok(StepLosses { loss_d, loss_g })
    }

    /// One pass over `data` in shuffled batches. Editing and mismatching
    /// attributes are redrawn for every batch.
    pub fn epoch(&mut self, data: &Dataset) -> Result<StepLosses> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let classes = data.num_classes();
        let (mut sum_d, mut sum_g, mut steps) = (0.0, 0.0, 0);
        for chunk in order.chunks(self.cfg.batch) {
            let pairs: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    Ok(SamplePair {
                        image: s.image.clone(),
                        matching: s.matching,
                        editing: data.spec.edit_target(s.matching, &mut self.rng),
                        mismatching: sample_mismatch(classes, s.matching, &mut self.rng)?,
                    })
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SamplePair> = pairs.iter().collect();
            let losses = self.step(&Batch::from_pairs(&refs)?)?;
            sum_d += losses.loss_d;
            sum_g += losses.loss_g;
            steps += 1;
        }
        Ok(StepLosses {
            loss_d: sum_d / steps as f64,
            loss_g: sum_g / steps as f64,
        })
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
}

/// Alternating training. When `out` is given, writes `metrics.csv`, the
/// final checkpoint under `out/checkpoint`, and intermediate ones under
/// `out/checkpoint_epoch{N}` every `checkpoint_every` epochs.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let net = cfg.net_config(data);
    let mut trainer = Trainer::new(cfg, &net)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
    }
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let losses = trainer.epoch(data)?;
        metrics.push(EpochMetrics {
            epoch,
            loss_d: losses.loss_d,
            loss_g: losses.loss_g,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out {
            std::fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                crate::checkpoint::save(
                    dir.join(format!("checkpoint_epoch{epoch}")),
                    &trainer.gen,
                    &trainer.disc,
                    cfg,
                    &data.spec,
                )?;
            }
        }
    }
    if let Some(dir) = out {
        crate::checkpoint::save(dir.join("checkpoint"), &trainer.gen, &trainer.disc, cfg, &data.spec)?;
    }
    Ok(TrainOutcome { trainer, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, ShapeWorldSpec};

    fn tiny_net() -> NetConfig {
        NetConfig {
            image_size: 8,
            channels: [3, 4],
            feature_dim: 6,
            embed_dim: 4,
            rank: 2,
            depth: 2,
            classes: 4,
            squash: true,
        }
    }

    fn batch(n: usize, size: usize, rng: &mut Rng) -> Batch {
        let images = Tensor::uniform_init(rng, &[n, size, size, 3], -1.0, 1.0).unwrap();
        Batch {
            images,
            matching: (0..n).map(|i| i % 4).collect(),
            editing: (0..n).map(|i| (i + 1) % 4).collect(),
            mismatching: (0..n).map(|i| (i + 2) % 4).collect(),
        }
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut rng = Rng::new(0);
        let cfg = NetConfig::default();
        let gen = Generator::new(&cfg, &mut rng).unwrap();
        let x = Tensor::uniform_init(&mut rng, &[2, 16, 16, 3], -1.0, 1.0).unwrap();
        let y = gen.generate(&x, &[0, 5]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn unknown_attribute_is_a_vocabulary_error() {
        let mut rng = Rng::new(0);
        let gen = Generator::new(&tiny_net(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 8, 8, 3]);
        assert!(matches!(gen.generate(&x, &[4]), Err(Error::Vocabulary { id: 4, size: 4 })));
    }

    #[test]
    fn zero_fusion_makes_output_attribute_independent() {
        let mut rng = Rng::new(1);
        let mut gen = Generator::new(&tiny_net(), &mut rng).unwrap();
        gen.zero_fusion_factors();
        let x = Tensor::uniform_init(&mut rng, &[1, 8, 8, 3], -1.0, 1.0).unwrap();
        let base = gen.generate(&x, &[0]).unwrap();
        for id in 1..4 {
            assert_eq!(gen.generate(&x, &[id]).unwrap(), base);
        }
    }

    #[test]
    fn discriminator_output_in_unit_interval() {
        let mut rng = Rng::new(2);
        let d = Discriminator::new(&NetConfig::default(), &mut rng).unwrap();
        let x = Tensor::uniform_init(&mut rng, &[3, 16, 16, 3], -1.0, 1.0).unwrap();
        let s = d.score(&x, &[0, 1, 7]).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn objective_arithmetic() {
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(&[3]));
        let ones = g.constant(Tensor::ones(&[3]));
        let half = g.constant(Tensor::full(&[3], 0.5));
        let quarter = g.constant(Tensor::full(&[3], 0.25));
        let perfect = lsgan_discriminator_objective(&mut g, zeros, ones, zeros);
        assert_eq!(g.scalar(perfect), 0.0);
        let l = lsgan_discriminator_objective(&mut g, half, half, half);
        assert_eq!(g.scalar(l), 0.75);
        let fooled = lsgan_generator_objective(&mut g, ones);
        assert_eq!(g.scalar(fooled), 0.0);
        let l = lsgan_generator_objective(&mut g, zeros);
        assert_eq!(g.scalar(l), 1.0);
        let l = lsgan_generator_objective(&mut g, quarter);
        assert_eq!(g.scalar(l), 0.5625);
    }

    #[test]
    fn single_sample_batch_is_unaveraged_sum() {
        let mut g = Graph::new();
        let neg = g.constant(Tensor::scalar(0.3));
        let real = g.constant(Tensor::scalar(0.6));
        let fake = g.constant(Tensor::scalar(0.2));
        let l = lsgan_discriminator_objective(&mut g, neg, real, fake);
        let want = 0.3f64 * 0.3 + (0.6f64 - 1.0) * (0.6 - 1.0) + 0.2 * 0.2;
        assert!((g.scalar(l) - want).abs() < 1e-15);
    }

    #[test]
    fn constant_discriminator_losses() {
        let mut rng = Rng::new(3);
        let net = tiny_net();
        let gen = Generator::new(&net, &mut rng).unwrap();
        let mut disc = Discriminator::new(&net, &mut rng).unwrap();
        let b = batch(3, 8, &mut rng);
        disc.set_constant_output(0.0);
        assert_eq!(discriminator_loss(&disc, &gen, &b).unwrap(), 0.75);
        assert_eq!(generator_loss(&disc, &gen, &b).unwrap(), 0.25);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(Batch::from_pairs(&[]).is_err());
    }

    #[test]
    fn mismatch_sampling() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            assert_eq!(sample_mismatch(2, 0, &mut rng).unwrap(), 1);
            assert_eq!(sample_mismatch(2, 1, &mut rng).unwrap(), 0);
        }
        assert!(matches!(sample_mismatch(1, 0, &mut rng), Err(Error::Config(_))));
        let a: Vec<usize> = (0..20).map(|_| sample_mismatch(8, 3, &mut Rng::new(5)).unwrap()).collect();
        let mut r1 = Rng::new(6);
        let mut r2 = Rng::new(6);
        for _ in 0..50 {
            assert_eq!(sample_mismatch(8, 3, &mut r1).unwrap(), sample_mismatch(8, 3, &mut r2).unwrap());
        }
        assert!(a.iter().all(|&x| x != 3));
    }

    #[test]
    fn mismatch_frequencies_are_uniform() {
        // 1e4 draws over 7 outcomes: each count ~ Binomial(1e4, 1/7),
        // sd = sqrt(1e4 * 1/7 * 6/7) ~ 35.0; accept within 3 sd
        let mut rng = Rng::new(7);
        let mut counts = [0usize; 8];
        for _ in 0..10_000 {
            counts[sample_mismatch(8, 5, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[5], 0);
        let expect = 10_000.0 / 7.0;
        let sd = (10_000.0f64 * (1.0 / 7.0) * (6.0 / 7.0)).sqrt();
        for (c, &n) in counts.iter().enumerate().filter(|(c, _)| *c != 5) {
            assert!((n as f64 - expect).abs() <= 3.0 * sd, "class {c}: {n}");
        }
    }

    #[test]
    fn training_steps_are_deterministic() {
        let spec = ShapeWorldSpec {
            image_size: 8,
            samples_per_class: 2,
            ..ShapeWorldSpec::default()
        };
        let data = generate_dataset(&spec, &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 4,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.trainer.gen.store, b.trainer.gen.store);
        assert_eq!(a.trainer.disc.store, b.trainer.disc.store);
        let strip = |m: &[EpochMetrics]| m.iter().map(|r| (r.loss_d.to_bits(), r.loss_g.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert!(a.metrics.iter().all(|m| m.loss_d >= 0.0 && m.loss_g >= 0.0));
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let spec = ShapeWorldSpec {
            image_size: 8,
            samples_per_class: 1,
            ..ShapeWorldSpec::default()
        };
        let data = generate_dataset(&spec, &mut Rng::new(0)).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &data, None).unwrap();
        let fresh = Trainer::new(&cfg, &cfg.net_config(&data)).unwrap();
        assert_eq!(out.trainer.gen.store, fresh.gen.store);
        assert!(out.metrics.is_empty());
    }
}
