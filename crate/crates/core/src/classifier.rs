//! Small convolutional attribute classifier used as the evaluation oracle
//! for edited images.

use crate::autodiff::{softmax, Graph, ParamStore, Var};
use crate::conditioning::LEAKY_SLOPE;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Bind, Conv, Dense};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Required training accuracy for [`train_classifier`].
pub const MIN_TRAIN_ACCURACY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop as soon as training accuracy reaches this value.
    pub stop_accuracy: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch: 32,
            max_epochs: 100,
            stop_accuracy: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub store: ParamStore,
    classes: usize,
    image_size: usize,
    convs: Vec<Conv>,
    head: Dense,
}

const INFER_CHUNK: usize = 256;

impl Classifier {
    pub fn new(classes: usize, image_size: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        if image_size < 4 || !image_size.is_multiple_of(4) {
            return Err(Error::Config(format!("image size {image_size} must be a positive multiple of 4")));
        }
        let mut s = ParamStore::new();
        let convs = vec![
            Conv::new(&mut s, rng, "c.conv0", 3, 3, 8, 2, 1)?,
            Conv::new(&mut s, rng, "c.conv1", 3, 8, 16, 2, 1)?,
        ];
        let fs = image_size / 4;
        let head = Dense::new(&mut s, rng, "c.head", fs * fs * 16, classes)?;
        Ok(Self {
            store: s,
            classes,
            image_size,
            convs,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Logits `[N, C]` for `x[N, S, S, 3]`.
    pub fn logits(&self, g: &mut Graph, trainable: bool, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.image_size || shape[2] != self.image_size || shape[3] != 3 {
            return Err(crate::error::dim_err(
                "classifier",
                &shape,
                &[0, self.image_size, self.image_size, 3],
            ));
        }
        let p = Bind {
            store: &self.store,
            trainable,
        };
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let n = shape[0];
        let flat = g.value(h).len() / n;
        let h = g.reshape(h, &[n, flat])?;
        self.head.forward(g, p, h)
    }

    /// Class posteriors `p(y|x)`, one row per image.
    pub fn posteriors(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let per = images.len() / n;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let l = self.logits(&mut g, false, x)?;
            let logits = g.value(l);
            for i in 0..end - start {
                out.push(softmax(logits.row(i)));
            }
        }
        Ok(out)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self.posteriors(images)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        if pred.len() != labels.len() {
            return Err(crate::error::dim_err("accuracy", &[pred.len()], &[labels.len()]));
        }
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Trains a classifier with softmax cross-entropy and returns it with its
/// final training accuracy. Applies no accuracy threshold.
pub fn fit(
    images: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<(Classifier, f64)> {
    let n = labels.len();
    if n == 0 || images.shape().first() != Some(&n) {
        return Err(crate::error::dim_err("fit", images.shape(), &[n]));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("classifier training needs at least 2 distinct labels".into()));
    }
    let mut clf = Classifier::new(classes, images.shape()[1], &mut rng.fork(0))?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&clf.store);
    let per = images.len() / n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut acc = clf.accuracy(images, labels)?;
    for _ in 0..cfg.max_epochs {
        if acc >= cfg.stop_accuracy {
            break;
        }
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = chunk.len();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&shape, data)?);
            let logits = clf.logits(&mut g, true, x)?;
            let loss = g.softmax_cross_entropy(logits, &batch_labels)?;
            if !g.scalar(loss).is_finite() {
                return Err(Error::NonFinite("classifier loss".into()));
            }
            let grads = g.backward(loss)?;
            drop(g);
            adam_step(&mut clf.store, &grads, &mut state, &adam)?;
        }
        acc = clf.accuracy(images, labels)?;
    }
    Ok((clf, acc))
}

/// Trains the evaluation classifier on every sample of `data`. Fails with
/// a training error unless training accuracy reaches
/// [`MIN_TRAIN_ACCURACY`].
pub fn train_classifier(data: &Dataset, rng: &mut Rng) -> Result<Classifier> {
    data.spec.validate()?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (clf, acc) = fit(
        &data.images(&idx),
        &data.labels(),
        data.num_classes(),
        &ClassifierConfig::default(),
        rng,
    )?;
    if acc < MIN_TRAIN_ACCURACY {
        return Err(Error::Training {
            msg: "classifier did not converge".into(),
            accuracy: acc,
        });
    }
    Ok(clf)
}
