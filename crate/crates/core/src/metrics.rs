//! Inception score, `IS = exp(E_x KL(p(y|x) ‖ p(y)))` with `p(y)` the
//! mean posterior over the split, and classifier-measured edit accuracy.

use crate::classifier::Classifier;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IS_SPLITS: usize = 10;
/// Probability floor applied before taking logs.
pub const IS_EPS: f64 = 1e-12;
const BOUND_SLACK: f64 = 1e-9;

/// Score of one split. Checks `1 ≤ IS ≤ C`.
pub fn split_score(posteriors: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = posteriors.first() else {
        return Err(Error::Parameter("inception score of an empty split".into()));
    };
    let c = first.len();
    if c == 0 || posteriors.iter().any(|p| p.len() != c) {
        return Err(Error::Parameter("posteriors must share one non-zero width".into()));
    }
    let n = posteriors.len() as f64;
    let mut marginal = vec![0.0; c];
    for p in posteriors {
        for (m, &v) in marginal.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut marginal {
        *m /= n;
    }
    let total: f64 = marginal.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("marginal sums to {total}")));
    }
    let mut kl_sum = 0.0;
    for p in posteriors {
        kl_sum += p
            .iter()
            .zip(&marginal)
            .map(|(&pi, &mi)| {
                let pi = pi.max(IS_EPS);
                pi * (pi.ln() - mi.max(IS_EPS).ln())
            })
            .sum::<f64>();
    }
    let is = (kl_sum / n).exp();
    if !(is >= 1.0 - BOUND_SLACK && is <= c as f64 + BOUND_SLACK) {
        return Err(Error::Contract(format!("inception score {is} outside [1, {c}]")));
    }
    Ok(is)
}

/// Mean and population standard deviation of the score over `splits`
/// contiguous, near-equal chunks.
pub fn inception_score_from_posteriors(posteriors: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || splits > posteriors.len() {
        return Err(Error::Parameter(format!(
            "{splits} splits over {} posteriors",
            posteriors.len()
        )));
    }
    let n = posteriors.len();
    let mut scores = Vec::with_capacity(splits);
    let mut start = 0;
    for k in 0..splits {
        let end = start + n / splits + usize::from(k < n % splits);
        scores.push(split_score(&posteriors[start..end])?);
        start = end;
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Split count used for `n` images: [`IS_SPLITS`], reduced so every split
/// holds at least two images.
pub fn split_count(n: usize) -> usize {
    IS_SPLITS.min(n / 2).max(1)
}

/// Classifier-based inception score over randomly permuted splits.
pub fn inception_score(classifier: &Classifier, images: &Tensor, rng: &mut Rng) -> Result<(f64, f64)> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Parameter(format!("inception score needs at least 2 images, got {n}")));
    }
    let mut post = classifier.posteriors(images)?;
    rng.shuffle(&mut post);
    inception_score_from_posteriors(&post, split_count(n))
}

/// One source image per class edited to every class, row-major by source.
pub fn all_pairs(gen: &Generator, data: &Dataset) -> Result<(Tensor, Vec<usize>)> {
    let sources = data.one_per_class();
    let c = data.num_classes();
    let mut src = Vec::with_capacity(sources.len() * c);
    let mut targets = Vec::with_capacity(sources.len() * c);
    for &s in &sources {
        for t in 0..c {
            src.push(s);
            targets.push(t);
        }
    }
    Ok((gen.generate(&data.images(&src), &targets)?, targets))
}

/// Fraction of edits whose predicted colour matches the target colour,
/// over every sample edited to every other colour of its shape.
pub fn edit_color_accuracy(gen: &Generator, clf: &Classifier, data: &Dataset) -> Result<f64> {
    let spec = &data.spec;
    let (mut hits, mut total) = (0usize, 0usize);
    for color in 0..spec.palette.len() {
        let targets: Vec<usize> = data
            .samples
            .iter()
            .map(|s| spec.class_of(color, spec.shape_of(s.matching)))
            .collect();
        let keep: Vec<usize> = (0..data.len()).filter(|&i| targets[i] != data.samples[i].matching).collect();
        if keep.is_empty() {
            continue;
        }
        let edited = gen.generate(&data.images(&keep), &keep.iter().map(|&i| targets[i]).collect::<Vec<_>>())?;
        let pred = clf.predict(&edited)?;
        for p in &pred {
            hits += usize::from(spec.color_of(*p) == color);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_posteriors_score_one() {
        let p = vec![vec![0.2, 0.3, 0.5]; 20];
        let (m, s) = inception_score_from_posteriors(&p, 10).unwrap();
        assert!((m - 1.0).abs() <= 1e-9);
        assert!(s <= 1e-9);
    }

    #[test]
    fn uniform_one_hot_scores_class_count() {
        let c = 8;
        let p: Vec<Vec<f64>> = (0..c)
            .map(|i| (0..c).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let (m, _) = inception_score_from_posteriors(&p, 1).unwrap();
        assert!((m - c as f64).abs() <= 1e-6);
    }

    #[test]
    fn two_point_hand_value() {
        // KL([0.9, 0.1] ‖ [0.5, 0.5]) = 0.9 ln 1.8 + 0.1 ln 0.2, same for the mirror
        let kl = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let p = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let is = split_score(&p).unwrap();
        assert!((is - kl.exp()).abs() < 1e-12);
        assert!((is - 1.445).abs() < 1e-3);
    }

    #[test]
    fn splits_cover_every_posterior() {
        let p: Vec<Vec<f64>> = (0..7).map(|i| vec![(i % 2) as f64, ((i + 1) % 2) as f64]).collect();
        assert!(inception_score_from_posteriors(&p, 3).is_ok());
        assert!(inception_score_from_posteriors(&p, 8).is_err());
        assert!(inception_score_from_posteriors(&p, 0).is_err());
    }

    #[test]
    fn split_count_keeps_pairs() {
        assert_eq!(split_count(2), 1);
        assert_eq!(split_count(7), 3);
        assert_eq!(split_count(64), 10);
    }
}
