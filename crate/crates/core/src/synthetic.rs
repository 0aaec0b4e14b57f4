//! Seeded synthetic corpora with matching embeddings, for tests, smoke
//! runs and sanity checks without the official data.

use ndarray::Array2;

use crate::corpus::{AnnotatedInstance, Corpus, LabelDistribution};
use crate::embedding_io::{EmbeddingFile, InstanceEmbeddings};
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};
use crate::nn::{grad_check, GradCheckReport};
use crate::rng::{derive_seed, SplitMix64};

const POS_TAGS: [&str; 6] = ["NOUN", "VERB", "ADJ", "DET", "ADP", "PUNCT"];

/// Random counts, POS tags and embeddings; lengths uniform in
/// `1..=max_len`.
pub fn random_corpus(
    seed: u64,
    instances: usize,
    max_len: usize,
    ann_total: u32,
    dim: usize,
) -> Result<(Corpus, EmbeddingFile)> {
    let mut rng = SplitMix64::new(seed);
    let mut insts = Vec::with_capacity(instances);
    let mut embs = Vec::with_capacity(instances);
    for k in 0..instances {
        let n = 1 + rng.below(max_len.max(1) as u64) as usize;
        let parts: Vec<(String, Option<String>, u32)> = (0..n)
            .map(|i| {
                let pos = POS_TAGS[rng.below(POS_TAGS.len() as u64) as usize];
                let count = rng.below(ann_total as u64 + 1) as u32;
                (format!("w{k}_{i}"), Some(pos.to_string()), count)
            })
            .collect();
        insts.push(AnnotatedInstance::from_parts(format!("r{k}"), parts, ann_total)?);
        let vectors = Array2::from_shape_fn((n, dim), |_| (rng.next_f64() * 2.0 - 1.0) as f32);
        embs.push(InstanceEmbeddings::new(vectors)?);
    }
    Ok((
        Corpus::new(insts, "synthetic")?,
        EmbeddingFile::new(dim, "synthetic-random", embs)?,
    ))
}

/// A linearly separable task: a token is fully emphasized exactly when its
/// first embedding coordinate is positive. That coordinate is kept at
/// least 0.1 away from zero.
pub fn separable_corpus(seed: u64, instances: usize, dim: usize) -> Result<(Corpus, EmbeddingFile)> {
    const ANN_TOTAL: u32 = 9;
    let mut rng = SplitMix64::new(seed);
    let mut insts = Vec::with_capacity(instances);
    let mut embs = Vec::with_capacity(instances);
    for k in 0..instances {
        let n = 2 + rng.below(7) as usize;
        let mut vectors = Array2::from_shape_fn((n, dim), |_| (rng.next_f64() * 2.0 - 1.0) as f32);
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let magnitude = 0.1 + 0.9 * rng.next_f64() as f32;
            let positive = rng.below(3) == 0;
            vectors[[i, 0]] = if positive { magnitude } else { -magnitude };
            parts.push((format!("t{k}_{i}"), None, if positive { ANN_TOTAL } else { 0 }));
        }
        insts.push(AnnotatedInstance::from_parts(format!("s{k}"), parts, ANN_TOTAL)?);
        embs.push(InstanceEmbeddings::new(vectors)?);
    }
    Ok((
        Corpus::new(insts, "separable")?,
        EmbeddingFile::new(dim, "synthetic-separable", embs)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::validate_alignment;

    #[test]
    fn aligned_and_deterministic() {
        let (c, ef) = random_corpus(3, 20, 6, 9, 4).unwrap();
        validate_alignment(&c, &ef).unwrap();
        assert_eq!(random_corpus(3, 20, 6, 9, 4).unwrap().1, ef);

        let (c, ef) = separable_corpus(1, 10, 8).unwrap();
        validate_alignment(&c, &ef).unwrap();
        for (inst, emb) in c.iter().zip(ef.instances()) {
            for i in 0..inst.len() {
                let x0 = emb.vectors()[[i, 0]];
                assert!(x0.abs() >= 0.1);
                assert_eq!(inst.emphasis_probability(i), if x0 > 0.0 { 1.0 } else { 0.0 });
            }
        }
    }
}

/// Gradient check of a freshly initialized model (hidden and dense width
/// both `cfg.hidden_units`) on a random `tokens x input_dim` sequence with
/// random soft targets.
pub fn random_model_grad_check(cfg: &ModelConfig, tokens: usize, eps: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    if tokens == 0 {
        return Err(Error::Config("tokens must be positive".into()));
    }
    let mut model = build_model(cfg)?;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, u64::MAX));
    let xs = Array2::from_shape_fn((tokens, cfg.input_dim), |_| rng.next_f64() * 2.0 - 1.0);
    let targets: Vec<LabelDistribution> =
        (0..tokens).map(|_| LabelDistribution::from_emphasis(rng.next_f64())).collect();
    grad_check(&mut model, |m| m.loss(xs.view(), &targets, Some(1.0)), eps)
}
