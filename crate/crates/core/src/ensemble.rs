//! Plain and dev-weighted averaging of per-token emphasis scores.
//!
//! Spec files are `key=value` text:
//!
//! ```text
//! mode=weighted
//! member=bilstm_bert.ckp1,dev_bert.emb
//! member=dense_xlnet.ckp1,dev_xlnet.emb,0.731
//! ```
//!
//! Relative paths resolve against the spec file's directory. A member's dev
//! score defaults to the one stored in its checkpoint.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::Corpus;
use crate::embedding_io::{read_emb, validate_alignment, EmbeddingFile};
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::kv;
use crate::model::{load_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum EnsembleMode {
    #[default]
    Average,
    Weighted,
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Weighted => "weighted",
        })
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Config(format!("unknown ensemble mode `{other}` (expected average|weighted)"))),
        }
    }
}

/// Member weights; `dev_scores` is only read in weighted mode.
pub fn ensemble_weights(mode: EnsembleMode, dev_scores: &[f64]) -> Result<Vec<f64>> {
    if dev_scores.is_empty() {
        return Err(Error::invalid("ensemble has no members"));
    }
    let k = dev_scores.len();
    match mode {
        EnsembleMode::Average => Ok(vec![1.0 / k as f64; k]),
        EnsembleMode::Weighted => {
            if let Some(bad) = dev_scores.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
                return Err(Error::invalid(format!("weighted ensemble needs positive dev scores, got {bad}")));
            }
            let total: f64 = dev_scores.iter().sum();
            Ok(dev_scores.iter().map(|d| d / total).collect())
        }
    }
}

/// Per-token weighted sum of member predictions.
///
/// Each result is clamped into the members' `[min, max]` for that token so
/// that identical members reproduce their input bit for bit.
pub fn combine_predictions(members: &[Vec<Prediction>], weights: &[f64]) -> Result<Vec<Prediction>> {
    let Some(first) = members.first() else {
        return Err(Error::invalid("ensemble has no members"));
    };
    if weights.len() != members.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} members",
            weights.len(),
            members.len()
        )));
    }
    for (k, m) in members.iter().enumerate() {
        if m.len() != first.len() {
            return Err(Error::Alignment(format!(
                "member {k} predicts {} instances, member 0 predicts {}",
                m.len(),
                first.len()
            )));
        }
        for (j, (p, q)) in m.iter().zip(first).enumerate() {
            if p.len() != q.len() {
                return Err(Error::Alignment(format!(
                    "member {k}, instance {j}: {} scores, member 0 has {}",
                    p.len(),
                    q.len()
                )));
            }
        }
    }
    let combined = (0..first.len())
        .map(|j| {
            let scores = (0..first[j].len())
                .map(|i| {
                    let (mut s, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                    for (m, w) in members.iter().zip(weights) {
                        let v = m[j].scores()[i];
                        s += w * v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    s.clamp(lo, hi)
                })
                .collect();
            Prediction::new(scores)
        })
        .collect();
    Ok(combined)
}

#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub checkpoint: Checkpoint,
    pub embeddings: EmbeddingFile,
    pub dev_match_average: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub mode: EnsembleMode,
    pub members: Vec<EnsembleMember>,
}

/// Parsed but not yet loaded spec file.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpecFile {
    pub mode: EnsembleMode,
    /// (checkpoint, embeddings, dev score override)
    pub members: Vec<(PathBuf, PathBuf, Option<f64>)>,
}

impl EnsembleSpecFile {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut mode = EnsembleMode::default();
        let mut members = Vec::new();
        for entry in kv::parse(text)? {
            match entry.key.as_str() {
                "mode" => mode = entry.parse_value()?,
                "member" => {
                    let parts: Vec<&str> = entry.value.split(',').map(str::trim).collect();
                    let dev = match parts.as_slice() {
                        [_, _] => None,
                        [_, _, d] => Some(d.parse::<f64>().map_err(|e| {
                            Error::parse(entry.line, format!("bad dev score `{d}`: {e}"))
                        })?),
                        _ => {
                            return Err(Error::parse(
                                entry.line,
                                "member needs `checkpoint,embeddings[,dev_score]`",
                            ))
                        }
                    };
                    members.push((base_dir.join(parts[0]), base_dir.join(parts[1]), dev));
                }
                other => return Err(Error::parse(entry.line, format!("unknown key `{other}`"))),
            }
        }
        if members.is_empty() {
            return Err(Error::invalid("ensemble spec lists no members"));
        }
        Ok(Self { mode, members })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn load(&self) -> Result<EnsembleSpec> {
        let members = self
            .members
            .iter()
            .map(|(ckpt, emb, dev)| {
                let checkpoint = load_checkpoint(BufReader::new(open(ckpt)?))?;
                let embeddings = read_emb(BufReader::new(open(emb)?))?;
                let dev_match_average = dev.unwrap_or(checkpoint.dev_match_average);
                Ok(EnsembleMember {
                    checkpoint,
                    embeddings,
                    dev_match_average,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EnsembleSpec {
            mode: self.mode,
            members,
        })
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

impl EnsembleSpec {
    pub fn weights(&self) -> Result<Vec<f64>> {
        let dev: Vec<f64> = self.members.iter().map(|m| m.dev_match_average).collect();
        ensemble_weights(self.mode, &dev)
    }
}

pub fn ensemble_predict(spec: &EnsembleSpec, corpus: &Corpus) -> Result<Vec<Prediction>> {
    let weights = spec.weights()?;
    let member_preds = spec
        .members
        .iter()
        .map(|m| {
            validate_alignment(corpus, &m.embeddings)?;
            m.checkpoint.model.predict_file(&m.embeddings)
        })
        .collect::<Result<Vec<_>>>()?;
    combine_predictions(&member_preds, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(scores: &[f64]) -> Vec<Prediction> {
        vec![Prediction::new(scores.to_vec())]
    }

    #[test]
    fn average_of_two() {
        let w = ensemble_weights(EnsembleMode::Average, &[0.1, 0.9]).unwrap();
        let out = combine_predictions(&[one(&[0.2]), one(&[0.8])], &w).unwrap();
        assert_eq!(out[0].scores(), [0.5]);
    }

    #[test]
    fn weighted_by_dev_score() {
        let w = ensemble_weights(EnsembleMode::Weighted, &[0.6, 0.2]).unwrap();
        let out = combine_predictions(&[one(&[1.0]), one(&[0.0])], &w).unwrap();
        assert!((out[0].scores()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identical_members_are_exact() {
        let p = one(&[0.1, 0.3, 0.7]);
        let w = ensemble_weights(EnsembleMode::Average, &[1.0; 3]).unwrap();
        assert_eq!(combine_predictions(&[p.clone(), p.clone(), p.clone()], &w).unwrap(), p);
    }

    #[test]
    fn errors() {
        assert!(ensemble_weights(EnsembleMode::Average, &[]).is_err());
        assert!(ensemble_weights(EnsembleMode::Weighted, &[0.5, 0.0]).is_err());
        assert!(combine_predictions(&[one(&[0.1]), one(&[0.1, 0.2])], &[0.5, 0.5]).is_err());
        assert!(combine_predictions(&[], &[]).is_err());
    }

    #[test]
    fn spec_file() {
        let text = "mode=weighted\nmember=a.ckp1,a.emb\nmember = b.ckp1, b.emb, 0.7\n";
        let spec = EnsembleSpecFile::parse(text, Path::new("/runs")).unwrap();
        assert_eq!(spec.mode, EnsembleMode::Weighted);
        assert_eq!(spec.members[0], (PathBuf::from("/runs/a.ckp1"), PathBuf::from("/runs/a.emb"), None));
        assert_eq!(spec.members[1].2, Some(0.7));
        assert!(EnsembleSpecFile::parse("mode=average\n", Path::new(".")).is_err());
        assert!(EnsembleSpecFile::parse("member=a\n", Path::new(".")).is_err());
    }
}
