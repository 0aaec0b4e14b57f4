//! Match-m scoring and the POS, length and random-baseline analyses.
//!
//! For a cardinality `m`, the gold set of an instance is its `m` most
//! emphasized tokens by annotation count, expanded with every token tied
//! with the `m`-th count; the predicted set is exactly the `min(m, n)`
//! highest-scoring tokens, ties broken toward the lower index. The instance
//! score is `|pred ∩ gold| / min(m, n)`; corpus scores are plain means over
//! instances, and the reported average is the mean over `m = 1..=4`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::corpus::{length_bucket, AnnotatedInstance, Corpus, LengthBucket};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Cardinalities reported in every [`MatchReport`].
pub const M_VALUES: [usize; 4] = [1, 2, 3, 4];

/// Predicted `p(I)` for each token of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    scores: Vec<f64>,
}

impl Prediction {
    pub fn new(scores: Vec<f64>) -> Self {
        Self { scores }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl From<Vec<f64>> for Prediction {
    fn from(scores: Vec<f64>) -> Self {
        Self::new(scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchReport {
    /// Mean match score for `m = 1, 2, 3, 4`.
    pub m_scores: [f64; 4],
    pub average: f64,
}

impl MatchReport {
    pub fn from_scores(m_scores: [f64; 4]) -> Self {
        Self {
            m_scores,
            average: m_scores.iter().sum::<f64>() / 4.0,
        }
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[MatchReport]) -> Option<MatchReport> {
        if reports.is_empty() {
            return None;
        }
        let mut sums = [0.0; 4];
        for r in reports {
            for (s, v) in sums.iter_mut().zip(r.m_scores) {
                *s += v;
            }
        }
        Some(Self::from_scores(sums.map(|s| s / reports.len() as f64)))
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (m, v) in M_VALUES.iter().zip(self.m_scores) {
            out.push_str(&format!("m{m}={v}\n"));
        }
        out.push_str(&format!("average={}\n", self.average));
        out
    }

    /// The four scores and the average, 3 decimals, space-separated.
    pub fn row(&self) -> String {
        let cells: Vec<String> = self
            .m_scores
            .iter()
            .chain(std::iter::once(&self.average))
            .map(|v| format!("{v:>7.3}"))
            .collect();
        cells.join(" ")
    }

    pub const HEADER: &'static str = "     M1      M2      M3      M4 Average";
}

impl fmt::Display for MatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        writeln!(f, "{}", self.row())
    }
}

/// Indexes of the `m` most emphasized tokens plus every token tied with the
/// `m`-th ranked count. All tokens when `n <= m`.
pub fn gold_top_set(inst: &AnnotatedInstance, m: usize) -> BTreeSet<usize> {
    assert!(m >= 1, "m must be at least 1");
    let counts = inst.emph_counts();
    if counts.len() <= m {
        return (0..counts.len()).collect();
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let threshold = sorted[m - 1];
    (0..counts.len()).filter(|&i| counts[i] >= threshold).collect()
}

/// Indexes of the `min(m, n)` highest scores, ties toward the lower index.
pub fn pred_top_set(pred: &Prediction, m: usize) -> BTreeSet<usize> {
    assert!(m >= 1, "m must be at least 1");
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred.scores[b].total_cmp(&pred.scores[a]).then(a.cmp(&b)));
    order.into_iter().take(m).collect()
}

/// `|pred ∩ gold| / min(m, n)` for one instance.
pub fn instance_match(inst: &AnnotatedInstance, pred: &Prediction, m: usize) -> f64 {
    let gold = gold_top_set(inst, m);
    let hits = pred_top_set(pred, m).intersection(&gold).count();
    hits as f64 / m.min(inst.len()) as f64
}

/// Per-instance match average over `m = 1..=4`.
pub fn instance_match_average(inst: &AnnotatedInstance, pred: &Prediction) -> f64 {
    M_VALUES.iter().map(|&m| instance_match(inst, pred, m)).sum::<f64>() / 4.0
}

fn check_aligned(corpus: &Corpus, preds: &[Prediction]) -> Result<()> {
    if corpus.len() != preds.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} instances",
            preds.len(),
            corpus.len()
        )));
    }
    for (inst, pred) in corpus.iter().zip(preds) {
        if inst.len() != pred.len() {
            return Err(Error::Alignment(format!(
                "instance `{}`: {} scores for {} tokens",
                inst.id(),
                pred.len(),
                inst.len()
            )));
        }
    }
    Ok(())
}

pub fn match_report(corpus: &Corpus, preds: &[Prediction]) -> Result<MatchReport> {
    check_aligned(corpus, preds)?;
    if corpus.is_empty() {
        return Err(Error::invalid("cannot score an empty corpus"));
    }
    let mut sums = [0.0; 4];
    for (inst, pred) in corpus.iter().zip(preds) {
        for (s, &m) in sums.iter_mut().zip(&M_VALUES) {
            *s += instance_match(inst, pred, m);
        }
    }
    Ok(MatchReport::from_scores(sums.map(|s| s / corpus.len() as f64)))
}

/// Uniform random scores for every token, trial `t` drawn from
/// `derive_seed(seed, t)`; the result is the mean report over trials.
pub fn random_predictions(corpus: &Corpus, seed: u64, trial: u64) -> Vec<Prediction> {
    let mut rng = SplitMix64::new(derive_seed(seed, trial));
    corpus
        .iter()
        .map(|inst| Prediction::new((0..inst.len()).map(|_| rng.next_f64()).collect()))
        .collect()
}

pub fn random_baseline(corpus: &Corpus, seed: u64, trials: usize) -> Result<MatchReport> {
    if trials == 0 {
        return Err(Error::Config("random baseline needs at least one trial".into()));
    }
    let reports = (0..trials as u64)
        .map(|t| match_report(corpus, &random_predictions(corpus, seed, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchReport::mean(&reports).expect("at least one trial"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosRow {
    pub tag: String,
    pub count: usize,
    /// Mean annotator emphasis probability over tokens with this tag.
    pub human: f64,
    pub model: Option<f64>,
}

/// Rows ordered by descending token count, then tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PosReport {
    pub rows: Vec<PosRow>,
}

impl PosReport {
    pub fn tagged_tokens(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn get(&self, tag: &str) -> Option<&PosRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("{}.count={}\n{}.human={}\n", r.tag, r.count, r.tag, r.human));
            if let Some(m) = r.model {
                out.push_str(&format!("{}.model={m}\n", r.tag));
            }
        }
        out
    }
}

impl fmt::Display for PosReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let with_model = self.rows.iter().any(|r| r.model.is_some());
        write!(f, "{:<8} {:>6} {:>7}", "POS", "Count", "Humans")?;
        if with_model {
            write!(f, " {:>7}", "Model")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{:<8} {:>6} {:>7.3}", r.tag, r.count, r.human)?;
            if let Some(m) = r.model {
                write!(f, " {m:>7.3}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Mean human emphasis (and optionally mean model score) per POS tag.
/// Untagged tokens are skipped.
pub fn pos_report(corpus: &Corpus, preds: Option<&[Prediction]>) -> Result<PosReport> {
    if let Some(p) = preds {
        check_aligned(corpus, p)?;
    }
    // tag -> (count, human sum, model sum)
    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for (k, inst) in corpus.iter().enumerate() {
        for (i, tok) in inst.tokens().iter().enumerate() {
            let Some(tag) = tok.pos.as_deref() else { continue };
            let g = groups.entry(tag).or_default();
            g.0 += 1;
            g.1 += inst.emphasis_probability(i);
            if let Some(p) = preds {
                g.2 += p[k].scores[i];
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::invalid(format!(
            "corpus `{}` has no POS tags",
            corpus.split_name()
        )));
    }
    let mut rows: Vec<PosRow> = groups
        .into_iter()
        .map(|(tag, (count, human, model))| PosRow {
            tag: tag.to_string(),
            count,
            human: human / count as f64,
            model: preds.map(|_| model / count as f64),
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.tag.cmp(&b.tag)));
    Ok(PosReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthRow {
    pub bucket: LengthBucket,
    pub count: usize,
    /// Mean per-instance match average; `None` for an empty bucket.
    pub mean_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthReport {
    /// Short, Medium, Long in that order.
    pub rows: [LengthRow; 3],
}

impl LengthReport {
    pub fn row(&self, bucket: LengthBucket) -> &LengthRow {
        &self.rows[bucket as usize]
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let key = r.bucket.to_string().to_lowercase();
            out.push_str(&format!("{key}.count={}\n", r.count));
            if let Some(v) = r.mean_average {
                out.push_str(&format!("{key}.average={v}\n"));
            }
        }
        out
    }
}

impl fmt::Display for LengthReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>6} {:>7}", "Length", "Count", "Average")?;
        for r in &self.rows {
            match r.mean_average {
                Some(v) => writeln!(f, "{:<8} {:>6} {:>7.3}", r.bucket.to_string(), r.count, v)?,
                None => writeln!(f, "{:<8} {:>6} {:>7}", r.bucket.to_string(), r.count, "-")?,
            }
        }
        Ok(())
    }
}

/// Bucket sizes of a corpus without predictions.
pub fn length_counts(corpus: &Corpus) -> [usize; 3] {
    let mut counts = [0; 3];
    for inst in corpus {
        counts[length_bucket(inst) as usize] += 1;
    }
    counts
}

pub fn length_report(corpus: &Corpus, preds: &[Prediction]) -> Result<LengthReport> {
    check_aligned(corpus, preds)?;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (inst, pred) in corpus.iter().zip(preds) {
        let b = length_bucket(inst) as usize;
        sums[b] += instance_match_average(inst, pred);
        counts[b] += 1;
    }
    let rows = LengthBucket::ALL.map(|bucket| {
        let b = bucket as usize;
        LengthRow {
            bucket,
            count: counts[b],
            mean_average: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        }
    });
    Ok(LengthReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(counts: &[u32], total: u32) -> AnnotatedInstance {
        AnnotatedInstance::from_parts(
            "t",
            counts.iter().enumerate().map(|(i, &c)| (format!("w{i}"), None, c)),
            total,
        )
        .unwrap()
    }

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn gold_sets() {
        assert_eq!(gold_top_set(&inst(&[9, 0, 0], 9), 1), set(&[0]));
        assert_eq!(gold_top_set(&inst(&[5, 5, 1], 9), 1), set(&[0, 1]));
        assert_eq!(gold_top_set(&inst(&[3, 7, 7, 2], 9), 2), set(&[1, 2]));
        assert_eq!(gold_top_set(&inst(&[3, 7], 9), 4), set(&[0, 1]));
    }

    #[test]
    fn pred_sets() {
        assert_eq!(pred_top_set(&vec![0.9, 0.1].into(), 1), set(&[0]));
        assert_eq!(pred_top_set(&vec![0.5, 0.5, 0.2].into(), 1), set(&[0]));
        assert_eq!(pred_top_set(&vec![0.2, 0.8, 0.6, 0.1].into(), 2), set(&[1, 2]));
        assert_eq!(pred_top_set(&vec![0.2].into(), 3), set(&[0]));
    }

    #[test]
    fn half_match() {
        let i = inst(&[8, 1, 4, 2], 9);
        let p: Prediction = vec![0.2, 0.8, 0.6, 0.1].into();
        assert_eq!(instance_match(&i, &p, 2), 0.5);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let corpus = Corpus::new(vec![inst(&[1, 5, 3, 0, 2, 4], 9)], "x").unwrap();
        let preds = vec![Prediction::new(vec![0.1, 0.9, 0.5, 0.0, 0.3, 0.7])];
        let r = match_report(&corpus, &preds).unwrap();
        assert_eq!(r.m_scores, [1.0; 4]);
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn misaligned_predictions() {
        let corpus = Corpus::new(vec![inst(&[1, 2], 3)], "x").unwrap();
        assert!(match_report(&corpus, &[]).is_err());
        assert!(match_report(&corpus, &[vec![0.1].into()]).is_err());
    }

    #[test]
    fn baseline_on_single_tokens() {
        let instances = (0..5)
            .map(|k| {
                AnnotatedInstance::from_parts(k.to_string(), [("w", None, k as u32 % 3)], 3).unwrap()
            })
            .collect();
        let corpus = Corpus::new(instances, "x").unwrap();
        let r = random_baseline(&corpus, 1, 3).unwrap();
        assert_eq!(r.m_scores, [1.0; 4]);
        assert_eq!(random_baseline(&corpus, 1, 3).unwrap(), r);
        assert!(random_baseline(&corpus, 1, 0).is_err());
    }

    #[test]
    fn pos_means() {
        let i = AnnotatedInstance::from_parts("p", [("cat", Some("NOUN"), 9), ("ran", Some("VERB"), 1)], 10)
            .unwrap();
        let corpus = Corpus::new(vec![i], "x").unwrap();
        let preds = [Prediction::new(vec![0.9, 0.1])];
        let r = pos_report(&corpus, Some(&preds)).unwrap();
        assert_eq!(r.get("NOUN").unwrap().model, Some(0.9));
        assert_eq!(r.get("VERB").unwrap().model, Some(0.1));
        assert_eq!(r.get("NOUN").unwrap().human, 0.9);
        assert_eq!(r.tagged_tokens(), 2);

        let untagged = Corpus::new(vec![inst(&[1], 2)], "x").unwrap();
        assert!(pos_report(&untagged, None).is_err());
    }

    #[test]
    fn length_buckets_with_empty_groups() {
        let corpus = Corpus::new(
            (0..4)
                .map(|k| {
                    AnnotatedInstance::from_parts(k.to_string(), [("a", None, 2), ("b", None, 1), ("c", None, 0)], 2)
                        .unwrap()
                })
                .collect(),
            "x",
        )
        .unwrap();
        let preds: Vec<Prediction> = (0..4).map(|_| vec![0.9, 0.5, 0.1].into()).collect();
        let r = length_report(&corpus, &preds).unwrap();
        assert_eq!(r.row(LengthBucket::Short).count, 4);
        assert_eq!(r.row(LengthBucket::Short).mean_average, Some(1.0));
        assert_eq!(r.row(LengthBucket::Medium).count, 0);
        assert_eq!(r.row(LengthBucket::Long).mean_average, None);
    }
}
