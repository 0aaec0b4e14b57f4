//! Annotated emphasis corpora in the normalized TSV format.
//!
//! One token per line with exactly five tab-separated columns:
//!
//! ```text
//! index  token  pos  emph_count  ann_total
//! ```
//!
//! `pos` is `_` when absent. Instances are separated by one blank line.
//! Comment lines start with `#`; a `# id: <id>` comment names the instance
//! that follows it, otherwise instances are numbered `0, 1, 2, ...` in file
//! order.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub index: usize,
    pub text: String,
    pub pos: Option<String>,
}

/// One short text with per-token emphasis annotation counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnnotatedInstance {
    id: String,
    tokens: Vec<Token>,
    emph_counts: Vec<u32>,
    ann_total: u32,
}

impl AnnotatedInstance {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<Token>,
        emph_counts: Vec<u32>,
        ann_total: u32,
    ) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("instance `{id}` has no tokens")));
        }
        if tokens.len() != emph_counts.len() {
            return Err(Error::invalid(format!(
                "instance `{id}`: {} tokens but {} emphasis counts",
                tokens.len(),
                emph_counts.len()
            )));
        }
        if ann_total == 0 {
            return Err(Error::invalid(format!("instance `{id}`: annotator total is 0")));
        }
        for (i, (tok, &count)) in tokens.iter().zip(&emph_counts).enumerate() {
            if tok.index != i {
                return Err(Error::invalid(format!(
                    "instance `{id}`: token at position {i} has index {}",
                    tok.index
                )));
            }
            if tok.text.is_empty() {
                return Err(Error::invalid(format!("instance `{id}`: empty token at {i}")));
            }
            if count > ann_total {
                return Err(Error::invalid(format!(
                    "instance `{id}`: emphasis count {count} exceeds annotator total {ann_total} at token {i}"
                )));
            }
        }
        Ok(Self {
            id,
            tokens,
            emph_counts,
            ann_total,
        })
    }

    /// Builds an instance from `(text, pos, count)` triples, numbering tokens.
    pub fn from_parts<S: Into<String>>(
        id: impl Into<String>,
        parts: impl IntoIterator<Item = (S, Option<S>, u32)>,
        ann_total: u32,
    ) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (index, (text, pos, count)) in parts.into_iter().enumerate() {
            tokens.push(Token {
                index,
                text: text.into(),
                pos: pos.map(Into::into),
            });
            counts.push(count);
        }
        Self::new(id, tokens, counts, ann_total)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn emph_counts(&self) -> &[u32] {
        &self.emph_counts
    }

    pub fn ann_total(&self) -> u32 {
        self.ann_total
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Fraction of annotators that emphasized token `i`.
    pub fn emphasis_probability(&self, i: usize) -> f64 {
        f64::from(self.emph_counts[i]) / f64::from(self.ann_total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Corpus {
    instances: Vec<AnnotatedInstance>,
    split_name: String,
}

impl Corpus {
    pub fn new(instances: Vec<AnnotatedInstance>, split_name: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for inst in &instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::invalid(format!("duplicate instance id `{}`", inst.id)));
            }
        }
        Ok(Self {
            instances,
            split_name: split_name.into(),
        })
    }

    pub fn instances(&self) -> &[AnnotatedInstance] {
        &self.instances
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, AnnotatedInstance> {
        self.instances.iter()
    }

    pub fn token_count(&self) -> usize {
        self.instances.iter().map(AnnotatedInstance::len).sum()
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a AnnotatedInstance;
    type IntoIter = std::slice::Iter<'a, AnnotatedInstance>;

    fn into_iter(self) -> Self::IntoIter {
        self.instances.iter()
    }
}

/// Per-token probability pair over the labels `{I, O}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelDistribution {
    pub p_i: f64,
    pub p_o: f64,
}

impl LabelDistribution {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(p_i: f64, p_o: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&p_i)
            && (0.0..=1.0).contains(&p_o)
            && ((p_i + p_o) - 1.0).abs() <= Self::TOLERANCE;
        if !ok {
            return Err(Error::invalid(format!(
                "({p_i}, {p_o}) is not a distribution over two labels"
            )));
        }
        Ok(Self { p_i, p_o })
    }

    /// `(p, 1 - p)`.
    pub fn from_emphasis(p_i: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&p_i));
        Self {
            p_i,
            p_o: 1.0 - p_i,
        }
    }
}

/// LDL targets: for each token, the share of annotators choosing `I` and `O`.
pub fn target_distribution(inst: &AnnotatedInstance) -> Vec<LabelDistribution> {
    (0..inst.len())
        .map(|i| LabelDistribution::from_emphasis(inst.emphasis_probability(i)))
        .collect()
}

/// Permutes tokens, counts and POS tags of `inst` by one uniformly drawn
/// permutation and renumbers the tokens.
///
/// The returned permutation maps new positions to old ones: token `k` of the
/// result is token `perm[k]` of the input, so embedding rows can follow.
pub fn shuffle_instance(inst: &AnnotatedInstance, seed: u64) -> (AnnotatedInstance, Vec<usize>) {
    let perm = SplitMix64::new(seed).permutation(inst.len());
    let tokens = perm
        .iter()
        .enumerate()
        .map(|(k, &old)| Token {
            index: k,
            text: inst.tokens[old].text.clone(),
            pos: inst.tokens[old].pos.clone(),
        })
        .collect();
    let emph_counts = perm.iter().map(|&old| inst.emph_counts[old]).collect();
    let shuffled = AnnotatedInstance {
        id: inst.id.clone(),
        tokens,
        emph_counts,
        ann_total: inst.ann_total,
    };
    (shuffled, perm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long];

    pub fn of_len(n: usize) -> Self {
        match n {
            0..=5 => LengthBucket::Short,
            6..=18 => LengthBucket::Medium,
            _ => LengthBucket::Long,
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthBucket::Short => "Short",
            LengthBucket::Medium => "Medium",
            LengthBucket::Long => "Long",
        })
    }
}

/// Short: fewer than 6 tokens. Medium: 6 to 18. Long: more than 18.
pub fn length_bucket(inst: &AnnotatedInstance) -> LengthBucket {
    LengthBucket::of_len(inst.len())
}

struct PendingInstance {
    id: Option<String>,
    tokens: Vec<Token>,
    counts: Vec<u32>,
    total: Option<u32>,
    first_line: usize,
}

impl PendingInstance {
    fn new(id: Option<String>, first_line: usize) -> Self {
        Self {
            id,
            tokens: Vec::new(),
            counts: Vec::new(),
            total: None,
            first_line,
        }
    }
}

/// Parses the normalized TSV format. Errors carry 1-based line numbers.
pub fn parse_corpus<R: BufRead>(source: R, split_name: &str) -> Result<Corpus> {
    let mut instances: Vec<AnnotatedInstance> = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut pending_id: Option<String> = None;
    let mut current: Option<PendingInstance> = None;
    let mut last_line = 0;

    let mut finish = |block: PendingInstance, instances: &mut Vec<AnnotatedInstance>| -> Result<()> {
        let id = block.id.unwrap_or_else(|| instances.len().to_string());
        if !seen_ids.insert(id.clone()) {
            return Err(Error::parse(block.first_line, format!("duplicate instance id `{id}`")));
        }
        let total = block.total.expect("block has at least one token line");
        let inst = AnnotatedInstance::new(id, block.tokens, block.counts, total)
            .map_err(|e| Error::parse(block.first_line, e.to_string()))?;
        instances.push(inst);
        Ok(())
    };

    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        last_line = lineno;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);

        if line.trim().is_empty() {
            if let Some(block) = current.take() {
                finish(block, &mut instances)?;
            }
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(id) = comment.strip_prefix("id:") {
                if current.is_some() {
                    return Err(Error::parse(lineno, "`# id:` line inside an instance"));
                }
                let id = id.trim();
                if id.is_empty() {
                    return Err(Error::parse(lineno, "empty instance id"));
                }
                pending_id = Some(id.to_string());
            }
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::parse(
                lineno,
                format!("expected 5 tab-separated columns, found {}", cols.len()),
            ));
        }
        let block = current.get_or_insert_with(|| PendingInstance::new(pending_id.take(), lineno));

        let index: usize = cols[0]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad token index `{}`", cols[0])))?;
        if index != block.tokens.len() {
            return Err(Error::parse(
                lineno,
                format!("token index {index}, expected {}", block.tokens.len()),
            ));
        }
        if cols[1].is_empty() {
            return Err(Error::parse(lineno, "empty token"));
        }
        let count: u32 = cols[3]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad emphasis count `{}`", cols[3])))?;
        let total: u32 = cols[4]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad annotator total `{}`", cols[4])))?;
        if total == 0 {
            return Err(Error::parse(lineno, "annotator total must be positive"));
        }
        if count > total {
            return Err(Error::parse(
                lineno,
                format!("emphasis count {count} exceeds annotator total {total}"),
            ));
        }
        match block.total {
            Some(t) if t != total => {
                return Err(Error::parse(
                    lineno,
                    format!("annotator total {total} differs from {t} earlier in the instance"),
                ))
            }
            _ => block.total = Some(total),
        }
        let pos = match cols[2] {
            "_" | "" => None,
            tag => Some(tag.to_string()),
        };
        block.tokens.push(Token {
            index,
            text: cols[1].to_string(),
            pos,
        });
        block.counts.push(count);
    }
    if let Some(block) = current.take() {
        finish(block, &mut instances)?;
    }
    if instances.is_empty() {
        return Err(Error::parse(last_line.max(1), "no instances in corpus"));
    }
    Corpus::new(instances, split_name)
}

/// Writes `corpus` in the normalized TSV format, with an `# id:` line per
/// instance so that parsing the output reproduces the ids.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut sink: W) -> Result<()> {
    let bad = |s: &str| s.contains(['\t', '\n', '\r']);
    for (k, inst) in corpus.iter().enumerate() {
        if bad(&inst.id) {
            return Err(Error::invalid(format!("id `{}` cannot be written", inst.id)));
        }
        if k > 0 {
            writeln!(sink)?;
        }
        writeln!(sink, "# id: {}", inst.id)?;
        for (tok, count) in inst.tokens.iter().zip(&inst.emph_counts) {
            if tok.text.is_empty() || bad(&tok.text) {
                return Err(Error::invalid(format!(
                    "instance `{}`: token `{}` cannot be written",
                    inst.id, tok.text
                )));
            }
            let pos = match tok.pos.as_deref() {
                None => "_",
                Some(p) if p.is_empty() || p == "_" || bad(p) => {
                    return Err(Error::invalid(format!(
                        "instance `{}`: POS tag `{p}` cannot be written",
                        inst.id
                    )))
                }
                Some(p) => p,
            };
            writeln!(sink, "{}\t{}\t{}\t{}\t{}", tok.index, tok.text, pos, count, inst.ann_total)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Corpus> {
        parse_corpus(text.as_bytes(), "test")
    }

    #[test]
    fn minimal_block() {
        let c = parse("0\tBuy\tVERB\t3\t9\n1\tnow\tADV\t7\t9").unwrap();
        assert_eq!(c.len(), 1);
        let inst = &c.instances()[0];
        assert_eq!(inst.id(), "0");
        assert_eq!(inst.len(), 2);
        assert_eq!(inst.emph_counts(), &[3, 7]);
        assert_eq!(inst.ann_total(), 9);
        assert_eq!(inst.tokens()[1].pos.as_deref(), Some("ADV"));
    }

    #[test]
    fn ids_comments_and_missing_pos() {
        let text = "# source: unit test\n# id: a\n0\tHi\t_\t1\t2\n\n\n0\tthere\tPRON\t0\t2\n";
        let c = parse(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.instances()[0].id(), "a");
        assert_eq!(c.instances()[0].tokens()[0].pos, None);
        assert_eq!(c.instances()[1].id(), "1");
    }

    #[test]
    fn count_above_total_names_the_line() {
        let err = parse("0\ta\tX\t1\t9\n1\tb\tX\t10\t9\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("exceeds"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse("0\ta\tX\t1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse("0\ta\tX\t1\t9\n1\tb\tX\t1\t8\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse("1\ta\tX\t1\t9\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse(""), Err(Error::Parse { .. })));
        assert!(matches!(parse("# only a comment\n\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            parse("# id: x\n0\ta\tX\t1\t9\n\n# id: x\n0\tb\tX\t1\t9\n"),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn targets() {
        let inst = AnnotatedInstance::from_parts("t", [("a", None, 3), ("b", None, 0), ("c", None, 9)], 9)
            .unwrap();
        let t = target_distribution(&inst);
        assert!((t[0].p_i - 1.0 / 3.0).abs() < 1e-15);
        assert!((t[0].p_o - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((t[1].p_i, t[1].p_o), (0.0, 1.0));
        assert_eq!((t[2].p_i, t[2].p_o), (1.0, 0.0));
    }

    #[test]
    fn buckets() {
        assert_eq!(LengthBucket::of_len(5), LengthBucket::Short);
        assert_eq!(LengthBucket::of_len(6), LengthBucket::Medium);
        assert_eq!(LengthBucket::of_len(18), LengthBucket::Medium);
        assert_eq!(LengthBucket::of_len(19), LengthBucket::Long);
    }

    #[test]
    fn single_token_shuffle_is_identity() {
        let inst = AnnotatedInstance::from_parts("s", [("only", Some("NOUN"), 2)], 3).unwrap();
        for seed in [0, 1, u64::MAX] {
            let (out, perm) = shuffle_instance(&inst, seed);
            assert_eq!(perm, vec![0]);
            assert_eq!(out, inst);
        }
    }

    #[test]
    fn shuffle_matches_reference_stream() {
        // tests/fixtures/prng_reference.py: permutation(42, 5)
        let inst = AnnotatedInstance::from_parts(
            "p",
            [("a", None, 0), ("b", None, 1), ("c", None, 2), ("d", None, 3), ("e", None, 4)],
            4,
        )
        .unwrap();
        let (out, perm) = shuffle_instance(&inst, 42);
        assert_eq!(perm, vec![1, 2, 0, 4, 3]);
        assert_eq!(out.emph_counts(), &[1, 2, 0, 4, 3]);
        let texts: Vec<_> = out.tokens().iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["b", "c", "a", "e", "d"]);
        assert!(out.tokens().iter().enumerate().all(|(k, t)| t.index == k));
        assert_eq!(shuffle_instance(&inst, 42), (out, perm));
    }
}
