//! Corpus BLEU and a METEOR variant restricted to exact and stem matches.

use std::collections::HashMap;
use std::fmt::Write as _;

use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};

/// One hypothesis with all of its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: u64,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalRecord {
    pub fn new(image_id: u64, hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Self {
        EvalRecord {
            image_id,
            hypothesis,
            references,
        }
    }

    /// Builds a record from whitespace-separated strings.
    pub fn from_strs(image_id: u64, hypothesis: &str, references: &[&str]) -> Self {
        let split = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        EvalRecord::new(image_id, split(hypothesis), references.iter().map(|r| split(r)).collect())
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-1 through BLEU-`max_n`, element `k - 1` being B-k.
pub fn bleu_corpus(records: &[EvalRecord], max_n: usize) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Data("BLEU needs at least one record".into()));
    }
    if !(1..=4).contains(&max_n) {
        return Err(Error::Config(format!("max_n must be in 1..=4, got {max_n}")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for r in records {
        if r.references.is_empty() {
            return Err(Error::Data(format!("record {} has no references", r.image_id)));
        }
        let c = r.hypothesis.len();
        hyp_len += c;
        ref_len += r
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&len| (len.abs_diff(c), len))
            .unwrap();
        for n in 1..=max_n {
            let hyp = ngram_counts(&r.hypothesis, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for reference in &r.references {
                for (g, k) in ngram_counts(reference, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in hyp {
                total[n - 1] += k;
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 1..=max_n {
        if matched[k - 1] == 0 {
            zero = true;
        }
        if zero {
            out.push(0.0);
            continue;
        }
        log_sum += (matched[k - 1] as f64 / total[k - 1] as f64).ln();
        out.push(bp * (log_sum / k as f64).exp());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

/// Greedy exact-then-stem unigram alignment as `(hyp_index, ref_index)`
/// pairs sorted by hypothesis position.
pub fn align(hyp: &[String], reference: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut hyp_used = vec![false; hyp.len()];
    let mut pairs = Vec::new();
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && reference[j] == *h) {
            ref_used[j] = true;
            hyp_used[i] = true;
            pairs.push((i, j));
        }
    }
    let ref_stems: Vec<String> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    for (i, h) in hyp.iter().enumerate() {
        if hyp_used[i] {
            continue;
        }
        let s = stemmer.stem(h);
        if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_stems[j] == s) {
            ref_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of maximal runs contiguous in both hypothesis and reference.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

fn meteor_single(hyp: &[String], reference: &[String], p: &MeteorParams, stemmer: &Stemmer) -> f64 {
    let alignment = align(hyp, reference, stemmer);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let precision = m as f64 / hyp.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let f_mean = precision * recall / (p.alpha * precision + (1.0 - p.alpha) * recall);
    let chunks = count_chunks(&alignment) as f64;
    let penalty = p.gamma * (chunks / m as f64).powf(p.beta);
    f_mean * (1.0 - penalty)
}

/// METEOR of one record: the best score over its references.
pub fn meteor_lite(record: &EvalRecord, params: &MeteorParams) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    record
        .references
        .iter()
        .map(|r| meteor_single(&record.hypothesis, r, params, &stemmer))
        .fold(0.0, f64::max)
}

/// Mean per-record METEOR. The sum runs over sorted scores so the result
/// does not depend on record order.
pub fn meteor_corpus(records: &[EvalRecord], params: &MeteorParams) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("METEOR needs at least one record".into()));
    }
    let mut scores: Vec<f64> = records.iter().map(|r| meteor_lite(r, params)).collect();
    scores.sort_by(f64::total_cmp);
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// B-1 through B-4 in `[0, 1]`.
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub samples: usize,
    pub rejected: usize,
}

impl MetricReport {
    pub fn compute(records: &[EvalRecord], rejected: usize) -> Result<Self> {
        let b = bleu_corpus(records, 4)?;
        Ok(MetricReport {
            bleu: [b[0], b[1], b[2], b[3]],
            meteor: meteor_corpus(records, &MeteorParams::default())?,
            samples: records.len(),
            rejected,
        })
    }

    /// `metric=value` lines scaled by 100.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, b) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "B-{}={:.4}", k + 1, b * 100.0);
        }
        let _ = writeln!(s, "METEOR={:.4}", self.meteor * 100.0);
        s
    }

    /// Parses the output of [`MetricReport::to_kv`] back into unscaled scores.
    pub fn parse_kv(text: &str) -> Result<HashMap<String, f64>> {
        let mut out = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad number {v:?}"),
            })?;
            out.insert(k.trim().to_string(), v / 100.0);
        }
        Ok(out)
    }

    pub fn table_header() -> String {
        format!(
            "{:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}",
            "model", "B-1", "B-2", "B-3", "B-4", "METEOR", "samples", "rejected"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<16} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8} {:>8}",
            name,
            self.bleu[0] * 100.0,
            self.bleu[1] * 100.0,
            self.bleu[2] * 100.0,
            self.bleu[3] * 100.0,
            self.meteor * 100.0,
            self.samples,
            self.rejected
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(h: &str, refs: &[&str]) -> EvalRecord {
        EvalRecord::from_strs(0, h, refs)
    }

    #[test]
    fn brevity_penalty_example() {
        let b = bleu_corpus(&[rec("the cat sat", &["the cat sat down"])], 1).unwrap();
        assert!((b[0] - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
        assert!((b[0] - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_empty() {
        let recs = [rec("a dog on a table .", &["a dog on a table .", "x"])];
        assert_eq!(bleu_corpus(&recs, 4).unwrap(), vec![1.0; 4]);
        assert_eq!(bleu_corpus(&[rec("", &["a b"])], 4).unwrap(), vec![0.0; 4]);
        assert!(bleu_corpus(&[], 4).is_err());
    }

    #[test]
    fn meteor_examples() {
        let p = MeteorParams::default();
        let s = meteor_lite(&rec("a b c d e", &["a b c d e"]), &p);
        assert!((s - 0.996).abs() < 1e-12);
        assert_eq!(meteor_lite(&rec("x y", &["a b"]), &p), 0.0);
        assert!((meteor_lite(&rec("dogs", &["dog"]), &p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chunk_counting() {
        assert_eq!(count_chunks(&[]), 0);
        assert_eq!(count_chunks(&[(0, 0), (1, 1), (2, 3)]), 2);
        assert_eq!(count_chunks(&[(0, 1), (1, 0)]), 2);
    }

    #[test]
    fn kv_round_trip() {
        let r = MetricReport {
            bleu: [0.5, 0.25, 0.125, 0.0625],
            meteor: 0.3,
            samples: 3,
            rejected: 1,
        };
        let kv = MetricReport::parse_kv(&r.to_kv()).unwrap();
        let mut keys: Vec<_> = kv.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["B-1", "B-2", "B-3", "B-4", "METEOR"]);
        assert!((kv["METEOR"] - 0.3).abs() < 1e-9);
    }
}
