use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Precision, recall and F1. When nothing was predicted precision is
/// undefined; it is reported as 0 with `precision_undefined` set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
}

pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision_undefined = tp + fp == 0;
    let precision = if precision_undefined { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        precision_undefined,
    }
}

/// Micro-averaged F1 over per-example label sets.
pub fn micro_f1_sets(gold: &[BTreeSet<String>], pred: &[BTreeSet<String>]) -> Prf {
    assert_eq!(gold.len(), pred.len(), "one prediction per example");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let hit = g.intersection(p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    prf_from_counts(tp, fp, fn_)
}

pub fn accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> f64 {
    assert_eq!(gold.len(), pred.len(), "one prediction per example");
    if gold.is_empty() {
        return 0.0;
    }
    gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len() as f64
}

/// Micro-F1 that ignores `no_relation`: it never counts as a positive
/// prediction or a positive gold label.
pub fn tacred_f1(gold: &[String], pred: &[String], no_relation: &str) -> Prf {
    assert_eq!(gold.len(), pred.len(), "one prediction per example");
    let (mut tp, mut pred_pos, mut gold_pos) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        if p != no_relation {
            pred_pos += 1;
        }
        if g != no_relation {
            gold_pos += 1;
        }
        if g == p && g != no_relation {
            tp += 1;
        }
    }
    prf_from_counts(tp, pred_pos - tp, gold_pos - tp)
}

/// Entity span `(start, end, type)`, inclusive.
pub type TypedSpan = (usize, usize, String);

/// A validated IOB2 tag inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Iob2 {
    tags: Vec<String>,
}

fn split_tag(tag: &str) -> Option<(char, &str)> {
    if tag == "O" {
        return Some(('O', ""));
    }
    let (prefix, ty) = tag.split_once('-')?;
    match prefix {
        "B" if !ty.is_empty() => Some(('B', ty)),
        "I" if !ty.is_empty() => Some(('I', ty)),
        _ => None,
    }
}

impl Iob2 {
    /// Accepts `O`, `B-X`, `I-X`; every `I-X` needs its `B-X`. `O` is
    /// added when missing. Tags are kept sorted.
    pub fn new<S: AsRef<str>>(tags: &[S]) -> Result<Self> {
        let mut set: BTreeSet<String> = BTreeSet::new();
        for t in tags {
            let t = t.as_ref();
            if split_tag(t).is_none() {
                return Err(Error::NotIob2(format!("tag `{t}`")));
            }
            set.insert(t.to_string());
        }
        for t in &set {
            if let Some(('I', ty)) = split_tag(t) {
                if !set.contains(&format!("B-{ty}")) {
                    return Err(Error::NotIob2(format!("`{t}` without `B-{ty}`")));
                }
            }
        }
        set.insert("O".to_string());
        Ok(Iob2 {
            tags: set.into_iter().collect(),
        })
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.tags.binary_search_by(|t| t.as_str().cmp(tag)).ok()
    }
}

/// Rewrites an `I-X` that follows `O`, the start, or a different type as
/// `B-X`.
pub fn repair_iob2<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(tags.len());
    let mut prev_type: Option<String> = None;
    for t in tags {
        let t = t.as_ref();
        match split_tag(t) {
            Some(('I', ty)) if prev_type.as_deref() != Some(ty) => {
                out.push(format!("B-{ty}"));
                prev_type = Some(ty.to_string());
            }
            Some(('B', ty)) | Some(('I', ty)) => {
                out.push(t.to_string());
                prev_type = Some(ty.to_string());
            }
            _ => {
                out.push("O".to_string());
                prev_type = None;
            }
        }
    }
    out
}

/// Spans of a tag sequence after repair.
pub fn iob2_spans<S: AsRef<str>>(tags: &[S]) -> Vec<TypedSpan> {
    let tags = repair_iob2(tags);
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, t) in tags.iter().enumerate() {
        match split_tag(t) {
            Some(('B', ty)) => {
                if let Some((s, ty)) = open.take() {
                    spans.push((s, i - 1, ty));
                }
                open = Some((i, ty.to_string()));
            }
            Some(('I', _)) => {}
            _ => {
                if let Some((s, ty)) = open.take() {
                    spans.push((s, i - 1, ty));
                }
            }
        }
    }
    if let Some((s, ty)) = open {
        spans.push((s, tags.len() - 1, ty));
    }
    spans
}

/// Span-level micro-F1 between gold and predicted tag sequences.
pub fn span_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Prf {
    assert_eq!(gold.len(), pred.len(), "one prediction per example");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let g: HashSet<TypedSpan> = iob2_spans(g).into_iter().collect();
        let p: HashSet<TypedSpan> = iob2_spans(p).into_iter().collect();
        let hit = g.intersection(&p).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    prf_from_counts(tp, fp, fn_)
}

/// Scores of one configuration across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

impl EvalResult {
    pub fn new(metric: impl Into<String>, seeds: Vec<u64>, per_seed: Vec<f64>) -> Self {
        assert_eq!(seeds.len(), per_seed.len(), "one value per seed");
        let (mean, std) = mean_std(&per_seed);
        EvalResult {
            metric: metric.into(),
            seeds,
            per_seed,
            mean,
            std,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    if values.is_empty() {
        return (0.0, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    (mean, std)
}

pub const SIGNIFICANCE_LEVELS: [f64; 2] = [0.005, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub alpha: f64,
    pub significant: bool,
}

/// One-sided pooled-variance Student's t-test of `treatment > baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// One-sided p-value, P(T >= t).
    pub p_value: f64,
    pub levels: Vec<Significance>,
    /// Zero pooled variance: `t` is 0 or ±infinity by convention.
    pub degenerate: bool,
}

impl TTest {
    pub fn significant_at(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

pub fn t_test(baseline: &[f64], treatment: &[f64]) -> Result<TTest> {
    let (n1, n2) = (baseline.len(), treatment.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::Config(format!("t-test needs >= 2 runs per side, got {n1} and {n2}")));
    }
    let (m1, _) = mean_std(baseline);
    let (m2, _) = mean_std(treatment);
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let df = n1 + n2 - 2;
    let pooled = (ss(baseline, m1) + ss(treatment, m2)) / df as f64;
    let diff = m2 - m1;
    let (t, p_value, degenerate) = if pooled == 0.0 {
        if diff == 0.0 {
            (0.0, 0.5, true)
        } else if diff > 0.0 {
            (f64::INFINITY, 0.0, true)
        } else {
            (f64::NEG_INFINITY, 1.0, true)
        }
    } else {
        let t = diff / (pooled * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 2");
        (t, dist.sf(t), false)
    };
    let levels = SIGNIFICANCE_LEVELS
        .iter()
        .map(|&alpha| Significance {
            alpha,
            significant: p_value < alpha,
        })
        .collect();
    Ok(TTest {
        t,
        df,
        p_value,
        levels,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    fn strings(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn micro_f1_by_formula() {
        // TP = 2, FP = 1, FN = 1
        let gold = vec![set(&["a", "b"]), set(&["c"])];
        let pred = vec![set(&["a", "b", "d"]), set(&[])];
        let prf = micro_f1_sets(&gold, &pred);
        assert!((prf.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(micro_f1_sets(&gold, &gold).f1, 1.0);
    }

    #[test]
    fn empty_predictions_flag_precision() {
        let prf = micro_f1_sets(&[set(&["a"])], &[set(&[])]);
        assert!(prf.precision_undefined);
        assert_eq!((prf.precision, prf.f1), (0.0, 0.0));
    }

    #[test]
    fn iob2_spans_by_hand() {
        let spans = iob2_spans(&strings("B-PER I-PER O B-LOC"));
        assert_eq!(spans, vec![(0, 1, "PER".into()), (3, 3, "LOC".into())]);
    }

    #[test]
    fn repair_turns_orphan_inside_into_begin() {
        assert_eq!(repair_iob2(&strings("O I-LOC I-LOC B-PER I-ORG")), strings("O B-LOC I-LOC B-PER B-ORG"));
        assert_eq!(repair_iob2(&strings("I-PER")), strings("B-PER"));
    }

    #[test]
    fn all_outside_prediction() {
        let gold = vec![strings("B-PER O")];
        let pred = vec![strings("O O")];
        let prf = span_f1(&gold, &pred);
        assert!(prf.precision_undefined);
        assert_eq!(prf.f1, 0.0);
        assert_eq!(span_f1(&gold, &gold).f1, 1.0);
    }

    #[test]
    fn iob2_inventory_validation() {
        assert!(Iob2::new(&["O", "B-PER", "I-PER"]).is_ok());
        assert!(matches!(Iob2::new(&["O", "I-PER"]), Err(Error::NotIob2(_))));
        assert!(matches!(Iob2::new(&["PER", "O"]), Err(Error::NotIob2(_))));
        let inv = Iob2::new(&["B-LOC"]).unwrap();
        assert_eq!(inv.tags(), &["B-LOC".to_string(), "O".to_string()]);
    }

    #[test]
    fn tacred_f1_ignores_no_relation() {
        let gold = strings("r1 r1 r2 NA NA r2");
        let pred = strings("r1 r2 r2 NA r1 NA");
        // TP 2 of 4 predicted positives and 4 gold positives
        let prf = tacred_f1(&gold, &pred, "NA");
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.5, 0.5, 0.5));
        assert_eq!(accuracy(&gold, &gold), 1.0);
    }

    #[test]
    fn std_of_identical_runs_is_zero() {
        let r = EvalResult::new("acc", vec![42, 43, 44], vec![0.5, 0.5, 0.5]);
        assert_eq!(r.std, Some(0.0));
        let single = EvalResult::new("acc", vec![42], vec![0.7]);
        assert_eq!(single.std, None);
    }

    #[test]
    fn t_test_conventions_and_fixture() {
        let same = t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.t, 0.0);
        assert!(!same.significant_at(0.1));

        let flat = t_test(&[1.0; 5], &[2.0; 5]).unwrap();
        assert!(flat.degenerate && flat.t == f64::INFINITY && flat.significant_at(0.005));

        let base = [10.0, 11.0, 9.0, 10.0, 10.0];
        let treat = [13.0, 12.0, 14.0, 13.0, 13.0];
        // means 10 and 13, sample variances 0.5 each, pooled 0.5
        let t = t_test(&base, &treat).unwrap();
        assert!((t.t - 3.0 / (0.5f64 * 0.4).sqrt()).abs() < 1e-12);
        assert_eq!(t.df, 8);
        assert!(t.levels.iter().all(|l| l.significant));
        let swapped = t_test(&treat, &base).unwrap();
        assert_eq!(swapped.t, -t.t);
        assert!(t_test(&[1.0], &[1.0, 2.0]).is_err());
    }
}
