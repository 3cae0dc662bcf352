use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Typing,
    Ner,
    Relc,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Typing => "typing",
            Task::Ner => "ner",
            Task::Relc => "relc",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "typing" => Ok(Task::Typing),
            "ner" => Ok(Task::Ner),
            "relc" => Ok(Task::Relc),
            _ => Err(Error::Config(format!("unknown task `{s}` (typing, ner, relc)"))),
        }
    }
}

/// One span with a (possibly empty) set of type labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypingExample {
    pub tokens: Vec<String>,
    /// Inclusive token span.
    pub span: [usize; 2],
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelcExample {
    pub tokens: Vec<String>,
    pub subj: [usize; 2],
    pub obj: [usize; 2],
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Examples {
    Typing(Vec<TypingExample>),
    Ner(Vec<NerExample>),
    Relc(Vec<RelcExample>),
}

impl Examples {
    pub fn task(&self) -> Task {
        match self {
            Examples::Typing(_) => Task::Typing,
            Examples::Ner(_) => Task::Ner,
            Examples::Relc(_) => Task::Relc,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Examples::Typing(v) => v.len(),
            Examples::Ner(v) => v.len(),
            Examples::Relc(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Examples {
        fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
            idx.iter().map(|&i| v[i].clone()).collect()
        }
        match self {
            Examples::Typing(v) => Examples::Typing(pick(v, indices)),
            Examples::Ner(v) => Examples::Ner(pick(v, indices)),
            Examples::Relc(v) => Examples::Relc(pick(v, indices)),
        }
    }

    /// Every label (or tag) mentioned, sorted.
    pub fn label_set(&self) -> BTreeSet<String> {
        match self {
            Examples::Typing(v) => v.iter().flat_map(|e| e.labels.iter().cloned()).collect(),
            Examples::Ner(v) => v.iter().flat_map(|e| e.tags.iter().cloned()).collect(),
            Examples::Relc(v) => v.iter().map(|e| e.label.clone()).collect(),
        }
    }

    fn validate(&self) -> std::result::Result<(), (usize, String)> {
        let check_span = |tokens: &[String], span: [usize; 2], what: &str| {
            if span[0] > span[1] || span[1] >= tokens.len() {
                Err(format!("{what} span {span:?} outside {} tokens", tokens.len()))
            } else {
                Ok(())
            }
        };
        match self {
            Examples::Typing(v) => {
                for (i, e) in v.iter().enumerate() {
                    check_span(&e.tokens, e.span, "entity").map_err(|m| (i, m))?;
                }
            }
            Examples::Ner(v) => {
                for (i, e) in v.iter().enumerate() {
                    if e.tags.len() != e.tokens.len() {
                        return Err((i, format!("{} tags for {} tokens", e.tags.len(), e.tokens.len())));
                    }
                }
            }
            Examples::Relc(v) => {
                for (i, e) in v.iter().enumerate() {
                    check_span(&e.tokens, e.subj, "subject").map_err(|m| (i, m))?;
                    check_span(&e.tokens, e.obj, "object").map_err(|m| (i, m))?;
                }
            }
        }
        Ok(())
    }
}

/// A task split. `no_relation` names the label that TACRED-style scoring
/// ignores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub examples: Examples,
    pub no_relation: Option<String>,
}

impl TaskDataset {
    pub fn new(examples: Examples) -> Self {
        TaskDataset {
            examples,
            no_relation: None,
        }
    }

    pub fn task(&self) -> Task {
        self.examples.task()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn load(task: Task, path: &Path) -> Result<Self> {
        let examples = match task {
            Task::Typing => Examples::Typing(util::read_jsonl(path)?),
            Task::Ner => Examples::Ner(util::read_jsonl(path)?),
            Task::Relc => Examples::Relc(util::read_jsonl(path)?),
        };
        examples
            .validate()
            .map_err(|(i, m)| Error::malformed(path, i + 1, m))?;
        Ok(TaskDataset::new(examples))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match &self.examples {
            Examples::Typing(v) => util::write_jsonl(path, v),
            Examples::Ner(v) => util::write_jsonl(path, v),
            Examples::Relc(v) => util::write_jsonl(path, v),
        }
    }

    /// Uniform sample without replacement of `round(fraction * N)` examples,
    /// kept in their original order.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<TaskDataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let n = self.len();
        let k = (fraction * n as f64).round() as usize;
        if k == 0 {
            return Err(Error::Dataset(format!("fraction {fraction} of {n} examples is empty")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        Ok(TaskDataset {
            examples: self.examples.select(&idx),
            no_relation: self.no_relation.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relc(n: usize) -> TaskDataset {
        let examples = (0..n)
            .map(|i| RelcExample {
                tokens: vec![format!("w{i}"), "x".into()],
                subj: [0, 0],
                obj: [1, 1],
                label: format!("r{}", i % 3),
            })
            .collect();
        TaskDataset::new(Examples::Relc(examples))
    }

    #[test]
    fn full_fraction_is_identity() {
        let d = relc(50);
        assert_eq!(d.subsample(1.0, 42).unwrap(), d);
    }

    #[test]
    fn subsample_size_and_determinism() {
        let d = relc(200);
        let a = d.subsample(0.1, 42).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, d.subsample(0.1, 42).unwrap());
        assert_ne!(a, d.subsample(0.1, 43).unwrap());
    }

    #[test]
    fn empty_subsample_is_an_error() {
        assert!(matches!(relc(10).subsample(0.01, 1), Err(Error::Dataset(_))));
        assert!(relc(10).subsample(0.0, 1).is_err());
    }

    #[test]
    fn load_validates_spans() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"tokens\":[\"a\",\"b\"],\"span\":[0,1],\"labels\":[\"x\"]}\n{\"tokens\":[\"a\"],\"span\":[0,3],\"labels\":[]}\n").unwrap();
        assert!(matches!(TaskDataset::load(Task::Typing, &p), Err(Error::Malformed { line: 2, .. })));
    }
}
