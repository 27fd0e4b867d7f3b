//! Synthetic sequence-to-sequence tasks.
//!
//! Targets are pure functions of sources, datasets are deterministic given
//! the seed, and validation sources are disjoint from training sources
//! (all generated sources are unique).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First token id usable as task payload; smaller ids are reserved.
pub const FIRST_SYMBOL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::InvalidConfig {
                field: "task",
                reason: format!("unknown task `{other}` (copy|reverse|sort)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary size including the reserved pad/bos/eos ids.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            vocab: 20,
            min_len: 5,
            max_len: 12,
            samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn target_of(kind: TaskKind, source: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => source.to_vec(),
        TaskKind::Reverse => source.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut t = source.to_vec();
            t.sort_unstable();
            t
        }
    }
}

/// Number of distinct sources expressible under the spec, saturating.
fn distinct_sources(spec: &TaskSpec) -> usize {
    let symbols = spec.vocab - FIRST_SYMBOL;
    let mut total = 0usize;
    for len in spec.min_len..=spec.max_len {
        let mut count = 1usize;
        for _ in 0..len {
            count = count.saturating_mul(symbols);
        }
        total = total.saturating_add(count);
    }
    total
}

/// Deterministic dataset with a 90/10 train/validation split.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    if spec.vocab < FIRST_SYMBOL + 1 {
        return Err(Error::DegenerateTask(format!(
            "vocab {} leaves no payload symbols beyond the {} reserved ids",
            spec.vocab, FIRST_SYMBOL
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::DegenerateTask(format!(
            "empty length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.samples < 2 {
        return Err(Error::DegenerateTask(
            "need at least 2 samples for a train/validation split".into(),
        ));
    }
    if distinct_sources(spec) < spec.samples {
        return Err(Error::DegenerateTask(format!(
            "cannot draw {} unique sources from this spec",
            spec.samples
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(spec.samples);
    let mut examples = Vec::with_capacity(spec.samples);
    while examples.len() < spec.samples {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let source: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(FIRST_SYMBOL..spec.vocab))
            .collect();
        if seen.insert(source.clone()) {
            let target = target_of(spec.kind, &source);
            examples.push(Example { source, target });
        }
    }
    let n_val = (spec.samples / 10).max(1);
    let val = examples.split_off(spec.samples - n_val);
    Ok(Dataset {
        train: examples,
        val,
    })
}

fn tokens_to_line(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn line_to_tokens(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|e| Error::ConfigParse {
                line: 0,
                reason: format!("bad token `{t}`: {e}"),
            })
        })
        .collect()
}

impl Dataset {
    fn to_text(&self) -> String {
        let mut s = String::new();
        for ex in self.train.iter().chain(&self.val) {
            s.push_str(&tokens_to_line(&ex.source));
            s.push('\t');
            s.push_str(&tokens_to_line(&ex.target));
            s.push('\n');
        }
        s
    }

    /// One example per line: source tokens, tab, target tokens.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Load a cache written by [`Dataset::save`], restoring the same
    /// 90/10 split.
    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                reason: "expected source<TAB>target".into(),
            })?;
            examples.push(Example {
                source: line_to_tokens(src)?,
                target: line_to_tokens(tgt)?,
            });
        }
        if examples.len() < 2 {
            return Err(Error::DegenerateTask("cache holds fewer than 2 examples".into()));
        }
        let n_val = (examples.len() / 10).max(1);
        let val = examples.split_off(examples.len() - n_val);
        Ok(Dataset {
            train: examples,
            val,
        })
    }

    /// FNV-1a hash of the textual serialization, as fixed-width hex.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab: 10,
            min_len: 2,
            max_len: 5,
            samples: 50,
            seed: 9,
        }
    }

    #[test]
    fn task_definitions() {
        assert_eq!(target_of(TaskKind::Copy, &[5, 9, 3]), vec![5, 9, 3]);
        assert_eq!(target_of(TaskKind::Reverse, &[5, 9, 3]), vec![3, 9, 5]);
        assert_eq!(target_of(TaskKind::Sort, &[5, 9, 3]), vec![3, 5, 9]);
    }

    #[test]
    fn generation_is_deterministic_and_split_disjoint() {
        let a = generate_task(&small_spec(TaskKind::Copy)).unwrap();
        let b = generate_task(&small_spec(TaskKind::Copy)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 45);
        assert_eq!(a.val.len(), 5);
        let train_sources: HashSet<&Vec<usize>> = a.train.iter().map(|e| &e.source).collect();
        for v in &a.val {
            assert!(!train_sources.contains(&v.source));
        }
        for e in a.train.iter().chain(&a.val) {
            assert!(e.source.iter().all(|&t| (FIRST_SYMBOL..10).contains(&t)));
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = small_spec(TaskKind::Copy);
        s.vocab = 3;
        assert!(matches!(generate_task(&s), Err(Error::DegenerateTask(_))));

        let mut s = small_spec(TaskKind::Copy);
        s.min_len = 6;
        s.max_len = 5;
        assert!(generate_task(&s).is_err());

        let mut s = small_spec(TaskKind::Copy);
        s.vocab = 4;
        s.min_len = 2;
        s.max_len = 2;
        s.samples = 10; // only one symbol: a single distinct source exists
        assert!(generate_task(&s).is_err());
    }

    #[test]
    fn cache_round_trip_and_stable_hash() {
        let ds = generate_task(&small_spec(TaskKind::Reverse)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(loaded.content_hash(), ds.content_hash());
        let other = generate_task(&TaskSpec {
            seed: 10,
            ..small_spec(TaskKind::Reverse)
        })
        .unwrap();
        assert_ne!(other.content_hash(), ds.content_hash());
    }
}
