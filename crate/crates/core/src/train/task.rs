//! Synthetic classification tasks.
//!
//! * `bag_separable`: token `t` votes for class `t mod C`; the label is the
//!   class with the most votes. Ties are never generated.
//! * `pattern_match`: class `c > 0` plants the bigram assigned to `c` at a
//!   random position; class 0 contains no assigned bigram anywhere.
//! * `pair_entail`: `A 0 B`. Label 1 iff every token of `B` occurs in `A`.
//!   Token 0 is reserved as the separator. The mismatched split draws half
//!   its tokens from a vocabulary band the training split never uses.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BagSeparable,
    PatternMatch,
    PairEntail,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::BagSeparable => "bag_separable",
            TaskKind::PatternMatch => "pattern_match",
            TaskKind::PairEntail => "pair_entail",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

pub type Example = (Vec<usize>, usize);

/// Generated splits. `mismatched` is present only for `pair_entail`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub mismatched: Option<Vec<Example>>,
}

/// Rejection-sampling budget per requested example.
const MAX_ATTEMPTS: usize = 10_000;

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.seq_len == 0 || self.n_train == 0 || self.n_eval == 0 {
            return bad("seq_len, n_train and n_eval must be positive".into());
        }
        match self.kind {
            TaskKind::BagSeparable => {
                if self.vocab_size < self.n_classes {
                    return bad("bag_separable needs vocab_size >= n_classes".into());
                }
            }
            TaskKind::PatternMatch => {
                if self.seq_len < 2 || self.vocab_size < (self.n_classes + 1).max(4) {
                    return bad("pattern_match needs seq_len >= 2 and vocab_size > max(n_classes, 3)".into());
                }
            }
            TaskKind::PairEntail => {
                if self.n_classes != 2 {
                    return bad("pair_entail is a 2-class task".into());
                }
                if self.seq_len < 4 || self.vocab_size < 8 {
                    return bad("pair_entail needs seq_len >= 4 and vocab_size >= 8".into());
                }
            }
        }
        Ok(())
    }

    /// Deterministic in `seed`. Train and eval sequences are disjoint;
    /// labels cycle through the classes so every split is balanced.
    pub fn generate(&self) -> Result<TaskData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let patterns = self.patterns(&mut rng);
        let train = self.split(self.n_train, false, None, &patterns, &mut rng)?;
        let train_set: HashSet<Vec<usize>> = train.iter().map(|(s, _)| s.clone()).collect();
        let eval = self.split(self.n_eval, false, Some(&train_set), &patterns, &mut rng)?;
        let mismatched = match self.kind {
            TaskKind::PairEntail => Some(self.split(self.n_eval, true, Some(&train_set), &patterns, &mut rng)?),
            _ => None,
        };
        Ok(TaskData {
            train,
            eval,
            mismatched,
        })
    }

    fn split(
        &self,
        n: usize,
        shifted: bool,
        exclude: Option<&HashSet<Vec<usize>>>,
        patterns: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.n_classes;
            let seq = (0..MAX_ATTEMPTS)
                .map(|_| self.sample(label, shifted, patterns, rng))
                .find(|s| exclude.map_or(true, |set| !set.contains(s)))
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "{} cannot produce {n} distinct examples at this size",
                        self.kind
                    ))
                })?;
            out.push((seq, label));
        }
        Ok(out)
    }

    fn patterns(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        if self.kind != TaskKind::PatternMatch {
            return Vec::new();
        }
        let mut out: Vec<(usize, usize)> = Vec::new();
        while out.len() < self.n_classes - 1 {
            let p = (rng.gen_range(0..self.vocab_size), rng.gen_range(0..self.vocab_size));
            if p.0 != p.1 && !out.iter().any(|q| q.0 == p.0 || q.1 == p.1) {
                out.push(p);
            }
        }
        out
    }

    fn sample(&self, label: usize, shifted: bool, patterns: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (v, n, c) = (self.vocab_size, self.seq_len, self.n_classes);
        match self.kind {
            TaskKind::BagSeparable => loop {
                let s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
                let mut votes = vec![0usize; c];
                for &t in &s {
                    votes[t % c] += 1;
                }
                let top = *votes.iter().max().unwrap();
                if votes[label] == top && votes.iter().filter(|&&x| x == top).count() == 1 {
                    return s;
                }
            },
            TaskKind::PatternMatch => loop {
                let mut s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
                if label > 0 {
                    let (a, b) = patterns[label - 1];
                    let at = rng.gen_range(0..n - 1);
                    s[at] = a;
                    s[at + 1] = b;
                }
                let hits: Vec<usize> = (0..patterns.len())
                    .filter(|&k| s.windows(2).any(|w| (w[0], w[1]) == patterns[k]))
                    .collect();
                let ok = if label == 0 { hits.is_empty() } else { hits == [label - 1] };
                if ok {
                    return s;
                }
            },
            TaskKind::PairEntail => loop {
                let b_len = ((n - 1) / 3).max(1);
                let a_len = n - 1 - b_len;
                let base_hi = 1 + (v - 1) * 3 / 4;
                let draw = |rng: &mut ChaCha8Rng| {
                    if shifted && rng.gen_bool(0.5) {
                        rng.gen_range(base_hi..v)
                    } else {
                        rng.gen_range(1..base_hi)
                    }
                };
                let a: Vec<usize> = (0..a_len).map(|_| draw(rng)).collect();
                let mut b: Vec<usize> = (0..b_len).map(|_| *a.choose(rng).unwrap()).collect();
                if label == 0 {
                    let Some(outside) = (0..64).map(|_| draw(rng)).find(|t| !a.contains(t)) else {
                        continue;
                    };
                    let at = rng.gen_range(0..b_len);
                    b[at] = outside;
                }
                b.shuffle(rng);
                let mut s = a;
                s.push(0);
                s.append(&mut b);
                return s;
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind, n_classes: usize) -> SyntheticTask {
        SyntheticTask {
            kind,
            vocab_size: 32,
            seq_len: 10,
            n_classes,
            n_train: 300,
            n_eval: 100,
            seed: 9,
        }
    }

    fn bag_label(s: &[usize], c: usize) -> usize {
        let mut votes = vec![0; c];
        s.iter().for_each(|t| votes[t % c] += 1);
        (0..c).max_by_key(|&k| votes[k]).unwrap()
    }

    #[test]
    fn splits_are_balanced_disjoint_and_deterministic() {
        for (kind, c) in [(TaskKind::BagSeparable, 3), (TaskKind::PatternMatch, 3), (TaskKind::PairEntail, 2)] {
            let t = task(kind, c);
            let data = t.generate().unwrap();
            assert_eq!(data, t.generate().unwrap());
            let train: HashSet<_> = data.train.iter().map(|e| e.0.clone()).collect();
            assert!(data.eval.iter().all(|e| !train.contains(&e.0)));
            for k in 0..c {
                let share = data.train.iter().filter(|e| e.1 == k).count() as f64 / 300.0;
                assert!((share - 1.0 / c as f64).abs() <= 0.05);
            }
            assert!(data.train.iter().all(|(s, _)| s.len() == 10 && s.iter().all(|&x| x < 32)));
            assert_eq!(data.mismatched.is_some(), kind == TaskKind::PairEntail);
        }
    }

    #[test]
    fn bag_labels_follow_vote_counts() {
        let data = task(TaskKind::BagSeparable, 3).generate().unwrap();
        assert!(data.train.iter().all(|(s, y)| bag_label(s, 3) == *y));
    }

    #[test]
    fn entailment_labels_follow_set_inclusion() {
        let data = task(TaskKind::PairEntail, 2).generate().unwrap();
        for (s, y) in data.train.iter().chain(data.mismatched.as_ref().unwrap()) {
            let sep = s.iter().position(|&t| t == 0).unwrap();
            let (a, b) = (&s[..sep], &s[sep + 1..]);
            assert_eq!(b.iter().all(|t| a.contains(t)), *y == 1);
        }
    }

    #[test]
    fn mismatched_split_uses_shifted_band() {
        let data = task(TaskKind::PairEntail, 2).generate().unwrap();
        let hi = |xs: &[Example]| xs.iter().flat_map(|e| e.0.iter()).filter(|&&t| t >= 24).count();
        assert_eq!(hi(&data.train), 0);
        assert!(hi(data.mismatched.as_ref().unwrap()) > 100);
    }

    #[test]
    fn invalid_tasks_are_rejected() {
        assert!(task(TaskKind::PairEntail, 3).validate().is_err());
        let mut t = task(TaskKind::BagSeparable, 2);
        t.n_classes = 1;
        assert!(t.validate().is_err());
        let tiny = SyntheticTask {
            vocab_size: 2,
            seq_len: 1,
            n_train: 2,
            n_eval: 5,
            ..task(TaskKind::BagSeparable, 2)
        };
        assert!(matches!(tiny.generate(), Err(Error::InvalidConfig(_))));
    }
}
