//! Leave-last-two-out next-item evaluation with sampled candidates.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_excluding, HoldoutSplit, Vocabulary, MSK};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ForwardPass, ModelParams};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_negatives: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_negatives: 1000,
            ks: vec![1, 5, 10, 20],
            seed: 0,
            split: Split::Test,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.windows(2).any(|w| w[0] >= w[1]) || self.ks[0] == 0 {
            return Err(Error::Config("ks must be positive and strictly ascending".into()));
        }
        if self.num_negatives < *self.ks.last().unwrap() {
            return Err(Error::Config(format!(
                "num_negatives {} smaller than the largest K",
                self.num_negatives
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Hit rate per K, keyed by K.
    pub hr: BTreeMap<usize, f64>,
    pub num_sessions: usize,
    /// Sessions skipped because the candidate pool was too small.
    pub skipped_sessions: usize,
    pub seed: u64,
    pub config: EvalConfig,
    /// Mean pessimistic rank of probe tracks that were drawn as candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_mean_rank: Option<f64>,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k).copied()
    }
}

/// Scores candidate tracks given an input sequence.
pub trait Scorer: Sync {
    fn score(&self, input: &[u32], candidates: &[u32]) -> Result<Vec<f64>>;

    fn score_batch(&self, inputs: &[Vec<u32>], candidates: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        inputs
            .iter()
            .zip(candidates)
            .map(|(i, c)| self.score(i, c))
            .collect()
    }
}

/// Scores with a trained model: causal models read the last real position,
/// bidirectional models read an appended MSK position.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
}

impl ModelScorer<'_> {
    fn model_input(&self, input: &[u32]) -> Vec<u32> {
        let max_len = self.params.config.max_len;
        let mut row: Vec<u32> = input.to_vec();
        if !self.params.config.causal {
            row.push(MSK);
        }
        if row.len() > max_len {
            row.drain(..row.len() - max_len);
        }
        row
    }
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, input: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        Ok(self
            .score_batch(&[input.to_vec()], &[candidates.to_vec()])?
            .remove(0))
    }

    fn score_batch(&self, inputs: &[Vec<u32>], candidates: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<u32>> = inputs.iter().map(|i| self.model_input(i)).collect();
        let pass = ForwardPass::run(self.params, &rows, None)?;
        Ok(candidates
            .iter()
            .enumerate()
            .map(|(r, cands)| crate::model::score_candidates(self.params, pass.predicted_last(r), cands))
            .collect())
    }
}

/// `1 + |{j : negative_j >= target}|`; ties count against the target.
pub fn rank_target(target_logit: f64, negative_logits: &[f64]) -> Result<usize> {
    if !target_logit.is_finite() || negative_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ranking logits".into()));
    }
    Ok(1 + negative_logits.iter().filter(|&&l| l >= target_logit).count())
}

/// Uniform draw of `num_negatives` real tracks outside `observed ∪ {target}`.
pub fn sample_eval_candidates<R: rand::Rng + ?Sized>(
    observed: &BTreeSet<u32>,
    target: u32,
    num_tracks: usize,
    num_negatives: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let mut excluded = observed.clone();
    excluded.insert(target);
    sample_excluding(num_tracks, &excluded, num_negatives, rng)
}

/// Candidate substream for one session; fixed per (seed, session id) so
/// compared models rank the same candidates.
pub fn session_rng(seed_value: u64, session_id: &str) -> seed::Rng {
    seed::indexed_rng(seed_value, "eval", seed::label_hash(session_id))
}

struct Case {
    input: Vec<u32>,
    target: u32,
    negatives: Vec<u32>,
}

const CHUNK: usize = 256;

/// Runs the protocol with an arbitrary scorer.
pub fn evaluate_scorer<S: Scorer + ?Sized>(
    scorer: &S,
    splits: &[HoldoutSplit],
    num_tracks: usize,
    config: &EvalConfig,
    probe: Option<&HashSet<u32>>,
) -> Result<EvalReport> {
    config.validate()?;
    let mut skipped = 0;
    let mut cases = Vec::with_capacity(splits.len());
    for split in splits {
        let (input, target) = match config.split {
            Split::Validation => (split.val_input().to_vec(), split.val_target),
            Split::Test => (split.test_input(), split.test_target),
        };
        let mut rng = session_rng(config.seed, &split.train_prefix.id);
        match sample_eval_candidates(&split.observed, target, num_tracks, config.num_negatives, &mut rng) {
            Ok(negatives) => cases.push(Case {
                input,
                target,
                negatives,
            }),
            Err(Error::PoolTooSmall { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }

    // (rank of target, sum of probe ranks, probe count) per case.
    let per_chunk: Vec<Result<Vec<(usize, f64, usize)>>> = cases
        .par_chunks(CHUNK)
        .map(|chunk| {
            let inputs: Vec<Vec<u32>> = chunk.iter().map(|c| c.input.clone()).collect();
            let candidates: Vec<Vec<u32>> = chunk
                .iter()
                .map(|c| std::iter::once(c.target).chain(c.negatives.iter().copied()).collect())
                .collect();
            let logits = scorer.score_batch(&inputs, &candidates)?;
            chunk
                .iter()
                .zip(&logits)
                .zip(&candidates)
                .map(|((case, logits), cands)| {
                    let rank = rank_target(logits[0], &logits[1..])?;
                    let (mut probe_sum, mut probe_n) = (0.0, 0);
                    if let Some(probe) = probe {
                        for (j, track) in cands.iter().enumerate().skip(1) {
                            if probe.contains(track) {
                                let others = logits
                                    .iter()
                                    .enumerate()
                                    .filter(|&(i, &l)| i != j && l >= logits[j])
                                    .count();
                                probe_sum += (1 + others) as f64;
                                probe_n += 1;
                            }
                        }
                    }
                    debug_assert_eq!(cands[0], case.target);
                    Ok((rank, probe_sum, probe_n))
                })
                .collect()
        })
        .collect();

    let mut hits = vec![0usize; config.ks.len()];
    let (mut probe_sum, mut probe_n, mut n) = (0.0, 0usize, 0usize);
    for chunk in per_chunk {
        for (rank, ps, pn) in chunk? {
            n += 1;
            for (h, &k) in hits.iter_mut().zip(&config.ks) {
                if rank <= k {
                    *h += 1;
                }
            }
            probe_sum += ps;
            probe_n += pn;
        }
    }
    let hr = config
        .ks
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| (k, if n == 0 { 0.0 } else { h as f64 / n as f64 }))
        .collect();
    Ok(EvalReport {
        hr,
        num_sessions: n,
        skipped_sessions: skipped,
        seed: config.seed,
        config: config.clone(),
        probe_mean_rank: probe.filter(|_| probe_n > 0).map(|_| probe_sum / probe_n as f64),
    })
}

/// Evaluates in-memory parameters.
pub fn evaluate_params(
    params: &ModelParams,
    splits: &[HoldoutSplit],
    config: &EvalConfig,
    probe: Option<&HashSet<u32>>,
) -> Result<EvalReport> {
    evaluate_scorer(&ModelScorer { params }, splits, params.num_tracks, config, probe)
}

/// Loads a checkpoint, checks it against the vocabulary and evaluates.
pub fn evaluate(
    checkpoint: &Path,
    splits: &[HoldoutSplit],
    vocab: &Vocabulary,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.header.num_tracks != vocab.num_tracks() {
        return Err(Error::VocabMismatch {
            checkpoint: ckpt.header.num_tracks,
            corpus: vocab.num_tracks(),
        });
    }
    if ckpt.header.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::Checkpoint(
            "vocabulary fingerprint differs from the checkpoint's".into(),
        ));
    }
    evaluate_params(&ckpt.params, splits, config, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{split_holdout, Session, FIRST_TRACK};
    use rand::Rng as _;

    fn splits(n: usize, num_tracks: u32) -> Vec<HoldoutSplit> {
        let mut rng = seed::rng(2, "eval-sessions");
        (0..n)
            .map(|i| {
                let len = rng.gen_range(3..=10);
                let tracks = (0..len).map(|_| FIRST_TRACK + rng.gen_range(0..num_tracks)).collect();
                split_holdout(&Session::new(format!("s{i}"), tracks, vec![0; len]).unwrap()).unwrap()
            })
            .collect()
    }

    struct Oracle;
    impl Scorer for Oracle {
        fn score(&self, _input: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
            // The harness places the target first.
            Ok((0..candidates.len()).map(|i| if i == 0 { 1e6 } else { 0.0 }).collect())
        }
    }

    struct Constant;
    impl Scorer for Constant {
        fn score(&self, _input: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![0.5; candidates.len()])
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(5.0, &[1.0, 2.0, 4.9]).unwrap(), 1);
        assert_eq!(rank_target(1.0, &vec![1.0; 1000]).unwrap(), 1001);
        // Greater than 990, equal to 4, less than 6.
        let mut negs = vec![0.0; 990];
        negs.extend([1.0; 4]);
        negs.extend([2.0; 6]);
        assert_eq!(rank_target(1.0, &negs).unwrap(), 11);
        assert!(rank_target(f64::NAN, &[0.0]).is_err());
        assert!(rank_target(0.0, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = seed::rng(5, "rank-oracle");
        for _ in 0..2000 {
            let n = rng.gen_range(1..50);
            // Coarse values force ties.
            let target = rng.gen_range(0..5) as f64;
            let negs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
            let mut all: Vec<(f64, usize)> = negs.iter().map(|&l| (l, 0)).collect();
            all.push((target, 1));
            // Descending by logit, target last among equals.
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let oracle = all.iter().position(|&(_, is_t)| is_t == 1).unwrap() + 1;
            assert_eq!(rank_target(target, &negs).unwrap(), oracle);
        }
    }

    #[test]
    fn candidate_sampling_contract() {
        let observed: BTreeSet<u32> = [FIRST_TRACK].into_iter().collect();
        let mut rng = seed::rng(1, "c");
        let negs = sample_eval_candidates(&observed, FIRST_TRACK, 1002, 1000, &mut rng).unwrap();
        assert_eq!(negs.len(), 1000);
        assert!(!negs.contains(&FIRST_TRACK));
        let distinct: BTreeSet<u32> = negs.iter().copied().collect();
        assert_eq!(distinct.len(), 1000);

        let a = sample_eval_candidates(&observed, 7, 3000, 1000, &mut session_rng(4, "x")).unwrap();
        let b = sample_eval_candidates(&observed, 7, 3000, 1000, &mut session_rng(4, "x")).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&7));

        let big: BTreeSet<u32> = (FIRST_TRACK..FIRST_TRACK + 10).collect();
        let err = sample_eval_candidates(&big, 99, 1005, 1000, &mut rng);
        assert!(matches!(err, Err(Error::PoolTooSmall { .. })));
    }

    #[test]
    fn oracle_scores_perfectly() {
        let s = splits(200, 2000);
        let report = evaluate_scorer(&Oracle, &s, 2000, &EvalConfig::default(), None).unwrap();
        assert!(report.hr.values().all(|&h| h == 1.0));
        assert_eq!(report.num_sessions, 200);
    }

    #[test]
    fn constant_scorer_ranks_last() {
        let s = splits(50, 2000);
        let report = evaluate_scorer(&Constant, &s, 2000, &EvalConfig::default(), None).unwrap();
        assert!(report.hr.values().all(|&h| h == 0.0));
    }

    #[test]
    fn small_pool_sessions_are_skipped() {
        let s = splits(20, 50);
        let cfg = EvalConfig {
            num_negatives: 45,
            ..Default::default()
        };
        let report = evaluate_scorer(&Oracle, &s, 50, &cfg, None).unwrap();
        assert_eq!(report.num_sessions + report.skipped_sessions, 20);
        assert!(report.skipped_sessions > 0);
    }

    #[test]
    fn config_validation() {
        let bad = EvalConfig {
            ks: vec![5, 1],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            num_negatives: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
