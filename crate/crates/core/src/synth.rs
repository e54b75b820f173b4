//! Synthetic session corpora with a planted Markov structure and planted
//! skips, plus reference scorers for them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_session_log, ColumnMapping, Session, Vocabulary, FIRST_TRACK};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_tracks: usize,
    pub num_sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of following the successor map.
    pub transition_sharpness: f64,
    /// Probability that a position is a planted skipped interruption.
    pub skip_rate: f64,
    /// Share of tracks reserved as interruptions.
    pub disliked_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tracks: 200,
            num_sessions: 5000,
            min_len: 10,
            max_len: 20,
            transition_sharpness: 0.9,
            skip_rate: 0.15,
            disliked_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("transition_sharpness", self.transition_sharpness),
            ("skip_rate", self.skip_rate),
            ("disliked_fraction", self.disliked_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Config("need 3 <= min_len <= max_len".into()));
        }
        let disliked = self.num_disliked();
        if self.num_tracks < disliked + 2 {
            return Err(Error::Config("too few tracks for a successor cycle".into()));
        }
        if self.skip_rate > 0.0 && disliked == 0 {
            return Err(Error::Config("skip_rate > 0 needs a disliked subset".into()));
        }
        Ok(())
    }

    pub fn num_disliked(&self) -> usize {
        (self.num_tracks as f64 * self.disliked_fraction).round() as usize
    }
}

/// A generated corpus and its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sessions: Vec<Session>,
    pub vocab: Vocabulary,
    /// Successor of every liked track (a single cycle).
    pub successor: BTreeMap<u32, u32>,
    pub disliked: Vec<u32>,
    /// Per session and position, the chain's next emitted (unskipped) track.
    pub planted_next_positive: Vec<Vec<Option<u32>>>,
}

/// Ground-truth sidecar written next to a synthetic log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub config: SynthConfig,
    pub successor: BTreeMap<String, String>,
    pub disliked: Vec<String>,
}

pub fn track_key(i: usize) -> String {
    format!("track_{i:05}")
}

/// Generates sessions following a random successor cycle over the liked
/// tracks. An interruption plays a disliked track with skip strength 1 or 2
/// and leaves the chain state untouched.
pub fn generate_markov_corpus(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let vocab = Vocabulary::from_keys((0..config.num_tracks).map(track_key))?;
    let mut tracks: Vec<u32> = vocab.track_indices().collect();
    tracks.shuffle(&mut seed::rng(config.seed, "synth-tracks"));
    let disliked: Vec<u32> = {
        let mut d = tracks[..config.num_disliked()].to_vec();
        d.sort_unstable();
        d
    };
    let liked = &tracks[config.num_disliked()..];
    let successor: BTreeMap<u32, u32> = liked
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, liked[(k + 1) % liked.len()]))
        .collect();

    let mut sessions = Vec::with_capacity(config.num_sessions);
    let mut planted = Vec::with_capacity(config.num_sessions);
    for s in 0..config.num_sessions {
        let mut rng = seed::indexed_rng(config.seed, "synth-session", s as u64);
        let len = rng.gen_range(config.min_len..=config.max_len);
        let mut state = liked[rng.gen_range(0..liked.len())];
        let mut started = false;
        let mut ids = Vec::with_capacity(len);
        let mut skips = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.gen::<f64>() < config.skip_rate {
                ids.push(disliked[rng.gen_range(0..disliked.len())]);
                skips.push(rng.gen_range(1..=2));
                continue;
            }
            if started {
                state = if rng.gen::<f64>() < config.transition_sharpness {
                    successor[&state]
                } else {
                    liked[rng.gen_range(0..liked.len())]
                };
            }
            started = true;
            ids.push(state);
            skips.push(0);
        }
        let mut next = vec![None; len];
        let mut upcoming = None;
        for i in (0..len).rev() {
            next[i] = upcoming;
            if skips[i] == 0 {
                upcoming = Some(ids[i]);
            }
        }
        planted.push(next);
        sessions.push(Session::new(format!("synth_{s:06}"), ids, skips)?);
    }
    Ok(SyntheticCorpus {
        sessions,
        vocab,
        successor,
        disliked,
        planted_next_positive: planted,
    })
}

impl SyntheticCorpus {
    pub fn sidecar(&self, config: &SynthConfig) -> SynthSidecar {
        let key = |t: u32| self.vocab.key_of(t).expect("generated track").to_string();
        SynthSidecar {
            config: config.clone(),
            successor: self.successor.iter().map(|(&a, &b)| (key(a), key(b))).collect(),
            disliked: self.disliked.iter().map(|&t| key(t)).collect(),
        }
    }

    /// Writes `sessions.csv` and `ground_truth.json` into `dir`.
    pub fn write(&self, dir: &Path, config: &SynthConfig, mapping: &ColumnMapping) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("sessions.csv");
        let file = File::create(&log).map_err(|e| Error::io(&log, e))?;
        write_session_log(BufWriter::new(file), &self.sessions, &self.vocab, mapping)?;
        let side = dir.join("ground_truth.json");
        let json = serde_json::to_string_pretty(&self.sidecar(config))?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    /// Scorer that knows the successor map.
    pub fn oracle(&self) -> SuccessorOracle {
        SuccessorOracle {
            successor: self.successor.clone(),
        }
    }
}

/// Scores the successor of the input's last liked track above everything
/// else.
#[derive(Debug, Clone)]
pub struct SuccessorOracle {
    pub successor: BTreeMap<u32, u32>,
}

impl Scorer for SuccessorOracle {
    fn score(&self, input: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        let next = input.iter().rev().find_map(|t| self.successor.get(t));
        Ok(candidates
            .iter()
            .map(|c| if Some(c) == next { 1.0 } else { 0.0 })
            .collect())
    }
}

/// Scores candidates by how often they occur in a corpus.
#[derive(Debug, Clone)]
pub struct PopularityScorer {
    counts: Vec<f64>,
}

impl PopularityScorer {
    pub fn count(&self, track: u32) -> f64 {
        self.counts.get(track as usize).copied().unwrap_or(0.0)
    }
}

impl Scorer for PopularityScorer {
    fn score(&self, _input: &[u32], candidates: &[u32]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&c| self.count(c)).collect())
    }
}

/// Global track frequencies of `sessions`.
pub fn popularity_baseline(sessions: &[Session], num_tracks: usize) -> PopularityScorer {
    let mut counts = vec![0.0; num_tracks + FIRST_TRACK as usize];
    for s in sessions {
        for &t in &s.tracks {
            if let Some(c) = counts.get_mut(t as usize) {
                *c += 1.0;
            }
        }
    }
    PopularityScorer { counts }
}
