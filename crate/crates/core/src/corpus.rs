//! Session logs, the track vocabulary, skip-aware targets, holdout splits
//! and padded training batches.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved padding index.
pub const PAD: u32 = 0;
/// Reserved cloze mask index.
pub const MSK: u32 = 1;
/// First index assigned to a real track.
pub const FIRST_TRACK: u32 = 2;

/// Bijection between external track keys and dense indices `>= 2`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, u32>,
    track_of: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from keys listed in index order.
    pub fn from_keys<I, S>(keys: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for key in keys {
            let key = key.into();
            if vocab.id_of.contains_key(&key) {
                return Err(Error::Config(format!("duplicate track key {key:?}")));
            }
            vocab.insert(key);
        }
        Ok(vocab)
    }

    /// Returns the index of `key`, assigning the next free index if needed.
    pub fn insert(&mut self, key: impl Into<String>) -> u32 {
        let key = key.into();
        if let Some(&idx) = self.id_of.get(&key) {
            return idx;
        }
        let idx = FIRST_TRACK + self.track_of.len() as u32;
        self.id_of.insert(key.clone(), idx);
        self.track_of.push(key);
        idx
    }

    pub fn index_of(&self, key: &str) -> Option<u32> {
        self.id_of.get(key).copied()
    }

    pub fn key_of(&self, index: u32) -> Option<&str> {
        index
            .checked_sub(FIRST_TRACK)
            .and_then(|i| self.track_of.get(i as usize))
            .map(String::as_str)
    }

    /// Number of real tracks (PAD and MSK excluded).
    pub fn num_tracks(&self) -> usize {
        self.track_of.len()
    }

    /// Size of the embedding table: real tracks plus the two reserved rows.
    pub fn table_size(&self) -> usize {
        self.track_of.len() + FIRST_TRACK as usize
    }

    pub fn keys(&self) -> &[String] {
        &self.track_of
    }

    /// Iterator over all real track indices.
    pub fn track_indices(&self) -> impl Iterator<Item = u32> {
        FIRST_TRACK..FIRST_TRACK + self.track_of.len() as u32
    }

    /// SHA-256 over the keys in index order, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for key in &self.track_of {
            hasher.update(key.as_bytes());
            hasher.update(b"\n");
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            pad: PAD,
            msk: MSK,
            tracks: self.track_of.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        if file.pad != PAD || file.msk != MSK {
            return Err(Error::Config(
                "vocabulary file uses different reserved indices".into(),
            ));
        }
        Self::from_keys(file.tracks)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    pad: u32,
    msk: u32,
    tracks: Vec<String>,
}

/// One listening session: track indices and per-position skip strengths.
///
/// Skip strength 0 means the track was not skipped; 1 and 2 are the strong
/// skips that count as negative feedback; 3 ("played mostly") is positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    #[serde(rename = "session_id")]
    pub id: String,
    pub tracks: Vec<u32>,
    pub skips: Vec<u8>,
}

impl Session {
    pub fn new(id: impl Into<String>, tracks: Vec<u32>, skips: Vec<u8>) -> Result<Self> {
        let session = Self {
            id: id.into(),
            tracks,
            skips,
        };
        session.validate()?;
        Ok(session)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tracks.len() != self.skips.len() {
            return Err(Error::Config(format!(
                "session {}: {} tracks but {} skip labels",
                self.id,
                self.tracks.len(),
                self.skips.len()
            )));
        }
        if self.tracks.iter().any(|&t| t < FIRST_TRACK) {
            return Err(Error::Config(format!(
                "session {} contains a reserved index",
                self.id
            )));
        }
        if self.skips.iter().any(|&s| s > 3) {
            return Err(Error::Config(format!(
                "session {} has a skip strength above 3",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// First `n` positions as a new session with the same id.
    pub fn prefix(&self, n: usize) -> Session {
        Session {
            id: self.id.clone(),
            tracks: self.tracks[..n].to_vec(),
            skips: self.skips[..n].to_vec(),
        }
    }
}

/// True for skip strengths treated as negative feedback.
pub fn is_negative(skip: u8) -> bool {
    skip == 1 || skip == 2
}

/// Column names and delimiter of a session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub session_id: String,
    pub position: String,
    pub track: String,
    pub skip_1: String,
    pub skip_2: String,
    pub skip_3: String,
    pub delimiter: char,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            session_id: "session_id".into(),
            position: "session_position".into(),
            track: "track_id_clean".into(),
            skip_1: "skip_1".into(),
            skip_2: "skip_2".into(),
            skip_3: "skip_3".into(),
            delimiter: ',',
        }
    }
}

/// Session length bounds applied while parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthFilter {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for LengthFilter {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub rows: usize,
    pub sessions_seen: usize,
    pub sessions_kept: usize,
    pub dropped_short: usize,
    pub dropped_long: usize,
}

impl ParseStats {
    pub fn dropped(&self) -> usize {
        self.dropped_short + self.dropped_long
    }
}

#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub sessions: Vec<Session>,
    pub vocab: Vocabulary,
    pub stats: ParseStats,
}

fn parse_flag(raw: &str, line: usize, column: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "t" | "yes" => Ok(true),
        "false" | "0" | "f" | "no" | "" => Ok(false),
        other => Err(Error::Parse {
            line,
            message: format!("column {column}: expected a boolean, got {other:?}"),
        }),
    }
}

/// Skip strength from the three cumulative skip flags.
pub fn skip_strength(skip_1: bool, skip_2: bool, skip_3: bool) -> u8 {
    if skip_1 {
        1
    } else if skip_2 {
        2
    } else if skip_3 {
        3
    } else {
        0
    }
}

/// Parses a delimited session log.
///
/// Rows of one session may appear in any order; they are sorted by the
/// position column. Sessions outside `filter` are dropped and counted.
/// Vocabulary indices follow first appearance among kept sessions.
pub fn parse_session_log(
    path: &Path,
    mapping: &ColumnMapping,
    filter: LengthFilter,
) -> Result<ParsedCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_session_reader(file, mapping, filter)
}

pub fn parse_session_reader<R: std::io::Read>(
    reader: R,
    mapping: &ColumnMapping,
    filter: LengthFilter,
) -> Result<ParsedCorpus> {
    if !mapping.delimiter.is_ascii() {
        return Err(Error::Config("delimiter must be an ASCII character".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Parse {
            line: 1,
            message: "missing header row".into(),
        });
    }
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("unknown column name {name:?}")))
    };
    let c_session = column(&mapping.session_id)?;
    let c_pos = column(&mapping.position)?;
    let c_track = column(&mapping.track)?;
    let c_s1 = column(&mapping.skip_1)?;
    let c_s2 = column(&mapping.skip_2)?;
    let c_s3 = column(&mapping.skip_3)?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(i64, String, u8)>> = HashMap::new();
    let mut stats = ParseStats::default();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let session_id = field(c_session).trim().to_string();
        if session_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty session id".into(),
            });
        }
        let position: i64 = field(c_pos).trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid position {:?}", field(c_pos)),
        })?;
        let track = field(c_track).trim().to_string();
        if track.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty track key".into(),
            });
        }
        let skip = skip_strength(
            parse_flag(field(c_s1), line, &mapping.skip_1)?,
            parse_flag(field(c_s2), line, &mapping.skip_2)?,
            parse_flag(field(c_s3), line, &mapping.skip_3)?,
        );
        stats.rows += 1;
        let rows = groups.entry(session_id.clone()).or_insert_with(|| {
            order.push(session_id);
            Vec::new()
        });
        rows.push((position, track, skip));
    }

    stats.sessions_seen = order.len();
    let mut vocab = Vocabulary::new();
    let mut sessions = Vec::new();
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        if rows.len() < filter.min_len {
            stats.dropped_short += 1;
            continue;
        }
        if rows.len() > filter.max_len {
            stats.dropped_long += 1;
            continue;
        }
        rows.sort_by_key(|r| r.0);
        let (tracks, skips) = rows
            .into_iter()
            .map(|(_, key, skip)| (vocab.insert(key), skip))
            .unzip();
        sessions.push(Session { id, tracks, skips });
    }
    stats.sessions_kept = sessions.len();
    Ok(ParsedCorpus {
        sessions,
        vocab,
        stats,
    })
}

/// Writes sessions in the delimited log format read by [`parse_session_log`].
///
/// Skip flags are written cumulatively (a strength-1 skip also sets the
/// strength-2 and strength-3 flags).
pub fn write_session_log<W: Write>(
    writer: W,
    sessions: &[Session],
    vocab: &Vocabulary,
    mapping: &ColumnMapping,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(mapping.delimiter as u8)
        .from_writer(writer);
    let csv_err = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
    wtr.write_record([
        &mapping.session_id,
        &mapping.position,
        &mapping.track,
        &mapping.skip_1,
        &mapping.skip_2,
        &mapping.skip_3,
    ])
    .map_err(csv_err)?;
    for session in sessions {
        for (pos, (&track, &skip)) in session.tracks.iter().zip(&session.skips).enumerate() {
            let key = vocab
                .key_of(track)
                .ok_or_else(|| Error::Config(format!("track index {track} not in vocabulary")))?;
            let flag = |level: u8| if skip != 0 && skip <= level { "true" } else { "false" };
            wtr.write_record([
                session.id.as_str(),
                &(pos + 1).to_string(),
                key,
                flag(1),
                flag(2),
                flag(3),
            ])
            .map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<session log>", e))
}

/// Writes the normalized corpus cache: one JSON session record per line.
pub fn write_cache(path: &Path, sessions: &[Session]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for session in sessions {
        serde_json::to_writer(&mut out, session)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<Session>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sessions = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let session: Session = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        session.validate()?;
        sessions.push(session);
    }
    Ok(sessions)
}

/// Per-position supervision derived from skip labels.
///
/// Positions are 0-based indices into the session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetPlan {
    /// `tracks[i + 1]`, absent at the last position.
    pub next_item: Vec<Option<u32>>,
    /// Track at the first later non-negative position, if any.
    pub next_positive: Vec<Option<u32>>,
    /// Position of that next positive.
    pub next_positive_step: Vec<Option<usize>>,
    /// Tracks at negative positions (the session's negative set).
    pub negatives: Vec<u32>,
    /// Tracks at positive positions.
    pub positives: Vec<u32>,
    pub pos_steps: Vec<usize>,
    pub neg_steps: Vec<usize>,
}

pub fn derive_targets(session: &Session) -> TargetPlan {
    let n = session.len();
    let mut pos_steps = Vec::new();
    let mut neg_steps = Vec::new();
    for (i, &skip) in session.skips.iter().enumerate() {
        if is_negative(skip) {
            neg_steps.push(i);
        } else {
            pos_steps.push(i);
        }
    }

    let mut next_positive_step = vec![None; n];
    let mut upcoming = None;
    for i in (0..n).rev() {
        next_positive_step[i] = upcoming;
        if !is_negative(session.skips[i]) {
            upcoming = Some(i);
        }
    }
    let next_positive = next_positive_step
        .iter()
        .map(|s| s.map(|m| session.tracks[m]))
        .collect();
    let next_item = (0..n)
        .map(|i| session.tracks.get(i + 1).copied())
        .collect();

    TargetPlan {
        next_item,
        next_positive,
        next_positive_step,
        negatives: neg_steps.iter().map(|&i| session.tracks[i]).collect(),
        positives: pos_steps.iter().map(|&i| session.tracks[i]).collect(),
        pos_steps,
        neg_steps,
    }
}

/// Leave-last-two-out split of one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub train_prefix: Session,
    pub val_target: u32,
    pub test_target: u32,
    /// Every track index in the full session.
    pub observed: BTreeSet<u32>,
}

impl HoldoutSplit {
    /// Input tracks for the validation target.
    pub fn val_input(&self) -> &[u32] {
        &self.train_prefix.tracks
    }

    /// Input tracks for the test target (prefix plus the validation item).
    pub fn test_input(&self) -> Vec<u32> {
        let mut input = self.train_prefix.tracks.clone();
        input.push(self.val_target);
        input
    }
}

pub fn split_holdout(session: &Session) -> Result<HoldoutSplit> {
    let n = session.len();
    if n < 3 {
        return Err(Error::SessionTooShort { len: n, min: 3 });
    }
    Ok(HoldoutSplit {
        train_prefix: session.prefix(n - 2),
        val_target: session.tracks[n - 2],
        test_target: session.tracks[n - 1],
        observed: session.tracks.iter().copied().collect(),
    })
}

/// Splits every session, returning the splits and the number rejected.
pub fn split_all(sessions: &[Session]) -> (Vec<HoldoutSplit>, usize) {
    let mut rejected = 0;
    let splits = sessions
        .iter()
        .filter_map(|s| match split_holdout(s) {
            Ok(split) => Some(split),
            Err(_) => {
                rejected += 1;
                None
            }
        })
        .collect();
    (splits, rejected)
}

/// Draws `k` distinct real tracks uniformly, excluding `excluded`.
///
/// `num_tracks` is the number of real tracks; indices returned are in
/// `[FIRST_TRACK, FIRST_TRACK + num_tracks)`.
pub fn sample_excluding<R: rand::Rng + ?Sized>(
    num_tracks: usize,
    excluded: &BTreeSet<u32>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let blocked: Vec<usize> = excluded
        .iter()
        .filter(|&&t| t >= FIRST_TRACK && ((t - FIRST_TRACK) as usize) < num_tracks)
        .map(|&t| (t - FIRST_TRACK) as usize)
        .collect();
    let pool = num_tracks - blocked.len();
    if pool < k {
        return Err(Error::PoolTooSmall {
            available: pool,
            requested: k,
        });
    }
    let picks = rand::seq::index::sample(rng, pool, k);
    Ok(picks
        .into_iter()
        .map(|mut x| {
            // Map the rank within the complement back to a track offset.
            for &b in &blocked {
                if b <= x {
                    x += 1;
                } else {
                    break;
                }
            }
            FIRST_TRACK + x as u32
        })
        .collect())
}

/// A training row: a (prefix) session, its targets and the tracks that must
/// never be drawn as sampled negatives for it.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub session: Session,
    pub plan: TargetPlan,
    pub observed: BTreeSet<u32>,
}

impl TrainExample {
    pub fn new(session: Session) -> Self {
        let plan = derive_targets(&session);
        let observed = session.tracks.iter().copied().collect();
        Self {
            session,
            plan,
            observed,
        }
    }

    pub fn from_split(split: &HoldoutSplit) -> Self {
        let plan = derive_targets(&split.train_prefix);
        Self {
            session: split.train_prefix.clone(),
            plan,
            observed: split.observed.clone(),
        }
    }
}

/// Contrastive supervision at one position of a row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveTarget {
    pub position: usize,
    /// Track at the position itself (the embedding-mode context).
    pub anchor: u32,
    pub positive: u32,
    pub negatives: Vec<u32>,
}

/// Padded mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// B x max_len, right-padded with [`PAD`].
    pub tokens: Array2<u32>,
    pub lengths: Vec<usize>,
    /// True on real positions.
    pub pad_mask: Array2<bool>,
    /// Next-item targets, [`PAD`] where undefined.
    pub nll_targets: Array2<u32>,
    pub contrastive: Vec<Vec<ContrastiveTarget>>,
    pub sampled_negatives: Vec<Vec<u32>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn row_tokens(&self, b: usize) -> Vec<u32> {
        self.tokens.row(b).iter().take(self.lengths[b]).copied().collect()
    }
}

/// Contrastive targets of one example: every position with a later
/// positive, provided the session has at least one negative.
pub fn contrastive_targets(session: &Session, plan: &TargetPlan) -> Vec<ContrastiveTarget> {
    if plan.negatives.is_empty() {
        return Vec::new();
    }
    plan.next_positive
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            p.map(|positive| ContrastiveTarget {
                position: i,
                anchor: session.tracks[i],
                positive,
                negatives: plan.negatives.clone(),
            })
        })
        .collect()
}

/// Pads examples into batches of `batch_size` rows and draws `num_negatives`
/// fresh sampled-softmax negatives per row.
pub fn pad_and_batch<R: rand::Rng + ?Sized>(
    examples: &[TrainExample],
    batch_size: usize,
    max_len: usize,
    num_negatives: usize,
    num_tracks: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let longest = examples.iter().map(|e| e.observed.len()).max().unwrap_or(0);
    if num_tracks < num_negatives + longest {
        return Err(Error::Config(format!(
            "vocabulary of {num_tracks} tracks cannot supply {num_negatives} negatives \
             next to sessions of {longest} distinct tracks"
        )));
    }
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let b = chunk.len();
            let mut tokens = Array2::from_elem((b, max_len), PAD);
            let mut pad_mask = Array2::from_elem((b, max_len), false);
            let mut nll_targets = Array2::from_elem((b, max_len), PAD);
            let mut lengths = Vec::with_capacity(b);
            let mut contrastive = Vec::with_capacity(b);
            let mut sampled_negatives = Vec::with_capacity(b);
            for (row, ex) in chunk.iter().enumerate() {
                let n = ex.session.len();
                if n > max_len {
                    return Err(Error::Config(format!(
                        "session {} has {n} tracks, longer than max_len {max_len}",
                        ex.session.id
                    )));
                }
                for (i, &t) in ex.session.tracks.iter().enumerate() {
                    tokens[[row, i]] = t;
                    pad_mask[[row, i]] = true;
                    if let Some(next) = ex.plan.next_item[i] {
                        nll_targets[[row, i]] = next;
                    }
                }
                lengths.push(n);
                contrastive.push(contrastive_targets(&ex.session, &ex.plan));
                sampled_negatives.push(sample_excluding(
                    num_tracks,
                    &ex.observed,
                    num_negatives,
                    rng,
                )?);
            }
            Ok(Batch {
                tokens,
                lengths,
                pad_mask,
                nll_targets,
                contrastive,
                sampled_negatives,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn session(tracks: &[u32], skips: &[u8]) -> Session {
        Session::new("s", tracks.to_vec(), skips.to_vec()).unwrap()
    }

    fn parse(text: &str) -> Result<ParsedCorpus> {
        parse_session_reader(
            text.as_bytes(),
            &ColumnMapping::default(),
            LengthFilter::default(),
        )
    }

    const HEADER: &str = "session_id,session_position,track_id_clean,skip_1,skip_2,skip_3\n";

    #[test]
    fn short_session_is_dropped_and_counted() {
        let text = format!("{HEADER}s1,1,a,false,false,false\ns1,2,b,false,true,true\n");
        let parsed = parse(&text).unwrap();
        assert!(parsed.sessions.is_empty());
        assert_eq!(parsed.stats.dropped_short, 1);
        assert_eq!(parsed.stats.rows, 2);
    }

    #[test]
    fn skip_3_only_is_strength_3_and_positive() {
        let text = format!(
            "{HEADER}s1,1,a,false,false,false\ns1,2,b,false,false,true\ns1,3,c,false,true,true\n"
        );
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.sessions[0].skips, vec![0, 3, 2]);
        let plan = derive_targets(&parsed.sessions[0]);
        assert_eq!(plan.pos_steps, vec![0, 1]);
        assert_eq!(plan.neg_steps, vec![2]);
    }

    #[test]
    fn shared_track_key_maps_to_one_index() {
        let mut text = HEADER.to_string();
        for s in ["x", "y", "z"] {
            text += &format!("{s},1,shared,false,false,false\n");
            text += &format!("{s},2,{s}1,false,false,false\n");
            text += &format!("{s},3,{s}2,false,false,false\n");
        }
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.sessions.len(), 3);
        let idx = parsed.vocab.index_of("shared").unwrap();
        assert!(idx >= FIRST_TRACK);
        assert!(parsed.sessions.iter().all(|s| s.tracks[0] == idx));
        assert_eq!(parsed.vocab.num_tracks(), 7);
    }

    #[test]
    fn rows_are_ordered_by_position() {
        let text = format!(
            "{HEADER}s1,3,c,false,false,false\ns1,1,a,true,true,true\ns1,2,b,false,false,false\n"
        );
        let parsed = parse(&text).unwrap();
        let v = &parsed.vocab;
        assert_eq!(
            parsed.sessions[0].tracks,
            vec![v.index_of("a").unwrap(), v.index_of("b").unwrap(), v.index_of("c").unwrap()]
        );
        assert_eq!(parsed.sessions[0].skips, vec![1, 0, 0]);
    }

    #[test]
    fn long_sessions_are_dropped() {
        let mut text = HEADER.to_string();
        for i in 0..21 {
            text += &format!("s1,{i},t{i},false,false,false\n");
        }
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.stats.dropped_long, 1);
        assert_eq!(parsed.vocab.num_tracks(), 0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!("{HEADER}s1,1,a,false,false,false\ns1,oops,b,false,false,false\n");
        match parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let text = format!("{HEADER}s1,1,a,maybe,false,false\n");
        assert!(matches!(parse(&text), Err(Error::Parse { line: 2, .. })));
        let text = format!("{HEADER}s1,1,a,false\n");
        assert!(matches!(parse(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_column_is_config_error() {
        let mapping = ColumnMapping {
            track: "song".into(),
            ..Default::default()
        };
        let text = format!("{HEADER}s1,1,a,false,false,false\n");
        let err = parse_session_reader(text.as_bytes(), &mapping, LengthFilter::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn custom_delimiter_and_columns() {
        let mapping = ColumnMapping {
            session_id: "sid".into(),
            position: "pos".into(),
            track: "song".into(),
            skip_1: "a".into(),
            skip_2: "b".into(),
            skip_3: "c".into(),
            delimiter: '\t',
        };
        let text = "sid\tpos\tsong\ta\tb\tc\nq\t1\tx\t0\t0\t0\nq\t2\ty\t1\t1\t1\nq\t3\tz\t0\t0\t0\n";
        let parsed = parse_session_reader(text.as_bytes(), &mapping, LengthFilter::default())
            .unwrap();
        assert_eq!(parsed.sessions[0].skips, vec![0, 1, 0]);
    }

    #[test]
    fn derive_targets_skips_over_negatives() {
        let s = session(&[10, 11, 12, 13], &[0, 1, 1, 0]);
        let plan = derive_targets(&s);
        assert_eq!(plan.pos_steps, vec![0, 3]);
        assert_eq!(plan.neg_steps, vec![1, 2]);
        assert_eq!(plan.next_positive[0], Some(13));
        assert_eq!(plan.next_positive_step[0], Some(3));
        assert_eq!(plan.negatives, vec![11, 12]);
    }

    #[test]
    fn derive_targets_no_skips_collapses_to_next_item() {
        let s = session(&[10, 11, 12], &[0, 0, 0]);
        let plan = derive_targets(&s);
        assert!(plan.negatives.is_empty());
        for i in 0..2 {
            assert_eq!(plan.next_positive[i], plan.next_item[i]);
        }
        assert_eq!(plan.next_item[2], None);
    }

    #[test]
    fn derive_targets_no_later_positive() {
        let s = session(&[10, 11], &[0, 1]);
        let plan = derive_targets(&s);
        assert_eq!(plan.next_positive, vec![None, None]);
        let all_neg = session(&[10, 11, 12], &[1, 2, 1]);
        let plan = derive_targets(&all_neg);
        assert!(plan.pos_steps.is_empty());
        assert!(plan.next_positive.iter().all(Option::is_none));
    }

    #[test]
    fn holdout_split_shapes() {
        let s = session(&[10, 11, 12, 13], &[0, 0, 0, 0]);
        let split = split_holdout(&s).unwrap();
        assert_eq!(split.train_prefix.tracks, vec![10, 11]);
        assert_eq!(split.val_target, 12);
        assert_eq!(split.test_target, 13);
        assert_eq!(split.test_input(), vec![10, 11, 12]);

        let s = session(&[10, 11, 12], &[0, 1, 2]);
        let split = split_holdout(&s).unwrap();
        assert_eq!(split.train_prefix.tracks, vec![10]);
        assert_eq!((split.val_target, split.test_target), (11, 12));

        let s = session(&[10, 11], &[0, 0]);
        assert!(matches!(split_holdout(&s), Err(Error::SessionTooShort { len: 2, .. })));
        let (splits, rejected) = split_all(&[s, session(&[10, 11, 12], &[0, 0, 0])]);
        assert_eq!((splits.len(), rejected), (1, 1));
    }

    #[test]
    fn padding_layout() {
        let tracks: Vec<u32> = (2..14).collect();
        let ex = TrainExample::new(session(&tracks, &[0; 12]));
        let mut rng = seed::rng(1, "t");
        let batches = pad_and_batch(&[ex], 4, 20, 50, 100, &mut rng).unwrap();
        let b = &batches[0];
        assert_eq!(b.lengths, vec![12]);
        assert_eq!(b.tokens.row(0).iter().filter(|&&t| t == PAD).count(), 8);
        for i in 0..20 {
            assert_eq!(b.pad_mask[[0, i]], i < 12);
            assert_eq!(b.tokens[[0, i]] == PAD, i >= 12);
        }
        assert_eq!(b.nll_targets[[0, 0]], 3);
        assert_eq!(b.nll_targets[[0, 11]], PAD);
        assert_eq!(b.sampled_negatives[0].len(), 50);
        assert!(b.sampled_negatives[0].iter().all(|t| !tracks.contains(t)));
    }

    #[test]
    fn vocabulary_too_small_is_rejected() {
        let tracks: Vec<u32> = (2..12).collect();
        let ex = TrainExample::new(session(&tracks, &[0; 10]));
        let mut rng = seed::rng(1, "t");
        let err = pad_and_batch(&[ex], 4, 20, 1000, 1001, &mut rng);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn negatives_resampled_between_epochs() {
        // Expected overlap of two independent 1000-draws from a 1990-track
        // pool is 1000^2 / 1990 ~ 502.5; hypergeometric sd ~ 11.2.
        let tracks: Vec<u32> = (2..12).collect();
        let ex = TrainExample::new(session(&tracks, &[0; 10]));
        let mut rng = seed::rng(9, "negatives");
        let a = pad_and_batch(&[ex.clone()], 1, 20, 1000, 2000, &mut rng).unwrap();
        let b = pad_and_batch(&[ex], 1, 20, 1000, 2000, &mut rng).unwrap();
        let sa: BTreeSet<u32> = a[0].sampled_negatives[0].iter().copied().collect();
        let sb: BTreeSet<u32> = b[0].sampled_negatives[0].iter().copied().collect();
        assert_ne!(sa, sb);
        let overlap = sa.intersection(&sb).count() as f64;
        let expected = 1000.0 * 1000.0 / 1990.0;
        assert!((overlap - expected).abs() < 4.0 * 11.3, "overlap {overlap}");
    }

    #[test]
    fn sampling_is_uniform() {
        // T = 2000 real tracks, 10 excluded, 10^4 draws of 100 each:
        // per-track count ~ Binomial(10^4, 100/1990).
        let excluded: BTreeSet<u32> = (2..12).collect();
        let mut counts = vec![0usize; 2002];
        let mut rng = seed::rng(3, "uniformity");
        let draws = 10_000;
        for _ in 0..draws {
            for t in sample_excluding(2000, &excluded, 100, &mut rng).unwrap() {
                counts[t as usize] += 1;
            }
        }
        let p = 100.0 / 1990.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for t in 2..2002 {
            if t < 12 {
                assert_eq!(counts[t], 0);
            } else {
                let z = (counts[t] as f64 - mean) / sd;
                assert!(z.abs() < 4.0 + 0.6, "track {t} count {} z {z}", counts[t]);
            }
        }
        // The maximum over 1990 tracks is rarely above 4 sd; the aggregate is
        // tighter: chi-square / df close to 1.
        let chi2: f64 = (12..2002)
            .map(|t| (counts[t] as f64 - mean).powi(2) / (mean * (1.0 - p)))
            .sum();
        let df = 1989.0;
        assert!((chi2 - df).abs() < 4.0 * (2.0 * df).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn cache_and_vocab_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sessions = vec![session(&[2, 3, 4], &[0, 1, 3]), session(&[4, 5, 2], &[2, 0, 0])];
        let cache = dir.path().join("corpus.jsonl");
        write_cache(&cache, &sessions).unwrap();
        assert_eq!(read_cache(&cache).unwrap(), sessions);

        let vocab = Vocabulary::from_keys(["a", "b", "c", "d"]).unwrap();
        let path = dir.path().join("vocab.json");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }

    fn arb_corpus() -> impl Strategy<Value = (Vec<Session>, Vocabulary)> {
        let session = (3usize..=20).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u32..30, n),
                proptest::collection::vec(0u8..=3, n),
            )
        });
        proptest::collection::vec(session, 1..8).prop_map(|raw| {
            let vocab = Vocabulary::from_keys((0..30).map(|i| format!("track-{i}"))).unwrap();
            let sessions = raw
                .into_iter()
                .enumerate()
                .map(|(i, (tracks, skips))| Session {
                    id: format!("session-{i}"),
                    tracks: tracks.into_iter().map(|t| t + FIRST_TRACK).collect(),
                    skips,
                })
                .collect();
            (sessions, vocab)
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity((sessions, vocab) in arb_corpus()) {
            let mapping = ColumnMapping::default();
            let mut buf = Vec::new();
            write_session_log(&mut buf, &sessions, &vocab, &mapping).unwrap();
            let parsed = parse_session_reader(&buf[..], &mapping, LengthFilter::default()).unwrap();
            prop_assert_eq!(parsed.sessions.len(), sessions.len());
            for (a, b) in sessions.iter().zip(&parsed.sessions) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(&a.skips, &b.skips);
                let keys_a: Vec<_> = a.tracks.iter().map(|&t| vocab.key_of(t)).collect();
                let keys_b: Vec<_> = b.tracks.iter().map(|&t| parsed.vocab.key_of(t)).collect();
                prop_assert_eq!(keys_a, keys_b);
            }
        }

        #[test]
        fn plan_partitions_positions(skips in proptest::collection::vec(0u8..=3, 1..20)) {
            let tracks = (0..skips.len() as u32).map(|t| t + FIRST_TRACK).collect();
            let s = Session::new("p", tracks, skips).unwrap();
            let plan = derive_targets(&s);
            let mut all: Vec<usize> = plan.pos_steps.iter().chain(&plan.neg_steps).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
            for (i, step) in plan.next_positive_step.iter().enumerate() {
                if let Some(m) = step {
                    prop_assert!(*m > i);
                    prop_assert!(plan.pos_steps.contains(m));
                }
            }
        }
    }
}
