//! Review-log ingestion, leave-one-out splitting, and synthetic data.
//!
//! Interactions arrive as TSV rows `user<TAB>item<TAB>category<TAB>timestamp`.
//! String keys are interned to dense ids in first-seen order. The split
//! builder produces, per user, one test positive (the final interaction,
//! predicted from everything before it) and one train positive per earlier
//! prefix, each paired with uniformly sampled negatives that replace the
//! target item. The synthetic generator plants a semantic-temporal pattern
//! whose ground truth is recoverable from the recorded parameters.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::stable_sigmoid;

/// One user-item event from the input log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: u32,
    pub item_id: u32,
    pub category_id: u32,
    pub timestamp: i64,
}

/// One labeled (behavior sequence, target) instance.
///
/// `history` is ordered oldest to newest and every history timestamp is at
/// most the target timestamp. Target-relative position `p` of the behavior at
/// index `i` (0-based) is `H - i`, so `p = 1` is the most recent behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub user_id: u32,
    pub history: Vec<Interaction>,
    pub target: Interaction,
    pub label: u8,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    /// Behavior at target-relative position `p` (1 = most recent), if the
    /// history reaches back that far.
    pub fn at_position(&self, p: usize) -> Option<&Interaction> {
        if p == 0 || p > self.history.len() {
            return None;
        }
        Some(&self.history[self.history.len() - p])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_samples: usize,
}

/// String keys interned to dense ids in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct Dictionary {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl Dictionary {
    pub fn intern(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, id: u32) -> Option<&str> {
        self.keys.get(id as usize).map(String::as_str)
    }
}

/// Interactions plus the dictionaries built while reading them.
#[derive(Debug, Default)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub users: Dictionary,
    pub items: Dictionary,
    pub categories: Dictionary,
    /// Category of each item, from its first occurrence.
    pub item_categories: Vec<u32>,
}

impl InteractionLog {
    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            n_users: self.users.len(),
            n_items: self.items.len(),
            n_categories: self.categories.len(),
            n_samples: self.interactions.len(),
        }
    }
}

/// Parses a TSV of `user<TAB>item<TAB>category<TAB>timestamp` rows.
/// Duplicate rows are kept; reviews may legitimately repeat.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut log = InteractionLog::default();
    let display = path.display().to_string();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: display.clone(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let timestamp: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("timestamp `{}` is not an integer", fields[3])))?;
        let user_id = log.users.intern(fields[0]);
        let item_id = log.items.intern(fields[1]);
        let category_id = log.categories.intern(fields[2]);
        if item_id as usize == log.item_categories.len() {
            log.item_categories.push(category_id);
        }
        log.interactions.push(Interaction {
            user_id,
            item_id,
            category_id,
            timestamp,
        });
    }
    Ok(log)
}

/// Train/test samples built by the leave-one-out protocol.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub stats: DatasetStats,
}

/// Splits interactions per user: the final interaction becomes the test
/// positive with everything before it as history; every earlier prefix of
/// length `k` predicts interaction `k+1` as a train positive. Each positive
/// is paired with `neg_per_pos` negatives whose target item is replaced by a
/// uniform random item (category following the item), resampled while it
/// equals the positive item. Histories keep the most recent `max_len`
/// behaviors. Users with fewer than `min_user_len` interactions are dropped.
pub fn build_leave_one_out(
    log: &InteractionLog,
    min_user_len: usize,
    max_len: usize,
    neg_per_pos: usize,
    seed: u64,
) -> Result<Dataset> {
    if log.interactions.is_empty() {
        return Err(Error::EmptyDataset("no interactions loaded".into()));
    }
    let n_items = log.items.len() as u32;
    if neg_per_pos > 0 && n_items < 2 {
        return Err(Error::EmptyDataset(
            "negative sampling needs at least 2 distinct items".into(),
        ));
    }
    if max_len == 0 {
        return Err(Error::EmptyDataset("max_len must be at least 1".into()));
    }

    let mut per_user: BTreeMap<u32, Vec<Interaction>> = BTreeMap::new();
    for it in &log.interactions {
        per_user.entry(it.user_id).or_default().push(*it);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    let mut eligible = 0usize;
    for (user_id, mut events) in per_user {
        if events.len() < min_user_len.max(2) {
            continue;
        }
        eligible += 1;
        // Stable sort: ties keep input order.
        events.sort_by_key(|e| e.timestamp);
        let n = events.len();
        for k in 1..n {
            let is_test = k == n - 1;
            let start = k.saturating_sub(max_len);
            let history = events[start..k].to_vec();
            let positive = Sample {
                user_id,
                history,
                target: events[k],
                label: 1,
            };
            let sink = if is_test { &mut ds.test } else { &mut ds.train };
            sink.push(positive.clone());
            for _ in 0..neg_per_pos {
                let mut item = rng.gen_range(0..n_items);
                while item == positive.target.item_id {
                    item = rng.gen_range(0..n_items);
                }
                let mut neg = positive.clone();
                neg.target.item_id = item;
                neg.target.category_id = log.item_categories[item as usize];
                neg.label = 0;
                sink.push(neg);
            }
        }
    }
    if eligible == 0 {
        return Err(Error::EmptyDataset(format!(
            "no user has at least {min_user_len} interactions"
        )));
    }
    ds.stats = DatasetStats {
        n_users: log.users.len(),
        n_items: log.items.len(),
        n_categories: log.categories.len(),
        n_samples: ds.train.len() + ds.test.len(),
    };
    Ok(ds)
}

/// Parameters of the synthetic generator.
///
/// Labels are drawn `Bernoulli(sigmoid(base_logit + match_boost *
/// sum_i 1[c_i = c_t] * gamma^p_i))` where `p_i` is the target-relative
/// position of behavior `i` (1 = most recent). The full parameter set is
/// written next to the generated samples so the planted ground truth stays
/// recoverable.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_categories: usize,
    /// Items per category; item id = category * items_per_category + offset.
    pub items_per_category: usize,
    pub h_min: usize,
    pub h_max: usize,
    /// Temporal decay of the planted pattern, in (0, 1].
    pub gamma: f64,
    /// Strength of the planted semantic match signal.
    pub match_boost: f64,
    pub base_logit: f64,
    pub train_targets_per_user: usize,
    pub test_targets_per_user: usize,
    /// Timestamp increments are uniform in `1..=ts_step_max` seconds.
    pub ts_step_max: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1000,
            n_categories: 5,
            items_per_category: 1,
            h_min: 10,
            h_max: 10,
            gamma: 0.7,
            match_boost: 3.0,
            base_logit: 0.0,
            train_targets_per_user: 3,
            test_targets_per_user: 2,
            ts_step_max: 86_400,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_categories == 0 || self.items_per_category == 0 {
            return Err(Error::EmptyDataset("synth: counts must be positive".into()));
        }
        if self.h_min == 0 || self.h_min > self.h_max {
            return Err(Error::EmptyDataset("synth: need 1 <= h_min <= h_max".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::EmptyDataset("synth: gamma must be in (0, 1]".into()));
        }
        if !self.match_boost.is_finite() || !self.base_logit.is_finite() {
            return Err(Error::EmptyDataset("synth: non-finite logit parameters".into()));
        }
        if self.train_targets_per_user + self.test_targets_per_user == 0 {
            return Err(Error::EmptyDataset("synth: no targets per user".into()));
        }
        if self.ts_step_max < 1 {
            return Err(Error::EmptyDataset("synth: ts_step_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_categories * self.items_per_category
    }
}

/// The planted label logit for a history/target category combination.
pub fn planted_logit(history_categories: &[u32], target_category: u32, cfg: &SynthConfig) -> f64 {
    let h = history_categories.len();
    let mut acc = 0.0;
    for (i, &c) in history_categories.iter().enumerate() {
        if c == target_category {
            let position = (h - i) as i32;
            acc += cfg.gamma.powi(position);
        }
    }
    cfg.base_logit + cfg.match_boost * acc
}

/// Generates a labeled dataset with the planted semantic-temporal pattern.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_cats = cfg.n_categories as u32;
    let per_cat = cfg.items_per_category as u32;
    let mut ds = Dataset::default();
    for user in 0..cfg.n_users as u32 {
        let h = rng.gen_range(cfg.h_min..=cfg.h_max);
        let mut ts = 1_000_000i64;
        let mut history = Vec::with_capacity(h);
        for _ in 0..h {
            ts += rng.gen_range(1..=cfg.ts_step_max);
            let category_id = rng.gen_range(0..n_cats);
            let item_id = category_id * per_cat + rng.gen_range(0..per_cat);
            history.push(Interaction {
                user_id: user,
                item_id,
                category_id,
                timestamp: ts,
            });
        }
        let history_cats: Vec<u32> = history.iter().map(|b| b.category_id).collect();
        let total = cfg.train_targets_per_user + cfg.test_targets_per_user;
        for t in 0..total {
            let category_id = rng.gen_range(0..n_cats);
            let item_id = category_id * per_cat + rng.gen_range(0..per_cat);
            let target_ts = ts + rng.gen_range(1..=cfg.ts_step_max);
            let p = stable_sigmoid(planted_logit(&history_cats, category_id, cfg));
            let label = u8::from(rng.gen::<f64>() < p);
            let sample = Sample {
                user_id: user,
                history: history.clone(),
                target: Interaction {
                    user_id: user,
                    item_id,
                    category_id,
                    timestamp: target_ts,
                },
                label,
            };
            if t < cfg.train_targets_per_user {
                ds.train.push(sample);
            } else {
                ds.test.push(sample);
            }
        }
    }
    ds.stats = DatasetStats {
        n_users: cfg.n_users,
        n_items: cfg.n_items(),
        n_categories: cfg.n_categories,
        n_samples: ds.train.len() + ds.test.len(),
    };
    Ok(ds)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn behavior_field(it: &Interaction) -> String {
    format!("{}:{}:{}", it.item_id, it.category_id, it.timestamp)
}

fn parse_behavior(field: &str, user_id: u32, path: &str, line: usize) -> Result<Interaction> {
    let parts: Vec<&str> = field.split(':').collect();
    let err = |msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    if parts.len() != 3 {
        return Err(err(format!("behavior `{field}` is not item:cat:ts")));
    }
    Ok(Interaction {
        user_id,
        item_id: parts[0]
            .parse()
            .map_err(|_| err(format!("bad item id `{}`", parts[0])))?,
        category_id: parts[1]
            .parse()
            .map_err(|_| err(format!("bad category id `{}`", parts[1])))?,
        timestamp: parts[2]
            .parse()
            .map_err(|_| err(format!("bad timestamp `{}`", parts[2])))?,
    })
}

/// Writes samples as `label<TAB>H<TAB>item:cat:ts,...<TAB>item:cat:ts` lines,
/// with user ids in a `.users` sidecar (one per line, same order) since GAUC
/// needs the grouping.
pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut users = BufWriter::new(fs::File::create(users_sidecar(path))?);
    for s in samples {
        let mut line = String::new();
        write!(line, "{}\t{}\t", s.label, s.history.len()).unwrap();
        for (i, b) in s.history.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&behavior_field(b));
        }
        write!(line, "\t{}", behavior_field(&s.target)).unwrap();
        writeln!(w, "{line}")?;
        writeln!(users, "{}", s.user_id)?;
    }
    w.flush()?;
    users.flush()?;
    Ok(())
}

fn users_sidecar(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".users");
    p.into()
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let display = path.display().to_string();
    let lines = BufReader::new(fs::File::open(path)?).lines();
    let user_path = users_sidecar(path);
    let users: Vec<u32> = if user_path.exists() {
        BufReader::new(fs::File::open(&user_path)?)
            .lines()
            .enumerate()
            .map(|(i, l)| {
                l.map_err(Error::from).and_then(|l| {
                    l.parse().map_err(|_| Error::Parse {
                        path: user_path.display().to_string(),
                        line: i + 1,
                        msg: format!("bad user id `{l}`"),
                    })
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let err = |msg: String| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let label: u8 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad label `{}`", fields[0])))?;
        if label > 1 {
            return Err(err(format!("label must be 0 or 1, got {label}")));
        }
        let h: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("bad length `{}`", fields[1])))?;
        let user_id = users.get(samples.len()).copied().unwrap_or(0);
        let history: Vec<Interaction> = fields[2]
            .split(',')
            .filter(|f| !f.is_empty())
            .map(|f| parse_behavior(f, user_id, &display, lineno))
            .collect::<Result<_>>()?;
        if history.len() != h {
            return Err(err(format!(
                "declared H={h} but found {} behaviors",
                history.len()
            )));
        }
        if history.is_empty() {
            return Err(err("sample has empty history".into()));
        }
        let target = parse_behavior(fields[3], user_id, &display, lineno)?;
        samples.push(Sample {
            user_id,
            history,
            target,
            label,
        });
    }
    Ok(samples)
}

/// Writes a dictionary as `key<TAB>id` lines in id order.
pub fn write_dictionary(path: &Path, dict: &Dictionary) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, key) in dict.keys.iter().enumerate() {
        writeln!(w, "{key}\t{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stats(path: &Path, stats: &DatasetStats) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "n_users = {}", stats.n_users)?;
    writeln!(w, "n_items = {}", stats.n_items)?;
    writeln!(w, "n_categories = {}", stats.n_categories)?;
    writeln!(w, "n_samples = {}", stats.n_samples)?;
    w.flush()?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<DatasetStats> {
    let mut stats = DatasetStats::default();
    let display = path.display().to_string();
    for (idx, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg: "expected `key = value`".into(),
        })?;
        let count: usize = value.trim().parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg: format!("bad count `{}`", value.trim()),
        })?;
        match key.trim() {
            "n_users" => stats.n_users = count,
            "n_items" => stats.n_items = count,
            "n_categories" => stats.n_categories = count,
            "n_samples" => stats.n_samples = count,
            other => {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: idx + 1,
                    msg: format!("unknown stats key `{other}`"),
                })
            }
        }
    }
    Ok(stats)
}

/// Standard file names inside a prepared data directory.
pub mod layout {
    pub const TRAIN: &str = "train_samples.tsv";
    pub const TEST: &str = "test_samples.tsv";
    pub const STATS: &str = "stats.txt";
    pub const USER_DICT: &str = "users.dict";
    pub const ITEM_DICT: &str = "items.dict";
    pub const CATEGORY_DICT: &str = "categories.dict";
    pub const SYNTH_PARAMS: &str = "synth_params.txt";
}

/// Writes train/test samples and stats into `dir` using the standard layout.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_samples(&dir.join(layout::TRAIN), &ds.train)?;
    write_samples(&dir.join(layout::TEST), &ds.test)?;
    write_stats(&dir.join(layout::STATS), &ds.stats)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let train = read_samples(&dir.join(layout::TRAIN))?;
    let test = read_samples(&dir.join(layout::TEST))?;
    let stats = read_stats(&dir.join(layout::STATS))?;
    Ok(Dataset { train, test, stats })
}

/// Records generator parameters next to the samples so the planted ground
/// truth stays recoverable.
pub fn write_synth_params(path: &Path, cfg: &SynthConfig) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "n_users = {}", cfg.n_users)?;
    writeln!(w, "n_categories = {}", cfg.n_categories)?;
    writeln!(w, "items_per_category = {}", cfg.items_per_category)?;
    writeln!(w, "h_min = {}", cfg.h_min)?;
    writeln!(w, "h_max = {}", cfg.h_max)?;
    writeln!(w, "gamma = {}", cfg.gamma)?;
    writeln!(w, "match_boost = {}", cfg.match_boost)?;
    writeln!(w, "base_logit = {}", cfg.base_logit)?;
    writeln!(w, "train_targets_per_user = {}", cfg.train_targets_per_user)?;
    writeln!(w, "test_targets_per_user = {}", cfg.test_targets_per_user)?;
    writeln!(w, "ts_step_max = {}", cfg.ts_step_max)?;
    writeln!(w, "seed = {}", cfg.seed)?;
    w.flush()?;
    Ok(())
}
