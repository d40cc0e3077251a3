//! Embedding tables and temporal encoders.
//!
//! A behavior's final representation is its semantic embedding (category and
//! item embeddings concatenated) plus a temporal-bucket embedding chosen by
//! the encoder. Two encoders are target-aware — by relative position (TTE-P)
//! and by binned time interval (TTE-T) — and map the target itself to bucket
//! 0, the origin. Chronological order encoding (COE) is the target-agnostic
//! baseline. Encoders are immutable after fitting; lookups are read-only.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::tensor::Dense;

/// Id-to-vector table. Rows are initialized uniform in (-0.01, 0.01).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    name: &'static str,
    weights: Dense,
}

impl EmbeddingTable {
    pub fn init(name: &'static str, n_ids: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = (0..n_ids * dim).map(|_| rng.gen_range(-0.01..0.01)).collect();
        EmbeddingTable {
            name,
            weights: Dense::from_vec(n_ids, dim, data).expect("sized by construction"),
        }
    }

    pub fn from_weights(name: &'static str, weights: Dense) -> Self {
        EmbeddingTable { name, weights }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn n_ids(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        if id >= self.n_ids() {
            return Err(Error::Lookup {
                table: self.name,
                id,
                n_ids: self.n_ids(),
            });
        }
        Ok(self.weights.row(id))
    }

    /// Row as a 1xdim matrix, for use as a tape leaf.
    pub fn row_dense(&self, id: usize) -> Result<Dense> {
        Ok(Dense::row_vector(self.row(id)?.to_vec()))
    }

    pub fn weights(&self) -> &Dense {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Dense {
        &mut self.weights
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    TteP,
    TteT,
    Coe,
    None,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::TteP => "tte-p",
            EncoderKind::TteT => "tte-t",
            EncoderKind::Coe => "coe",
            EncoderKind::None => "none",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tte-p" => Ok(EncoderKind::TteP),
            "tte-t" => Ok(EncoderKind::TteT),
            "coe" => Ok(EncoderKind::Coe),
            "none" => Ok(EncoderKind::None),
            other => Err(Error::Config(format!("unknown encoder `{other}`"))),
        }
    }
}

/// Maps a behavior (or the target) to a temporal bucket id.
#[derive(Clone, Debug, PartialEq)]
pub enum TemporalEncoder {
    /// Target-relative position H-i+1; the target is bucket 0.
    TteP { n_buckets: usize },
    /// Time interval to the target, equal-frequency binned into
    /// `bin_edges.len() + 1` buckets numbered from 1; the target is bucket 0.
    TteT { bin_edges: Vec<f64> },
    /// Chronological index i; the target sits one past the newest behavior.
    Coe { n_buckets: usize },
    None,
}

impl TemporalEncoder {
    /// Position encoder with buckets 0..=max_len (0 reserved for the target).
    pub fn tte_p(max_len: usize) -> Self {
        TemporalEncoder::TteP {
            n_buckets: max_len + 1,
        }
    }

    /// Chronological encoder covering indices 1..=max_len plus the target
    /// slot at max_len+1.
    pub fn coe(max_len: usize) -> Self {
        TemporalEncoder::Coe {
            n_buckets: max_len + 2,
        }
    }

    pub fn tte_t(bin_edges: Vec<f64>) -> Result<Self> {
        if bin_edges.is_empty() {
            return Err(Error::Binning("no bin edges".into()));
        }
        if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Binning("bin edges must be strictly increasing".into()));
        }
        Ok(TemporalEncoder::TteT { bin_edges })
    }

    /// Fits an encoder of the requested kind. `time_buckets` applies to
    /// TTE-T only and `samples` is consulted only for TTE-T edge fitting.
    pub fn fit(
        kind: EncoderKind,
        samples: &[Sample],
        max_len: usize,
        time_buckets: usize,
    ) -> Result<Self> {
        match kind {
            EncoderKind::TteP => Ok(TemporalEncoder::tte_p(max_len)),
            EncoderKind::Coe => Ok(TemporalEncoder::coe(max_len)),
            EncoderKind::TteT => TemporalEncoder::tte_t(fit_tte_t_bins(samples, time_buckets)?),
            EncoderKind::None => Ok(TemporalEncoder::None),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            TemporalEncoder::TteP { .. } => EncoderKind::TteP,
            TemporalEncoder::TteT { .. } => EncoderKind::TteT,
            TemporalEncoder::Coe { .. } => EncoderKind::Coe,
            TemporalEncoder::None => EncoderKind::None,
        }
    }

    /// Number of distinct bucket ids this encoder can emit.
    pub fn vocab_size(&self) -> usize {
        match self {
            TemporalEncoder::TteP { n_buckets } | TemporalEncoder::Coe { n_buckets } => *n_buckets,
            TemporalEncoder::TteT { bin_edges } => bin_edges.len() + 2,
            TemporalEncoder::None => 0,
        }
    }

    /// Bucket of the `i`-th behavior, `i` counted 1..=H oldest to newest.
    pub fn behavior_bucket(&self, sample: &Sample, i: usize) -> Result<usize> {
        let h = sample.len();
        if i == 0 || i > h {
            return Err(Error::Lookup {
                table: "behavior index",
                id: i,
                n_ids: h + 1,
            });
        }
        Ok(match self {
            TemporalEncoder::TteP { n_buckets } => (h - i + 1).min(n_buckets - 1),
            TemporalEncoder::Coe { n_buckets } => i.min(n_buckets - 1),
            TemporalEncoder::TteT { bin_edges } => {
                let tau = (sample.target.timestamp - sample.history[i - 1].timestamp) as f64;
                1 + bin_edges.partition_point(|e| *e < tau)
            }
            TemporalEncoder::None => 0,
        })
    }

    /// Bucket of the target: the origin (0) for the target-aware encoders;
    /// for COE the slot just past the newest behavior.
    pub fn target_bucket(&self, sample: &Sample) -> usize {
        match self {
            TemporalEncoder::TteP { .. } | TemporalEncoder::TteT { .. } | TemporalEncoder::None => 0,
            TemporalEncoder::Coe { n_buckets } => (sample.len() + 1).min(n_buckets - 1),
        }
    }

    pub fn bin_edges(&self) -> Option<&[f64]> {
        match self {
            TemporalEncoder::TteT { bin_edges } => Some(bin_edges),
            _ => None,
        }
    }
}

/// Equal-frequency bin edges over the positive time intervals
/// `tau = TS_target - TS_behavior` of the training behaviors. Edge `k` is the
/// (k/n_buckets)-quantile of the empirical distribution; intervals at or
/// below an edge fall in the lower bucket.
pub fn fit_tte_t_bins(train: &[Sample], n_buckets: usize) -> Result<Vec<f64>> {
    if n_buckets < 2 {
        return Err(Error::Binning("need at least 2 buckets".into()));
    }
    let mut taus: Vec<i64> = train
        .iter()
        .flat_map(|s| {
            s.history
                .iter()
                .map(move |b| s.target.timestamp - b.timestamp)
        })
        .filter(|t| *t > 0)
        .collect();
    taus.sort_unstable();
    let mut distinct = 0usize;
    let mut prev = None;
    for t in &taus {
        if prev != Some(*t) {
            distinct += 1;
            prev = Some(*t);
        }
    }
    if distinct < n_buckets {
        return Err(Error::Binning(format!(
            "only {distinct} distinct positive intervals for {n_buckets} buckets; use fewer buckets"
        )));
    }
    let n = taus.len();
    let mut edges = Vec::with_capacity(n_buckets - 1);
    for k in 1..n_buckets {
        let idx = (k * n).div_ceil(n_buckets) - 1;
        edges.push(taus[idx] as f64);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Binning(
            "duplicate quantile edges; intervals too concentrated, use fewer buckets".into(),
        ));
    }
    Ok(edges)
}

/// Concatenation of category and item embeddings: a 1x(d_cat+d_item) vector.
pub fn semantic_embed(
    x: &crate::dataio::Interaction,
    cat_table: &EmbeddingTable,
    item_table: &EmbeddingTable,
) -> Result<Dense> {
    let mut data = Vec::with_capacity(cat_table.dim() + item_table.dim());
    data.extend_from_slice(cat_table.row(x.category_id as usize)?);
    data.extend_from_slice(item_table.row(x.item_id as usize)?);
    Ok(Dense::row_vector(data))
}

fn add_temporal(
    mut semantic: Dense,
    bucket: usize,
    temporal: Option<&EmbeddingTable>,
) -> Result<Dense> {
    let Some(table) = temporal else {
        return Ok(semantic);
    };
    if table.dim() != semantic.cols() {
        return Err(Error::dimension(
            "encode_behavior",
            format!("temporal dim {} vs semantic dim {}", table.dim(), semantic.cols()),
        ));
    }
    let row = table.row(bucket)?;
    for (v, p) in semantic.as_mut_slice().iter_mut().zip(row) {
        *v += p;
    }
    Ok(semantic)
}

/// Behavior representation `e_i + p_{f(X_i)}`; with no temporal table the
/// semantic embedding passes through unchanged.
pub fn encode_behavior(
    sample: &Sample,
    i: usize,
    cat_table: &EmbeddingTable,
    item_table: &EmbeddingTable,
    temporal: Option<&EmbeddingTable>,
    encoder: &TemporalEncoder,
) -> Result<Dense> {
    let semantic = semantic_embed(&sample.history[i - 1], cat_table, item_table)?;
    let bucket = encoder.behavior_bucket(sample, i)?;
    add_temporal(semantic, bucket, temporal)
}

/// Target representation `v_t + p_{f(X_t)}`, built the same way as behaviors.
pub fn encode_target(
    sample: &Sample,
    cat_table: &EmbeddingTable,
    item_table: &EmbeddingTable,
    temporal: Option<&EmbeddingTable>,
    encoder: &TemporalEncoder,
) -> Result<Dense> {
    let semantic = semantic_embed(&sample.target, cat_table, item_table)?;
    let bucket = encoder.target_bucket(sample);
    add_temporal(semantic, bucket, temporal)
}
