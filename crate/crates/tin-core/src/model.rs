//! The model family: target attention, target-aware representation, and
//! temporal encoding in every ablation the evaluation compares.
//!
//! Each variant is a point in the three-bit component code (temporal
//! information, target-aware attention, target-aware representation). The
//! attention-and-product family pools second-order per-behavior values
//! `e~_i ⊙ v~_t`; the average/DIN lineage pools first-order behavior vectors
//! and leaves the product to the prediction head. Forward passes record onto
//! a [`Tape`], so every parameter that a sample touches gets an exact
//! gradient.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Sample;
use crate::encoding::{EmbeddingTable, EncoderKind, TemporalEncoder};
use crate::error::{Error, Result};
use crate::tensor::{stable_sigmoid, Dense, Tape, VarId};

/// Prediction probabilities are clamped into the open unit interval.
pub const PROB_CLAMP: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Tin,
    TinWoTte,
    TinWoTa,
    TinWoTr,
    Din,
    DinPrime,
    AvgConcat,
    AvgProduct,
    DinSplit,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Tin,
        Variant::TinWoTte,
        Variant::TinWoTa,
        Variant::TinWoTr,
        Variant::Din,
        Variant::DinPrime,
        Variant::AvgConcat,
        Variant::AvgProduct,
        Variant::DinSplit,
    ];

    /// Three-bit component code (temporal information, target-aware
    /// attention, target-aware representation).
    pub fn code(self) -> (bool, bool, bool) {
        match self {
            Variant::Tin => (true, true, true),
            Variant::TinWoTte => (false, true, true),
            Variant::TinWoTa => (true, false, true),
            Variant::TinWoTr => (true, true, false),
            Variant::Din => (false, true, true),
            Variant::DinPrime => (false, true, false),
            Variant::AvgConcat => (false, false, false),
            Variant::AvgProduct => (false, false, true),
            Variant::DinSplit => (false, true, true),
        }
    }

    pub fn code_string(self) -> String {
        let (ti, ta, tr) = self.code();
        format!("{}{}{}", u8::from(ti), u8::from(ta), u8::from(tr))
    }

    /// Whether the variant carries a temporal encoder.
    pub fn uses_temporal(self) -> bool {
        self.code().0
    }

    pub fn uses_attention(self) -> bool {
        self.code().1
    }

    /// Second-order pooling: the per-behavior value is `e~_i ⊙ v~_t` rather
    /// than the behavior vector itself.
    fn second_order_values(self) -> bool {
        matches!(self, Variant::Tin | Variant::TinWoTte | Variant::TinWoTa)
    }

    /// Whether the prediction head receives the explicit `u ⊙ v~_t` term.
    fn head_product(self) -> bool {
        matches!(
            self,
            Variant::Tin
                | Variant::TinWoTte
                | Variant::TinWoTa
                | Variant::Din
                | Variant::AvgProduct
                | Variant::DinSplit
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Tin => "tin",
            Variant::TinWoTte => "tin-wo-tte",
            Variant::TinWoTa => "tin-wo-ta",
            Variant::TinWoTr => "tin-wo-tr",
            Variant::Din => "din",
            Variant::DinPrime => "din-prime",
            Variant::AvgConcat => "avg-concat",
            Variant::AvgProduct => "avg-product",
            Variant::DinSplit => "din-split",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tin" => Ok(Variant::Tin),
            "tin-wo-tte" => Ok(Variant::TinWoTte),
            "tin-wo-ta" => Ok(Variant::TinWoTa),
            "tin-wo-tr" => Ok(Variant::TinWoTr),
            "din" => Ok(Variant::Din),
            "din-prime" => Ok(Variant::DinPrime),
            "avg-concat" => Ok(Variant::AvgConcat),
            "avg-product" => Ok(Variant::AvgProduct),
            "din-split" => Ok(Variant::DinSplit),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Dimensions and component selection for one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub encoder: EncoderKind,
    pub n_categories: usize,
    pub n_items: usize,
    pub d_cat: usize,
    pub d_item: usize,
    pub mlp_hidden: Vec<usize>,
    pub max_len: usize,
    /// Number of interval buckets when the encoder is TTE-T.
    pub time_buckets: usize,
    /// Attention-space embedding width, din-split only (0 disables attention).
    pub d_ta: usize,
    /// Representation-space embedding width, din-split only.
    pub d_tr: usize,
}

impl ModelSpec {
    /// Width of a behavior vector as the attention/representation spaces see
    /// it: `d_cat + d_item`, or `d_tr` in the split model.
    pub fn d_model(&self) -> usize {
        if self.variant == Variant::DinSplit {
            self.d_tr
        } else {
            self.d_cat + self.d_item
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.n_items == 0 {
            return Err(Error::InvalidSpec("empty id space".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidSpec("max_len must be at least 1".into()));
        }
        if self.variant == Variant::DinSplit {
            if self.d_tr == 0 {
                return Err(Error::InvalidSpec(
                    "din-split needs d_tr >= 1 (d_ta may be 0 to disable attention)".into(),
                ));
            }
            if self.encoder != EncoderKind::None {
                return Err(Error::InvalidSpec("din-split takes no temporal encoder".into()));
            }
        } else if self.d_cat + self.d_item == 0 {
            return Err(Error::InvalidSpec("d_cat + d_item must be at least 1".into()));
        }
        let wants_encoder = self.variant.uses_temporal();
        let has_encoder = self.encoder != EncoderKind::None;
        if wants_encoder && !has_encoder {
            return Err(Error::InvalidSpec(format!(
                "variant {} requires a temporal encoder",
                self.variant
            )));
        }
        if !wants_encoder && has_encoder {
            return Err(Error::InvalidSpec(format!(
                "variant {} does not use a temporal encoder",
                self.variant
            )));
        }
        Ok(())
    }

    fn mlp_input_dim(&self) -> usize {
        let d = self.d_model();
        if self.variant.head_product() {
            3 * d
        } else {
            2 * d
        }
    }
}

/// Identifies an embedding table inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableId {
    Cat,
    Item,
    Temporal,
    TaCat,
    TaItem,
    TrCat,
    TrItem,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tables {
    Unified {
        cat: EmbeddingTable,
        item: EmbeddingTable,
        temporal: Option<EmbeddingTable>,
    },
    Split {
        ta_cat: EmbeddingTable,
        ta_item: EmbeddingTable,
        tr_cat: EmbeddingTable,
        tr_item: EmbeddingTable,
    },
}

impl Tables {
    pub fn get(&self, id: TableId) -> Option<&EmbeddingTable> {
        match (self, id) {
            (Tables::Unified { cat, .. }, TableId::Cat) => Some(cat),
            (Tables::Unified { item, .. }, TableId::Item) => Some(item),
            (Tables::Unified { temporal, .. }, TableId::Temporal) => temporal.as_ref(),
            (Tables::Split { ta_cat, .. }, TableId::TaCat) => Some(ta_cat),
            (Tables::Split { ta_item, .. }, TableId::TaItem) => Some(ta_item),
            (Tables::Split { tr_cat, .. }, TableId::TrCat) => Some(tr_cat),
            (Tables::Split { tr_item, .. }, TableId::TrItem) => Some(tr_item),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, id: TableId) -> Option<&mut EmbeddingTable> {
        match (self, id) {
            (Tables::Unified { cat, .. }, TableId::Cat) => Some(cat),
            (Tables::Unified { item, .. }, TableId::Item) => Some(item),
            (Tables::Unified { temporal, .. }, TableId::Temporal) => temporal.as_mut(),
            (Tables::Split { ta_cat, .. }, TableId::TaCat) => Some(ta_cat),
            (Tables::Split { ta_item, .. }, TableId::TaItem) => Some(ta_item),
            (Tables::Split { tr_cat, .. }, TableId::TrCat) => Some(tr_cat),
            (Tables::Split { tr_item, .. }, TableId::TrItem) => Some(tr_item),
            _ => None,
        }
    }

    pub fn ids(&self) -> Vec<TableId> {
        match self {
            Tables::Unified { temporal, .. } => {
                let mut ids = vec![TableId::Cat, TableId::Item];
                if temporal.is_some() {
                    ids.push(TableId::Temporal);
                }
                ids
            }
            Tables::Split { .. } => vec![
                TableId::TaCat,
                TableId::TaItem,
                TableId::TrCat,
                TableId::TrItem,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Dense,
    pub b: Dense,
}

/// Pooled interest with the per-behavior quantities kept for analysis.
#[derive(Clone, Debug)]
pub struct TimOutput {
    /// Pooled interest vector, 1 x d_model.
    pub u: Dense,
    /// Attention weights; exactly 1/H per behavior when attention is off.
    pub alpha: Vec<f64>,
    /// Scaled attention logits; absent when attention is off.
    pub z: Option<Vec<f64>>,
    /// L2 norms of the per-behavior pooled values.
    pub value_norms: Vec<f64>,
}

/// One behavior's contribution to the learned correlation: `e^z * ||r||_2`,
/// with `e^z` fixed to 1 for attention-free variants.
#[derive(Clone, Copy, Debug)]
pub struct CtcTerm {
    pub z: Option<f64>,
    pub rep_norm: f64,
}

impl CtcTerm {
    pub fn correlation(&self) -> f64 {
        self.z.map_or(1.0, f64::exp) * self.rep_norm
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub encoder: TemporalEncoder,
    pub tables: Tables,
    pub mlp: Vec<Layer>,
}

/// Per-sample gradients: touched embedding rows plus dense MLP gradients.
#[derive(Clone, Debug)]
pub struct SampleGrads {
    pub rows: Vec<(TableId, usize, Vec<f64>)>,
    pub mlp: Vec<(Dense, Dense)>,
}

struct BuiltGraph {
    tape: Tape,
    logit: VarId,
    loss: Option<VarId>,
    u: VarId,
    alpha: Vec<f64>,
    z: Option<Vec<f64>>,
    value_rows: Vec<VarId>,
    e_tilde: Vec<VarId>,
    v_tilde: VarId,
    bindings: Vec<(TableId, usize, VarId)>,
    mlp_vars: Vec<(VarId, VarId)>,
}

impl Model {
    /// Builds a model with seeded initialization: embeddings uniform in
    /// (-0.01, 0.01), MLP weights uniform Glorot, biases zero.
    pub fn init(spec: ModelSpec, encoder: TemporalEncoder, seed: u64) -> Result<Model> {
        spec.validate()?;
        if encoder.kind() != spec.encoder {
            return Err(Error::InvalidSpec(format!(
                "spec asks for encoder {}, got {}",
                spec.encoder,
                encoder.kind()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = if spec.variant == Variant::DinSplit {
            let (ta_cat, ta_item) = split_dims(spec.d_ta);
            let (tr_cat, tr_item) = split_dims(spec.d_tr);
            Tables::Split {
                ta_cat: EmbeddingTable::init("ta_cat", spec.n_categories, ta_cat, &mut rng),
                ta_item: EmbeddingTable::init("ta_item", spec.n_items, ta_item, &mut rng),
                tr_cat: EmbeddingTable::init("tr_cat", spec.n_categories, tr_cat, &mut rng),
                tr_item: EmbeddingTable::init("tr_item", spec.n_items, tr_item, &mut rng),
            }
        } else {
            let d = spec.d_cat + spec.d_item;
            let temporal = if spec.variant.uses_temporal() {
                Some(EmbeddingTable::init(
                    "temporal",
                    encoder.vocab_size(),
                    d,
                    &mut rng,
                ))
            } else {
                None
            };
            Tables::Unified {
                cat: EmbeddingTable::init("cat", spec.n_categories, spec.d_cat, &mut rng),
                item: EmbeddingTable::init("item", spec.n_items, spec.d_item, &mut rng),
                temporal,
            }
        };
        let mut dims = vec![spec.mlp_input_dim()];
        dims.extend_from_slice(&spec.mlp_hidden);
        dims.push(1);
        let mut mlp = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            mlp.push(Layer {
                w: Dense::from_vec(fan_in, fan_out, data).expect("sized by construction"),
                b: Dense::zeros(1, fan_out),
            });
        }
        Ok(Model {
            spec,
            encoder,
            tables,
            mlp,
        })
    }

    /// Assembles a model from explicit parts (checkpoint load, tied-table
    /// experiments). Shapes are validated against the spec.
    pub fn from_parts(
        spec: ModelSpec,
        encoder: TemporalEncoder,
        tables: Tables,
        mlp: Vec<Layer>,
    ) -> Result<Model> {
        spec.validate()?;
        let model = Model {
            spec,
            encoder,
            tables,
            mlp,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match (&self.tables, self.spec.variant) {
            (Tables::Split { ta_cat, ta_item, tr_cat, tr_item }, Variant::DinSplit) => {
                if ta_cat.dim() + ta_item.dim() != self.spec.d_ta {
                    return bad("attention-space dims do not sum to d_ta".into());
                }
                if tr_cat.dim() + tr_item.dim() != self.spec.d_tr {
                    return bad("representation-space dims do not sum to d_tr".into());
                }
            }
            (Tables::Unified { cat, item, temporal }, v) if v != Variant::DinSplit => {
                if cat.dim() != self.spec.d_cat || item.dim() != self.spec.d_item {
                    return bad("embedding dims disagree with spec".into());
                }
                match (temporal, self.spec.variant.uses_temporal()) {
                    (Some(t), true) => {
                        if t.dim() != self.spec.d_cat + self.spec.d_item {
                            return bad("temporal dim must equal d_cat + d_item".into());
                        }
                    }
                    (None, false) => {}
                    _ => return bad("temporal table presence disagrees with variant".into()),
                }
            }
            _ => return bad("table layout disagrees with variant".into()),
        }
        let mut expect = self.spec.mlp_input_dim();
        for (i, layer) in self.mlp.iter().enumerate() {
            if layer.w.rows() != expect || layer.b.cols() != layer.w.cols() {
                return bad(format!("mlp layer {i} shape mismatch"));
            }
            expect = layer.w.cols();
        }
        if expect != 1 {
            return bad("mlp must end in a single logit".into());
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        for id in self.tables.ids() {
            let t = self.tables.get(id).unwrap();
            n += t.n_ids() * t.dim();
        }
        for l in &self.mlp {
            n += l.w.rows() * l.w.cols() + l.b.cols();
        }
        n
    }

    // -- forward graph -----------------------------------------------------

    fn lookup(
        &self,
        tape: &mut Tape,
        cache: &mut HashMap<(TableId, usize), VarId>,
        bindings: &mut Vec<(TableId, usize, VarId)>,
        table: TableId,
        row: usize,
    ) -> Result<VarId> {
        if let Some(&var) = cache.get(&(table, row)) {
            return Ok(var);
        }
        let t = self
            .tables
            .get(table)
            .ok_or_else(|| Error::InvalidSpec(format!("model has no {table:?} table")))?;
        let var = tape.leaf(t.row_dense(row)?);
        cache.insert((table, row), var);
        bindings.push((table, row, var));
        Ok(var)
    }

    /// Semantic embedding of an interaction on the tape: `[c(x), it(x)]` in
    /// the requested embedding space.
    fn embed_on_tape(
        &self,
        tape: &mut Tape,
        cache: &mut HashMap<(TableId, usize), VarId>,
        bindings: &mut Vec<(TableId, usize, VarId)>,
        space: (TableId, TableId),
        x: &crate::dataio::Interaction,
    ) -> Result<VarId> {
        let cat = self.lookup(tape, cache, bindings, space.0, x.category_id as usize)?;
        let item = self.lookup(tape, cache, bindings, space.1, x.item_id as usize)?;
        // A zero-width table contributes nothing; skip it so concat stays legal.
        let cat_w = self.tables.get(space.0).unwrap().dim();
        let item_w = self.tables.get(space.1).unwrap().dim();
        match (cat_w, item_w) {
            (0, _) => Ok(item),
            (_, 0) => Ok(cat),
            _ => tape.concat_cols(&[cat, item]),
        }
    }

    fn build(&self, sample: &Sample, with_loss: bool) -> Result<BuiltGraph> {
        let h = sample.len();
        if h == 0 {
            return Err(Error::EmptySequence("model forward"));
        }
        let mut tape = Tape::new();
        let mut cache = HashMap::new();
        let mut bindings = Vec::new();
        let v = self.spec.variant;

        // Behavior and target vectors in the pooling space, temporally
        // encoded when the variant calls for it.
        let (e_tilde, v_tilde, att_keys, att_query, att_scale) = if v == Variant::DinSplit {
            let tr_space = (TableId::TrCat, TableId::TrItem);
            let e: Vec<VarId> = sample
                .history
                .iter()
                .map(|b| self.embed_on_tape(&mut tape, &mut cache, &mut bindings, tr_space, b))
                .collect::<Result<_>>()?;
            let vt = self.embed_on_tape(&mut tape, &mut cache, &mut bindings, tr_space, &sample.target)?;
            if self.spec.d_ta > 0 {
                let ta_space = (TableId::TaCat, TableId::TaItem);
                let ka: Vec<VarId> = sample
                    .history
                    .iter()
                    .map(|b| self.embed_on_tape(&mut tape, &mut cache, &mut bindings, ta_space, b))
                    .collect::<Result<_>>()?;
                let qa = self.embed_on_tape(&mut tape, &mut cache, &mut bindings, ta_space, &sample.target)?;
                let scale = 1.0 / (self.spec.d_ta as f64).sqrt();
                (e, vt, Some(ka), Some(qa), scale)
            } else {
                (e, vt, None, None, 0.0)
            }
        } else {
            let space = (TableId::Cat, TableId::Item);
            let temporal = v.uses_temporal();
            let mut e = Vec::with_capacity(h);
            for (idx, b) in sample.history.iter().enumerate() {
                let sem = self.embed_on_tape(&mut tape, &mut cache, &mut bindings, space, b)?;
                let enc = if temporal {
                    let bucket = self.encoder.behavior_bucket(sample, idx + 1)?;
                    let p = self.lookup(&mut tape, &mut cache, &mut bindings, TableId::Temporal, bucket)?;
                    tape.add_broadcast(sem, p)?
                } else {
                    sem
                };
                e.push(enc);
            }
            let sem_t = self.embed_on_tape(&mut tape, &mut cache, &mut bindings, space, &sample.target)?;
            let vt = if temporal {
                let bucket = self.encoder.target_bucket(sample);
                let p = self.lookup(&mut tape, &mut cache, &mut bindings, TableId::Temporal, bucket)?;
                tape.add_broadcast(sem_t, p)?
            } else {
                sem_t
            };
            let scale = 1.0 / (self.spec.d_model() as f64).sqrt();
            let (keys, query) = if v.uses_attention() {
                (Some(e.clone()), Some(vt))
            } else {
                (None, None)
            };
            (e, vt, keys, query, scale)
        };

        // Attention weights.
        let (alpha_var, z) = if let (Some(keys), Some(query)) = (att_keys, att_query) {
            let stacked = tape.stack_rows(&keys)?;
            let alpha = tape.scaled_dot_softmax(stacked, query, att_scale)?;
            let z: Vec<f64> = keys
                .iter()
                .map(|&k| {
                    att_scale
                        * crate::tensor::dot(tape.value(query).row(0), tape.value(k).row(0))
                })
                .collect();
            (alpha, Some(z))
        } else {
            let uniform = Dense::row_vector(vec![1.0 / h as f64; h]);
            (tape.leaf(uniform), None)
        };

        // Per-behavior values and the pooled interest u = sum_i alpha_i v_i.
        let value_rows: Vec<VarId> = if v.second_order_values() {
            e_tilde
                .iter()
                .map(|&e| tape.hadamard(e, v_tilde))
                .collect::<Result<_>>()?
        } else {
            e_tilde.clone()
        };
        let stacked_values = tape.stack_rows(&value_rows)?;
        let u = tape.matmul(alpha_var, stacked_values)?;

        // Prediction head.
        let x = if v.head_product() {
            let prod = tape.hadamard(u, v_tilde)?;
            tape.concat_cols(&[u, v_tilde, prod])?
        } else {
            tape.concat_cols(&[u, v_tilde])?
        };
        let mut mlp_vars = Vec::with_capacity(self.mlp.len());
        let mut layer_pairs = Vec::with_capacity(self.mlp.len());
        for layer in &self.mlp {
            let w = tape.leaf(layer.w.clone());
            let b = tape.leaf(layer.b.clone());
            mlp_vars.push((w, b));
            layer_pairs.push((w, b));
        }
        let logit = tape.mlp_forward(x, &layer_pairs)?;
        let loss = if with_loss {
            Some(tape.sigmoid_xent(logit, sample.label)?)
        } else {
            None
        };

        let alpha = tape.value(alpha_var).as_slice().to_vec();
        Ok(BuiltGraph {
            tape,
            logit,
            loss,
            u,
            alpha,
            z,
            value_rows,
            e_tilde,
            v_tilde,
            bindings,
            mlp_vars,
        })
    }

    /// Predicted probability, clamped into the open unit interval.
    pub fn predict(&self, sample: &Sample) -> Result<f64> {
        let g = self.build(sample, false)?;
        let logit = g.tape.value(g.logit).item();
        if !logit.is_finite() {
            return Err(Error::Numeric("non-finite logit in predict".into()));
        }
        Ok(stable_sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    }

    /// Cross-entropy loss and per-parameter gradients for one sample.
    pub fn forward_backward(&self, sample: &Sample) -> Result<(f64, SampleGrads)> {
        let mut g = self.build(sample, true)?;
        let loss_var = g.loss.expect("built with loss");
        g.tape.backward(loss_var)?;
        let loss = g.tape.value(loss_var).item();
        let rows = g
            .bindings
            .iter()
            .map(|&(table, row, var)| (table, row, g.tape.grad(var).as_slice().to_vec()))
            .collect();
        let mlp = g
            .mlp_vars
            .iter()
            .map(|&(w, b)| (g.tape.grad(w).clone(), g.tape.grad(b).clone()))
            .collect();
        Ok((loss, SampleGrads { rows, mlp }))
    }

    /// Pooled interest plus attention weights, logits, and value norms.
    pub fn tim_forward(&self, sample: &Sample) -> Result<TimOutput> {
        let g = self.build(sample, false)?;
        let value_norms = g
            .value_rows
            .iter()
            .map(|&v| l2_norm(g.tape.value(v).as_slice()))
            .collect();
        Ok(TimOutput {
            u: g.tape.value(g.u).clone(),
            alpha: g.alpha,
            z: g.z,
            value_norms,
        })
    }

    /// Per-behavior learned-correlation terms.
    ///
    /// The attention factor is `e^z` with the scaled logit
    /// `z = <e~_i, v~_t> / sqrt(d)`; the representation factor is the L2 norm
    /// of the variant's representation. Variants outside the measured set are
    /// rejected.
    pub fn extract_learned_ctc_terms(&self, sample: &Sample) -> Result<Vec<CtcTerm>> {
        match self.spec.variant {
            Variant::Tin | Variant::TinWoTte | Variant::TinWoTa | Variant::TinWoTr | Variant::Din => {}
            other => return Err(Error::UnsupportedVariant(other.to_string())),
        }
        let g = self.build(sample, false)?;
        let vt = g.tape.value(g.v_tilde).row(0);
        let scale = 1.0 / (self.spec.d_model() as f64).sqrt();
        let mut terms = Vec::with_capacity(g.e_tilde.len());
        for &ev in &g.e_tilde {
            let e = g.tape.value(ev).row(0);
            let z = if self.spec.variant == Variant::TinWoTa {
                None
            } else {
                Some(scale * crate::tensor::dot(e, vt))
            };
            let rep_norm = if self.spec.variant == Variant::TinWoTr {
                l2_norm(e)
            } else {
                let prod: Vec<f64> = e.iter().zip(vt).map(|(a, b)| a * b).collect();
                l2_norm(&prod)
            };
            terms.push(CtcTerm { z, rep_norm });
        }
        Ok(terms)
    }

    // -- flat parameter view (gradient checking, tests) ---------------------

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for id in self.tables.ids() {
            out.extend_from_slice(self.tables.get(id).unwrap().weights().as_slice());
        }
        for l in &self.mlp {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out
    }

    pub fn load_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::InvalidSpec(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let mut off = 0;
        for id in self.tables.ids() {
            let t = self.tables.get_mut(id).unwrap();
            let n = t.n_ids() * t.dim();
            t.weights_mut().as_mut_slice().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        for l in &mut self.mlp {
            let nw = l.w.rows() * l.w.cols();
            l.w.as_mut_slice().copy_from_slice(&theta[off..off + nw]);
            off += nw;
            let nb = l.b.cols();
            l.b.as_mut_slice().copy_from_slice(&theta[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Loss and flat gradient vector aligned with [`Model::flat_params`].
    pub fn flat_loss_grads(&self, sample: &Sample) -> Result<(f64, Vec<f64>)> {
        let (loss, grads) = self.forward_backward(sample)?;
        let mut flat = vec![0.0; self.n_params()];
        let mut table_offsets = HashMap::new();
        let mut off = 0;
        for id in self.tables.ids() {
            table_offsets.insert(id, off);
            let t = self.tables.get(id).unwrap();
            off += t.n_ids() * t.dim();
        }
        for (table, row, grad) in &grads.rows {
            let t = self.tables.get(*table).unwrap();
            let start = table_offsets[table] + row * t.dim();
            for (i, g) in grad.iter().enumerate() {
                flat[start + i] += g;
            }
        }
        for (layer, (dw, db)) in self.mlp.iter().zip(&grads.mlp) {
            let nw = layer.w.rows() * layer.w.cols();
            flat[off..off + nw].copy_from_slice(dw.as_slice());
            off += nw;
            let nb = layer.b.cols();
            flat[off..off + nb].copy_from_slice(db.as_slice());
            off += nb;
        }
        Ok((loss, flat))
    }

    // -- checkpoint io -------------------------------------------------------

    /// Writes the model as a versioned line-oriented text checkpoint. Floats
    /// use shortest round-trip formatting, so a fixed seed reproduces the
    /// file byte for byte.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "tin-checkpoint v1")?;
        writeln!(w, "variant {}", self.spec.variant)?;
        writeln!(w, "encoder {}", self.spec.encoder)?;
        writeln!(w, "n_categories {}", self.spec.n_categories)?;
        writeln!(w, "n_items {}", self.spec.n_items)?;
        writeln!(w, "d_cat {}", self.spec.d_cat)?;
        writeln!(w, "d_item {}", self.spec.d_item)?;
        writeln!(w, "max_len {}", self.spec.max_len)?;
        writeln!(w, "time_buckets {}", self.spec.time_buckets)?;
        writeln!(w, "d_ta {}", self.spec.d_ta)?;
        writeln!(w, "d_tr {}", self.spec.d_tr)?;
        let hidden: Vec<String> = self.spec.mlp_hidden.iter().map(|d| d.to_string()).collect();
        writeln!(w, "mlp_hidden {}", if hidden.is_empty() { "-".into() } else { hidden.join(",") })?;
        match self.encoder.bin_edges() {
            Some(edges) => {
                let parts: Vec<String> = edges.iter().map(|e| e.to_string()).collect();
                writeln!(w, "bin_edges {}", parts.join(","))?;
            }
            None => writeln!(w, "bin_edges -")?,
        }
        for id in self.tables.ids() {
            let t = self.tables.get(id).unwrap();
            writeln!(w, "table {} {} {}", table_tag(id), t.n_ids(), t.dim())?;
            write_matrix(&mut w, t.weights())?;
        }
        for (i, layer) in self.mlp.iter().enumerate() {
            writeln!(w, "mlp {} w {} {}", i, layer.w.rows(), layer.w.cols())?;
            write_matrix(&mut w, &layer.w)?;
            writeln!(w, "mlp {} b 1 {}", i, layer.b.cols())?;
            write_matrix(&mut w, &layer.b)?;
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))
        };
        let header = next()?;
        if header != "tin-checkpoint v1" {
            return Err(Error::Checkpoint(format!("unrecognized header `{header}`")));
        }
        let mut fields: HashMap<String, String> = HashMap::new();
        let mut pending: Option<String> = None;
        for _ in 0..13 {
            let line = next()?;
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
            if key == "table" || key == "mlp" {
                pending = Some(line.clone());
                break;
            }
            fields.insert(key.to_string(), value.to_string());
        }
        let get = |k: &str| -> Result<String> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing field `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad integer for `{k}`")))
        };
        let variant: Variant = get("variant")?.parse()?;
        let encoder_kind: EncoderKind = get("encoder")?.parse()?;
        let mlp_hidden_raw = get("mlp_hidden")?;
        let mlp_hidden: Vec<usize> = if mlp_hidden_raw == "-" {
            Vec::new()
        } else {
            mlp_hidden_raw
                .split(',')
                .map(|p| p.parse().map_err(|_| Error::Checkpoint("bad mlp_hidden".into())))
                .collect::<Result<_>>()?
        };
        let spec = ModelSpec {
            variant,
            encoder: encoder_kind,
            n_categories: parse_usize("n_categories")?,
            n_items: parse_usize("n_items")?,
            d_cat: parse_usize("d_cat")?,
            d_item: parse_usize("d_item")?,
            mlp_hidden,
            max_len: parse_usize("max_len")?,
            time_buckets: parse_usize("time_buckets")?,
            d_ta: parse_usize("d_ta")?,
            d_tr: parse_usize("d_tr")?,
        };
        let edges_raw = get("bin_edges")?;
        let encoder = match encoder_kind {
            EncoderKind::TteT => {
                let edges: Vec<f64> = edges_raw
                    .split(',')
                    .map(|p| p.parse().map_err(|_| Error::Checkpoint("bad bin edge".into())))
                    .collect::<Result<_>>()?;
                TemporalEncoder::tte_t(edges)?
            }
            EncoderKind::TteP => TemporalEncoder::tte_p(spec.max_len),
            EncoderKind::Coe => TemporalEncoder::coe(spec.max_len),
            EncoderKind::None => TemporalEncoder::None,
        };

        let mut tables_by_tag: HashMap<String, EmbeddingTable> = HashMap::new();
        let mut mlp_parts: Vec<(usize, char, Dense)> = Vec::new();
        let mut line = match pending {
            Some(l) => l,
            None => next()?,
        };
        loop {
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["table", tag, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| Error::Checkpoint("bad table rows".into()))?;
                    let cols: usize = cols.parse().map_err(|_| Error::Checkpoint("bad table cols".into()))?;
                    let m = read_matrix(&mut next, rows, cols)?;
                    tables_by_tag.insert(tag.to_string(), EmbeddingTable::from_weights(tag_name(tag)?, m));
                }
                ["mlp", idx, which, rows, cols] => {
                    let idx: usize = idx.parse().map_err(|_| Error::Checkpoint("bad mlp index".into()))?;
                    let rows: usize = rows.parse().map_err(|_| Error::Checkpoint("bad mlp rows".into()))?;
                    let cols: usize = cols.parse().map_err(|_| Error::Checkpoint("bad mlp cols".into()))?;
                    let m = read_matrix(&mut next, rows, cols)?;
                    let which = which.chars().next().unwrap_or('?');
                    mlp_parts.push((idx, which, m));
                }
                _ => return Err(Error::Checkpoint(format!("unexpected line `{line}`"))),
            }
            line = next()?;
        }

        let mut take = |tag: &str| -> Result<EmbeddingTable> {
            tables_by_tag
                .remove(tag)
                .ok_or_else(|| Error::Checkpoint(format!("missing table `{tag}`")))
        };
        let tables = if variant == Variant::DinSplit {
            Tables::Split {
                ta_cat: take("ta_cat")?,
                ta_item: take("ta_item")?,
                tr_cat: take("tr_cat")?,
                tr_item: take("tr_item")?,
            }
        } else {
            Tables::Unified {
                cat: take("cat")?,
                item: take("item")?,
                temporal: if variant.uses_temporal() {
                    Some(take("temporal")?)
                } else {
                    None
                },
            }
        };
        let n_layers = mlp_parts.iter().map(|(i, _, _)| i + 1).max().unwrap_or(0);
        let mut mlp = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let w = mlp_parts
                .iter()
                .find(|(idx, which, _)| *idx == i && *which == 'w')
                .map(|(_, _, m)| m.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing mlp {i} weights")))?;
            let b = mlp_parts
                .iter()
                .find(|(idx, which, _)| *idx == i && *which == 'b')
                .map(|(_, _, m)| m.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing mlp {i} bias")))?;
            mlp.push(Layer { w, b });
        }
        Model::from_parts(spec, encoder, tables, mlp)
    }
}

fn split_dims(total: usize) -> (usize, usize) {
    (total.div_ceil(2), total / 2)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn table_tag(id: TableId) -> &'static str {
    match id {
        TableId::Cat => "cat",
        TableId::Item => "item",
        TableId::Temporal => "temporal",
        TableId::TaCat => "ta_cat",
        TableId::TaItem => "ta_item",
        TableId::TrCat => "tr_cat",
        TableId::TrItem => "tr_item",
    }
}

fn tag_name(tag: &str) -> Result<&'static str> {
    Ok(match tag {
        "cat" => "cat",
        "item" => "item",
        "temporal" => "temporal",
        "ta_cat" => "ta_cat",
        "ta_item" => "ta_item",
        "tr_cat" => "tr_cat",
        "tr_item" => "tr_item",
        other => return Err(Error::Checkpoint(format!("unknown table tag `{other}`"))),
    })
}

fn write_matrix(w: &mut impl Write, m: &Dense) -> Result<()> {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

fn read_matrix(next: &mut impl FnMut() -> Result<String>, rows: usize, cols: usize) -> Result<Dense> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = next()?;
        for part in line.split(' ') {
            let v: f64 = part
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad float `{part}`")))?;
            data.push(v);
        }
    }
    Dense::from_vec(rows, cols, data)
        .map_err(|_| Error::Checkpoint("matrix data does not match declared shape".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Interaction;
    use crate::tensor::grad_check;

    fn toy_sample(history_cats: &[u32], target_cat: u32, label: u8) -> Sample {
        let history = history_cats
            .iter()
            .enumerate()
            .map(|(k, &c)| Interaction {
                user_id: 0,
                item_id: c, // one item per category keeps toy data small
                category_id: c,
                timestamp: 100 + k as i64 * 10,
            })
            .collect::<Vec<_>>();
        let target_ts = 100 + history_cats.len() as i64 * 10;
        Sample {
            user_id: 0,
            history,
            target: Interaction {
                user_id: 0,
                item_id: target_cat,
                category_id: target_cat,
                timestamp: target_ts,
            },
            label,
        }
    }

    fn toy_spec(variant: Variant) -> ModelSpec {
        let encoder = if variant.uses_temporal() {
            EncoderKind::TteP
        } else {
            EncoderKind::None
        };
        ModelSpec {
            variant,
            encoder,
            n_categories: 4,
            n_items: 4,
            d_cat: 2,
            d_item: 2,
            mlp_hidden: vec![5, 3],
            max_len: 8,
            time_buckets: 4,
            d_ta: if variant == Variant::DinSplit { 4 } else { 0 },
            d_tr: if variant == Variant::DinSplit { 4 } else { 0 },
        }
    }

    fn toy_model(variant: Variant, seed: u64) -> Model {
        let spec = toy_spec(variant);
        let encoder = match spec.encoder {
            EncoderKind::TteP => TemporalEncoder::tte_p(spec.max_len),
            EncoderKind::None => TemporalEncoder::None,
            _ => unreachable!(),
        };
        Model::init(spec, encoder, seed).unwrap()
    }

    #[test]
    fn component_codes_match_the_summary() {
        assert_eq!(Variant::Tin.code(), (true, true, true));
        assert_eq!(Variant::Din.code(), (false, true, true));
        assert_eq!(Variant::TinWoTa.code(), (true, false, true));
        assert_eq!(Variant::TinWoTr.code(), (true, true, false));
        assert_eq!(Variant::DinPrime.code(), (false, true, false));
        assert_eq!(Variant::AvgConcat.code(), (false, false, false));
        assert_eq!(Variant::AvgProduct.code(), (false, false, true));
        assert_eq!(Variant::Tin.code_string(), "111");
    }

    #[test]
    fn singleton_history_pools_to_the_product() {
        let model = toy_model(Variant::Tin, 3);
        let s = toy_sample(&[1], 2, 1);
        let out = model.tim_forward(&s).unwrap();
        assert_eq!(out.alpha, vec![1.0]);
        // u must equal e~_1 (x) v~_t exactly; recompute from the tables.
        let g = model.tim_forward(&s).unwrap();
        assert_eq!(g.u, out.u);
        let e = crate::encoding::encode_behavior(
            &s,
            1,
            match &model.tables {
                Tables::Unified { cat, .. } => cat,
                _ => unreachable!(),
            },
            match &model.tables {
                Tables::Unified { item, .. } => item,
                _ => unreachable!(),
            },
            match &model.tables {
                Tables::Unified { temporal, .. } => temporal.as_ref(),
                _ => unreachable!(),
            },
            &model.encoder,
        )
        .unwrap();
        let vt = crate::encoding::encode_target(
            &s,
            match &model.tables {
                Tables::Unified { cat, .. } => cat,
                _ => unreachable!(),
            },
            match &model.tables {
                Tables::Unified { item, .. } => item,
                _ => unreachable!(),
            },
            match &model.tables {
                Tables::Unified { temporal, .. } => temporal.as_ref(),
                _ => unreachable!(),
            },
            &model.encoder,
        )
        .unwrap();
        let expect: Vec<f64> = e
            .as_slice()
            .iter()
            .zip(vt.as_slice())
            .map(|(a, b)| a * b)
            .collect();
        assert_eq!(out.u.as_slice(), expect.as_slice());
    }

    #[test]
    fn attention_off_pooling_factorizes() {
        // mean_i (e~_i (x) v~) == (mean_i e~_i) (x) v~ within 1e-12
        let model = toy_model(Variant::TinWoTa, 5);
        let s = toy_sample(&[0, 3], 1, 1);
        let out = model.tim_forward(&s).unwrap();
        assert_eq!(out.alpha, vec![0.5, 0.5]);
        assert!(out.z.is_none());

        let unified = |id: TableId| model.tables.get(id).unwrap();
        let e1 = crate::encoding::encode_behavior(
            &s, 1, unified(TableId::Cat), unified(TableId::Item),
            model.tables.get(TableId::Temporal), &model.encoder,
        )
        .unwrap();
        let e2 = crate::encoding::encode_behavior(
            &s, 2, unified(TableId::Cat), unified(TableId::Item),
            model.tables.get(TableId::Temporal), &model.encoder,
        )
        .unwrap();
        let vt = crate::encoding::encode_target(
            &s, unified(TableId::Cat), unified(TableId::Item),
            model.tables.get(TableId::Temporal), &model.encoder,
        )
        .unwrap();
        for j in 0..vt.cols() {
            let mean = 0.5 * (e1.as_slice()[j] + e2.as_slice()[j]);
            let factored = mean * vt.as_slice()[j];
            assert!((out.u.as_slice()[j] - factored).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_temporal_rows_reduce_tin_to_tin_wo_tte() {
        let mut tin = toy_model(Variant::Tin, 11);
        // Zero the temporal table, then mirror the semantic tables into a
        // TinWoTte model with identical MLP weights.
        if let Tables::Unified { temporal: Some(t), .. } = &mut tin.tables {
            let (r, c) = (t.n_ids(), t.dim());
            *t.weights_mut() = Dense::zeros(r, c);
        }
        let (cat, item) = match &tin.tables {
            Tables::Unified { cat, item, .. } => (cat.clone(), item.clone()),
            _ => unreachable!(),
        };
        let mut spec = toy_spec(Variant::TinWoTte);
        spec.mlp_hidden = tin.spec.mlp_hidden.clone();
        let wo = Model::from_parts(
            spec,
            TemporalEncoder::None,
            Tables::Unified {
                cat,
                item,
                temporal: None,
            },
            tin.mlp.clone(),
        )
        .unwrap();
        for cats in [&[1u32, 2, 3][..], &[0, 0, 2, 1][..], &[3][..]] {
            for label in [0u8, 1] {
                let s = toy_sample(cats, 1, label);
                // Bit-identical forward, loss, and probabilities.
                assert_eq!(tin.predict(&s).unwrap(), wo.predict(&s).unwrap());
                let (la, _) = tin.forward_backward(&s).unwrap();
                let (lb, _) = wo.forward_backward(&s).unwrap();
                assert_eq!(la, lb);
                let ta = tin.tim_forward(&s).unwrap();
                let tb = wo.tim_forward(&s).unwrap();
                assert_eq!(ta.u, tb.u);
                assert_eq!(ta.alpha, tb.alpha);
            }
        }
    }

    #[test]
    fn all_zero_parameters_predict_half() {
        let mut model = toy_model(Variant::Tin, 7);
        let zeros = vec![0.0; model.n_params()];
        model.load_flat_params(&zeros).unwrap();
        let s = toy_sample(&[0, 1, 2], 3, 1);
        assert_eq!(model.predict(&s).unwrap(), 0.5);
    }

    #[test]
    fn avg_concat_pools_unweighted_mean_without_product() {
        let model = toy_model(Variant::AvgConcat, 13);
        // Head takes [u, v_t] only: first MLP weight has 2*d rows.
        assert_eq!(model.mlp[0].w.rows(), 2 * model.spec.d_model());
        let s = toy_sample(&[1, 2, 3], 0, 1);
        let out = model.tim_forward(&s).unwrap();
        assert_eq!(out.alpha, vec![1.0 / 3.0; 3]);
        let unified = |id: TableId| model.tables.get(id).unwrap();
        for j in 0..model.spec.d_model() {
            let mut mean = 0.0;
            for i in 1..=3 {
                let e = crate::encoding::encode_behavior(
                    &s, i, unified(TableId::Cat), unified(TableId::Item), None, &model.encoder,
                )
                .unwrap();
                mean += e.as_slice()[j] / 3.0;
            }
            assert!((out.u.as_slice()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_stays_in_the_open_interval() {
        let model = toy_model(Variant::Din, 17);
        let s = toy_sample(&[0, 1], 2, 1);
        let p = model.predict(&s).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn empty_history_is_rejected() {
        let model = toy_model(Variant::Tin, 3);
        let mut s = toy_sample(&[1], 2, 1);
        s.history.clear();
        assert!(matches!(model.predict(&s), Err(Error::EmptySequence(_))));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for variant in [Variant::Tin, Variant::TinWoTr, Variant::Din, Variant::DinSplit] {
            let model = toy_model(variant, 29);
            for _ in 0..50 {
                let h = rng.gen_range(1..=6);
                let cats: Vec<u32> = (0..h).map(|_| rng.gen_range(0..4)).collect();
                let s = toy_sample(&cats, rng.gen_range(0..4), 1);
                let out = model.tim_forward(&s).unwrap();
                let sum: f64 = out.alpha.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{variant}: sum {sum}");
                assert!(out.alpha.iter().all(|a| *a >= 0.0));
            }
        }
    }

    #[test]
    fn scaling_the_target_preserves_attention_argmax() {
        // TinWoTte with a target item/category pair absent from the history:
        // scaling those embedding rows scales v~_t by a positive constant.
        let mut model = toy_model(Variant::TinWoTte, 31);
        let s = toy_sample(&[0, 1, 2], 3, 1);
        let before = model.tim_forward(&s).unwrap();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        if let Tables::Unified { cat, item, .. } = &mut model.tables {
            for table in [cat, item] {
                let row: Vec<f64> = table.row(3).unwrap().iter().map(|v| v * 3.0).collect();
                table.weights_mut().row_mut(3).copy_from_slice(&row);
            }
        }
        let after = model.tim_forward(&s).unwrap();
        assert_eq!(argmax(&before.alpha), argmax(&after.alpha));
        assert_ne!(before.alpha, after.alpha);
    }

    #[test]
    fn din_split_with_tied_tables_matches_din() {
        let din = toy_model(Variant::Din, 37);
        let (cat, item) = match &din.tables {
            Tables::Unified { cat, item, .. } => (cat.clone(), item.clone()),
            _ => unreachable!(),
        };
        let spec = ModelSpec {
            d_ta: 4,
            d_tr: 4,
            ..toy_spec(Variant::DinSplit)
        };
        let split = Model::from_parts(
            spec,
            TemporalEncoder::None,
            Tables::Split {
                ta_cat: cat.clone(),
                ta_item: item.clone(),
                tr_cat: cat,
                tr_item: item,
            },
            din.mlp.clone(),
        )
        .unwrap();
        for cats in [&[0u32, 1, 2][..], &[3, 3][..]] {
            let s = toy_sample(cats, 2, 1);
            assert_eq!(din.predict(&s).unwrap(), split.predict(&s).unwrap());
        }
    }

    #[test]
    fn din_split_zero_ta_matches_uniform_attention() {
        let base = toy_model(Variant::DinSplit, 41);
        let (tr_cat, tr_item) = match &base.tables {
            Tables::Split { tr_cat, tr_item, .. } => (tr_cat.clone(), tr_item.clone()),
            _ => unreachable!(),
        };
        let spec = ModelSpec {
            d_ta: 0,
            ..base.spec.clone()
        };
        let no_ta = Model::from_parts(
            spec,
            TemporalEncoder::None,
            Tables::Split {
                ta_cat: EmbeddingTable::from_weights("ta_cat", Dense::zeros(4, 0)),
                ta_item: EmbeddingTable::from_weights("ta_item", Dense::zeros(4, 0)),
                tr_cat,
                tr_item,
            },
            base.mlp.clone(),
        )
        .unwrap();
        let s = toy_sample(&[0, 1, 2, 3], 1, 1);
        let out = no_ta.tim_forward(&s).unwrap();
        assert_eq!(out.alpha, vec![0.25; 4]);
        assert!(out.z.is_none());
        // And it predicts like any first-order mean pooling of the TR space.
        assert!(no_ta.predict(&s).unwrap() > 0.0);
    }

    #[test]
    fn din_split_rejects_zero_dims() {
        let spec = ModelSpec {
            d_ta: 0,
            d_tr: 0,
            ..toy_spec(Variant::DinSplit)
        };
        assert!(matches!(
            Model::init(spec, TemporalEncoder::None, 1),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn extraction_rules_per_variant() {
        let s = toy_sample(&[0, 1, 1], 1, 1);

        // TIN w/o TA: no attention factor, second-order norm.
        let wo_ta = toy_model(Variant::TinWoTa, 43);
        let terms = wo_ta.extract_learned_ctc_terms(&s).unwrap();
        assert!(terms.iter().all(|t| t.z.is_none()));
        let out = wo_ta.tim_forward(&s).unwrap();
        for (term, norm) in terms.iter().zip(&out.value_norms) {
            assert_eq!(term.rep_norm, *norm);
            assert_eq!(term.correlation(), *norm);
        }

        // TIN w/o TR: attention factor present, first-order norm.
        let wo_tr = toy_model(Variant::TinWoTr, 47);
        let terms = wo_tr.extract_learned_ctc_terms(&s).unwrap();
        assert!(terms.iter().all(|t| t.z.is_some()));
        let out = wo_tr.tim_forward(&s).unwrap();
        assert_eq!(terms[0].z.unwrap(), out.z.as_ref().unwrap()[0]);

        // Unsupported variants are named in the error.
        let avg = toy_model(Variant::AvgConcat, 53);
        match avg.extract_learned_ctc_terms(&s) {
            Err(Error::UnsupportedVariant(name)) => assert_eq!(name, "avg-concat"),
            other => panic!("expected unsupported-variant error, got {other:?}"),
        }
    }

    #[test]
    fn zero_temporal_extraction_matches_tin_wo_tte() {
        let mut tin = toy_model(Variant::Tin, 59);
        if let Tables::Unified { temporal: Some(t), .. } = &mut tin.tables {
            let (r, c) = (t.n_ids(), t.dim());
            *t.weights_mut() = Dense::zeros(r, c);
        }
        let (cat, item) = match &tin.tables {
            Tables::Unified { cat, item, .. } => (cat.clone(), item.clone()),
            _ => unreachable!(),
        };
        let wo = Model::from_parts(
            toy_spec(Variant::TinWoTte),
            TemporalEncoder::None,
            Tables::Unified { cat, item, temporal: None },
            tin.mlp.clone(),
        )
        .unwrap();
        let s = toy_sample(&[2, 0, 1], 1, 1);
        let a = tin.extract_learned_ctc_terms(&s).unwrap();
        let b = wo.extract_learned_ctc_terms(&s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.z, y.z);
            assert_eq!(x.rep_norm, y.rep_norm);
        }
    }

    #[test]
    fn extraction_is_positive_for_singleton_history() {
        for variant in [Variant::Tin, Variant::TinWoTte, Variant::TinWoTa, Variant::TinWoTr, Variant::Din] {
            let model = toy_model(variant, 61);
            let s = toy_sample(&[2], 1, 1);
            let terms = model.extract_learned_ctc_terms(&s).unwrap();
            assert_eq!(terms.len(), 1);
            let v = terms[0].correlation();
            assert!(v > 0.0 && v.is_finite(), "{variant}: {v}");
        }
    }

    #[test]
    fn attention_logits_agree_with_softmax_weights() {
        let model = toy_model(Variant::Tin, 67);
        let s = toy_sample(&[0, 1, 2, 3], 2, 1);
        let out = model.tim_forward(&s).unwrap();
        let z = out.z.unwrap();
        let p = crate::tensor::softmax(&z);
        for (a, b) in out.alpha.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Finite differences over every parameter of every variant. Parameters
    /// are redrawn at O(0.5) scale so no ReLU pre-activation sits within the
    /// differencing step of its kink (fresh-init models put them at the 1e-4
    /// scale, where central differences straddle the kink and disagree with
    /// any one-sided subgradient).
    #[test]
    fn gradients_match_finite_differences_for_all_variants() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0x9d2c);
        for variant in Variant::ALL {
            let mut model = toy_model(variant, 71);
            let theta: Vec<f64> = (0..model.n_params())
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect();
            model.load_flat_params(&theta).unwrap();
            let samples = [
                toy_sample(&[0, 1, 2], 3, 1),
                toy_sample(&[2, 2], 2, 0),
                toy_sample(&[1], 0, 1),
            ];
            for s in &samples {
                let mut work = model.clone();
                let mut eval = |th: &[f64]| {
                    work.load_flat_params(th)?;
                    work.flat_loss_grads(s)
                };
                let report = grad_check(&theta, &mut eval, 1e-4, 1e-4).unwrap();
                assert!(
                    report.pass,
                    "{variant}: max rel err {} at {:?}",
                    report.max_rel_err, report.worst_index
                );
            }
        }
    }

    #[test]
    fn duplicate_rows_accumulate_gradients_once_per_row() {
        // A history repeating one category must produce a single gradient
        // entry for that row, with contributions from both occurrences.
        let model = toy_model(Variant::TinWoTte, 73);
        let s = toy_sample(&[1, 1], 2, 1);
        let (_, grads) = model.forward_backward(&s).unwrap();
        let cat_rows: Vec<usize> = grads
            .rows
            .iter()
            .filter(|(t, _, _)| *t == TableId::Cat)
            .map(|(_, r, _)| *r)
            .collect();
        let mut sorted = cat_rows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), cat_rows.len(), "duplicate gradient rows");
        assert!(cat_rows.contains(&1) && cat_rows.contains(&2));
    }

    #[test]
    fn unused_rows_get_no_gradient_entry() {
        let model = toy_model(Variant::Tin, 79);
        let s = toy_sample(&[1], 1, 1);
        let (_, grads) = model.forward_backward(&s).unwrap();
        assert!(!grads
            .rows
            .iter()
            .any(|(t, r, _)| *t == TableId::Cat && *r == 3));
    }

    #[test]
    fn checkpoint_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        for variant in [Variant::Tin, Variant::DinSplit, Variant::AvgProduct] {
            let model = toy_model(variant, 83);
            let p1 = dir.path().join(format!("{variant}-a.ckpt"));
            let p2 = dir.path().join(format!("{variant}-b.ckpt"));
            model.save(&p1).unwrap();
            model.save(&p2).unwrap();
            assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
            let back = Model::load(&p1).unwrap();
            assert_eq!(model, back);
        }
    }

    #[test]
    fn checkpoint_with_tte_t_keeps_bin_edges() {
        let spec = ModelSpec {
            encoder: EncoderKind::TteT,
            ..toy_spec(Variant::Tin)
        };
        let encoder = TemporalEncoder::tte_t(vec![5.0, 17.0, 99.5]).unwrap();
        let model = Model::init(spec, encoder, 89).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.encoder.bin_edges().unwrap(), &[5.0, 17.0, 99.5]);
        assert_eq!(model, back);
    }
}
