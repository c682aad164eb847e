//! Parameter storage: embedding tables and dense network weights, with Xavier
//! initialization and per-row (lazy) Adam updates.
//!
//! Everything trainable lives in one [`ParamStore`] as an [`EmbeddingTable`]:
//! a dense weight matrix is simply a table whose "vocab" is its input
//! dimension. That gives a single optimizer and a single checkpoint framing
//! for the whole model.

use std::collections::HashMap;

use crate::error::{GsvrError, Result};
use crate::numerics::{GradEntry, Gradients, ParamId, ParamView, ParamsMut, Rng};

/// What a table stores; drives quantization targeting and is not serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    SharedEmbedding,
    ScenarioEmbedding,
    Dense,
}

/// Id-indexed dense parameter rows with per-row Adam state.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_counts: Vec<u64>,
    pub kind: TableKind,
}

impl EmbeddingTable {
    pub fn from_weights(
        name: &str,
        vocab_size: usize,
        dim: usize,
        weights: Vec<f64>,
        kind: TableKind,
    ) -> Self {
        assert_eq!(weights.len(), vocab_size * dim);
        EmbeddingTable {
            name: name.to_string(),
            vocab_size,
            dim,
            weights,
            adam_m: vec![0.0; vocab_size * dim],
            adam_v: vec![0.0; vocab_size * dim],
            step_counts: vec![0; vocab_size],
            kind,
        }
    }

    pub fn zeros(name: &str, vocab_size: usize, dim: usize, kind: TableKind) -> Self {
        Self::from_weights(name, vocab_size, dim, vec![0.0; vocab_size * dim], kind)
    }

    /// Xavier-uniform init for embedding rows: the fan pair is (dim, dim),
    /// so entries are uniform in +-sqrt(6 / (2 * dim)).
    pub fn xavier_embedding(
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut Rng,
        kind: TableKind,
    ) -> Self {
        assert!(vocab_size >= 1 && dim >= 1);
        let bound = (6.0 / (2.0 * dim as f64)).sqrt();
        let weights = (0..vocab_size * dim)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Self::from_weights(name, vocab_size, dim, weights, kind)
    }

    /// Xavier-uniform init for a dense layer: fan pair (d_in, d_out).
    pub fn xavier_dense(name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        assert!(d_in >= 1 && d_out >= 1);
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weights = (0..d_in * d_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Self::from_weights(name, d_in, d_out, weights, TableKind::Dense)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.dim..(r + 1) * self.dim]
    }

    /// Adam update of a single row from its gradient. Bias correction uses
    /// this row's own step count, so rarely-seen ids are not over-corrected.
    pub fn adam_step_row(&mut self, row: usize, grad: &[f64], hyper: &AdamHyper, lr: f64) {
        debug_assert_eq!(grad.len(), self.dim);
        self.step_counts[row] += 1;
        let t = self.step_counts[row] as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let base = row * self.dim;
        for (j, &g) in grad.iter().enumerate() {
            let m = &mut self.adam_m[base + j];
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            let v = &mut self.adam_v[base + j];
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            self.weights[base + j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}

/// Adam hyper-parameters plus the per-epoch learning-rate decay.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.9,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps <= 0.0
        {
            return Err(GsvrError::Config(format!(
                "invalid Adam hyper-parameters: {self:?}"
            )));
        }
        Ok(())
    }

    /// Learning rate for epoch e: lr * decay^e.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// Addressing for (entity, scenario) composite tables. The underlying storage
/// is a plain table of vocab entity_vocab * num_scenarios.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioKeyedTable {
    pub param: ParamId,
    pub entity_vocab: usize,
    pub num_scenarios: usize,
}

impl ScenarioKeyedTable {
    pub fn composite_index(&self, entity: usize, scenario: usize) -> usize {
        debug_assert!(entity < self.entity_vocab && scenario < self.num_scenarios);
        entity * self.num_scenarios + scenario
    }

    pub fn composite_ids(&self, entities: &[usize], scenarios: &[usize]) -> Vec<usize> {
        entities
            .iter()
            .zip(scenarios.iter())
            .map(|(&e, &s)| self.composite_index(e, s))
            .collect()
    }
}

/// All trainable parameters of a model, keyed by insertion order.
#[derive(Debug, Default)]
pub struct ParamStore {
    tables: Vec<EmbeddingTable>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, table: EmbeddingTable) -> Result<ParamId> {
        if self.by_name.contains_key(&table.name) {
            return Err(GsvrError::Config(format!(
                "duplicate parameter name '{}'",
                table.name
            )));
        }
        let id = ParamId(self.tables.len());
        self.by_name.insert(table.name.clone(), id);
        self.tables.push(table);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &EmbeddingTable {
        &self.tables[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut EmbeddingTable {
        &mut self.tables[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.tables.len()).map(ParamId).collect()
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.tables.iter().map(|t| t.weights.len()).sum()
    }

    /// One optimizer step over every parameter that received a gradient.
    /// Sparse row gradients update only their rows; dense gradients update
    /// every row. Iteration order is fixed for determinism.
    pub fn adam_step(&mut self, grads: &Gradients, hyper: &AdamHyper, lr: f64) {
        for id in grads.param_ids() {
            let table = &mut self.tables[id.0];
            match grads.get(id).unwrap() {
                GradEntry::Dense(g) => {
                    debug_assert_eq!(g.shape(), (table.vocab_size, table.dim));
                    for r in 0..table.vocab_size {
                        let row = g.row(r).to_vec();
                        table.adam_step_row(r, &row, hyper, lr);
                    }
                }
                GradEntry::Rows { rows, .. } => {
                    let mut order: Vec<usize> = rows.keys().copied().collect();
                    order.sort_unstable();
                    for r in order {
                        let row = rows[&r].clone();
                        table.adam_step_row(r, &row, hyper, lr);
                    }
                }
            }
        }
    }

    /// Replace weights and optimizer state from raw checkpoint tables,
    /// matching by name and shape.
    pub fn load_raw(&mut self, raw: Vec<EmbeddingTable>) -> Result<()> {
        let mut seen = vec![false; self.tables.len()];
        for r in raw {
            let id = self.by_name.get(&r.name).copied().ok_or_else(|| {
                GsvrError::Compat {
                    table: r.name.clone(),
                    detail: "checkpoint table not present in model".to_string(),
                }
            })?;
            let t = &mut self.tables[id.0];
            if t.vocab_size != r.vocab_size || t.dim != r.dim {
                return Err(GsvrError::Compat {
                    table: r.name.clone(),
                    detail: format!(
                        "shape {}x{} in checkpoint vs {}x{} in model",
                        r.vocab_size, r.dim, t.vocab_size, t.dim
                    ),
                });
            }
            t.weights = r.weights;
            t.adam_m = r.adam_m;
            t.adam_v = r.adam_v;
            t.step_counts = r.step_counts;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(GsvrError::Compat {
                table: self.tables[missing].name.clone(),
                detail: "missing from checkpoint".to_string(),
            });
        }
        Ok(())
    }
}

impl ParamView for ParamStore {
    fn shape(&self, id: ParamId) -> (usize, usize) {
        let t = &self.tables[id.0];
        (t.vocab_size, t.dim)
    }

    fn values(&self, id: ParamId) -> &[f64] {
        &self.tables[id.0].weights
    }

    fn name(&self, id: ParamId) -> &str {
        &self.tables[id.0].name
    }
}

impl ParamsMut for ParamStore {
    fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tables[id.0].weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff, grads_close, stream, Tape};

    #[test]
    fn xavier_embedding_bound_dim_40() {
        let mut rng = Rng::substream(1, stream::INIT);
        let t = EmbeddingTable::xavier_embedding("e", 100, 40, &mut rng, TableKind::SharedEmbedding);
        let bound = (6.0f64 / 80.0).sqrt();
        assert!((bound - 0.273_86).abs() < 1e-4);
        assert!(t.weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn xavier_same_seed_identical() {
        let mut r1 = Rng::substream(9, stream::INIT);
        let mut r2 = Rng::substream(9, stream::INIT);
        let a = EmbeddingTable::xavier_embedding("a", 10, 8, &mut r1, TableKind::SharedEmbedding);
        let b = EmbeddingTable::xavier_embedding("a", 10, 8, &mut r2, TableKind::SharedEmbedding);
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn xavier_sample_mean_within_three_sigma() {
        let mut rng = Rng::substream(4, stream::INIT);
        let dim = 10;
        let n = 100_000;
        let t = EmbeddingTable::xavier_embedding("e", n / dim, dim, &mut rng, TableKind::SharedEmbedding);
        let bound = (6.0 / (2.0 * dim as f64)).sqrt();
        let mean: f64 = t.weights.iter().sum::<f64>() / n as f64;
        // Uniform(-b, b) has variance b^2/3.
        let sigma_mean = (bound * bound / 3.0 / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma_mean, "mean {mean} vs sigma {sigma_mean}");
    }

    #[test]
    fn lookup_gradient_is_one_on_gathered_rows() {
        let mut store = ParamStore::new();
        let id = store
            .insert(EmbeddingTable::from_weights(
                "emb",
                4,
                3,
                (0..12).map(|i| i as f64).collect(),
                TableKind::SharedEmbedding,
            ))
            .unwrap();
        let mut tape = Tape::new(&store);
        let g = tape.gather(id, &[1, 3]).unwrap();
        let sum = tape.sum_all(g);
        let grads = tape.backward(sum).unwrap();
        let dense = grads.dense(id, 4, 3);
        assert_eq!(dense.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(dense.row(1), &[1.0, 1.0, 1.0]);
        assert_eq!(dense.row(2), &[0.0, 0.0, 0.0]);
        assert_eq!(dense.row(3), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn duplicate_ids_accumulate() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let id = store
            .insert(EmbeddingTable::from_weights(
                "emb",
                3,
                2,
                rng.normal_tensor(3, 2).into_data(),
                TableKind::SharedEmbedding,
            ))
            .unwrap();
        let run = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let g = tape.gather(id, &[1, 1, 0]).unwrap();
            let sq = tape.mul(g, g).unwrap();
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).item(), grads)
        };
        let (_, grads) = run(&store);
        let fd = finite_diff(&mut store, &[id], |s| Ok(run(s).0), 1e-5).unwrap();
        assert!(grads_close(&grads.dense(id, 3, 2), &fd[&id], 1e-4, 1e-7));
    }

    #[test]
    fn empty_lookup_gives_empty_tensor() {
        let mut store = ParamStore::new();
        let id = store
            .insert(EmbeddingTable::zeros("emb", 3, 5, TableKind::SharedEmbedding))
            .unwrap();
        let mut tape = Tape::new(&store);
        let g = tape.gather(id, &[]).unwrap();
        assert_eq!(tape.value(g).shape(), (0, 5));
    }

    #[test]
    fn lookup_out_of_range_names_table() {
        let mut store = ParamStore::new();
        let id = store
            .insert(EmbeddingTable::zeros("emb.user", 3, 5, TableKind::SharedEmbedding))
            .unwrap();
        let mut tape = Tape::new(&store);
        let err = tape.gather(id, &[3]).unwrap_err();
        assert!(err.to_string().contains("emb.user"));
    }

    #[test]
    fn adam_zero_gradient_leaves_row_unchanged() {
        let mut t = EmbeddingTable::from_weights(
            "t",
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0],
            TableKind::Dense,
        );
        let hyper = AdamHyper::default();
        // Only row 0 receives a gradient.
        t.adam_step_row(0, &[0.5, -0.5], &hyper, hyper.lr);
        assert_eq!(&t.weights[2..], &[3.0, 4.0]);
        assert_eq!(t.step_counts[1], 0);
    }

    #[test]
    fn adam_first_step_matches_hand_value() {
        let mut t = EmbeddingTable::from_weights("t", 1, 1, vec![0.0], TableKind::Dense);
        let hyper = AdamHyper::default();
        t.adam_step_row(0, &[1.0], &hyper, hyper.lr);
        // m_hat = v_hat = 1 at t=1, so the step is -lr / (1 + eps).
        let want = -hyper.lr / (1.0 + hyper.eps);
        assert!((t.weights[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adam_trace_matches_scalar_reference() {
        // Independent scalar Adam, written from the update equations.
        let hyper = AdamHyper::default();
        let grads = [1.0, 1.0, -0.3, 0.7];
        let (mut w, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - hyper.beta1.powi(t));
            let v_hat = v / (1.0 - hyper.beta2.powi(t));
            w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            reference.push(w);
        }

        let mut table = EmbeddingTable::from_weights("t", 1, 1, vec![0.2], TableKind::Dense);
        for (i, &g) in grads.iter().enumerate() {
            table.adam_step_row(0, &[g], &hyper, hyper.lr);
            assert!(
                (table.weights[0] - reference[i]).abs() < 1e-15,
                "step {i}: {} vs {}",
                table.weights[0],
                reference[i]
            );
        }
        // |step 2 update| slightly below |step 1| via the eps term only.
        let d1 = reference[0] - 0.2;
        let d2 = reference[1] - reference[0];
        assert!(d2.abs() <= d1.abs());
    }

    #[test]
    fn adam_is_deterministic() {
        let mk = || {
            let mut t =
                EmbeddingTable::from_weights("t", 2, 2, vec![0.1, 0.2, 0.3, 0.4], TableKind::Dense);
            let hyper = AdamHyper::default();
            t.adam_step_row(1, &[0.3, -0.1], &hyper, 0.01);
            t.adam_step_row(1, &[0.1, 0.2], &hyper, 0.01);
            t
        };
        assert_eq!(mk().weights, mk().weights);
        assert_eq!(mk().adam_m, mk().adam_m);
    }

    #[test]
    fn untouched_rows_keep_initialization_through_updates() {
        let mut rng = Rng::substream(5, stream::INIT);
        let mut store = ParamStore::new();
        let id = store
            .insert(EmbeddingTable::xavier_embedding(
                "emb",
                8,
                4,
                &mut rng,
                TableKind::SharedEmbedding,
            ))
            .unwrap();
        let before: Vec<f64> = store.get(id).row(6).to_vec();
        let hyper = AdamHyper::default();
        for step in 0..20 {
            let grads = {
                let mut tape = Tape::new(&store);
                let g = tape.gather(id, &[step % 3, 4]).unwrap();
                let sq = tape.mul(g, g).unwrap();
                let loss = tape.mean_all(sq);
                tape.backward(loss).unwrap()
            };
            store.adam_step(&grads, &hyper, hyper.lr_at_epoch(step / 5));
        }
        // Rows 6 and 7 were never gathered: bit-identical to initialization.
        assert_eq!(store.get(id).row(6), &before[..]);
        assert_eq!(store.get(id).step_counts[6], 0);
    }

    #[test]
    fn lr_schedule_is_exact() {
        let hyper = AdamHyper::default();
        assert_eq!(hyper.lr_at_epoch(0), 0.001);
        assert!((hyper.lr_at_epoch(2) - 0.001 * 0.81).abs() < 1e-18);
    }

    #[test]
    fn scenario_keyed_composite_index() {
        let t = ScenarioKeyedTable {
            param: ParamId(0),
            entity_vocab: 10,
            num_scenarios: 4,
        };
        assert_eq!(t.composite_index(3, 2), 14);
        let ids = t.composite_ids(&[0, 9], &[0, 3]);
        assert_eq!(ids, vec![0, 39]);
        assert!(ids.iter().all(|&i| i < 40));
    }

    #[test]
    fn load_raw_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store
            .insert(EmbeddingTable::zeros("a", 2, 2, TableKind::Dense))
            .unwrap();
        let raw = vec![EmbeddingTable::zeros("a", 3, 2, TableKind::Dense)];
        let err = store.load_raw(raw).unwrap_err();
        assert!(err.to_string().contains("'a'"));
    }
}
