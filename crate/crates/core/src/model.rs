//! Full model assembly: embedding tables, posterior encoders, global-knowledge
//! priors, Monte-Carlo training objective, deterministic inference, ablation
//! variants, and the replaceable prediction backbone.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchOrder, Dataset, Vocabs, batches};
use crate::embeddings::{
    AdamHyper, EmbeddingTable, ParamStore, ScenarioKeyedTable, TableKind,
};
use crate::encoder::{EncoderNet, kl_diag, kl_to_standard, reparam_sample};
use crate::error::{GsvrError, Result};
use crate::numerics::{Gradients, NodeId, ParamId, Rng, Tape, Tensor2, stream};
use crate::priors::{aggregate_sequence, BehaviorModeNet, MoeConfig, SidePriorNet};

/// Predictions are clipped to [EPS, 1-EPS] inside the cross-entropy.
const BCE_CLIP: f64 = 1e-7;

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Posteriors regularized toward behavior-mode and side-feature priors.
    Full,
    /// Scenario-specific embeddings used directly as point estimates.
    Distinct,
    /// Posteriors kept, priors replaced by standard normals.
    Uniform,
    /// Expert networks removed; the pooled sequence feeds the prior directly.
    RMoe,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Distinct => "distinct",
            Variant::Uniform => "uniform",
            Variant::RMoe => "rmoe",
        }
    }

    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::Distinct,
        Variant::Uniform,
        Variant::RMoe,
    ];
}

impl FromStr for Variant {
    type Err = GsvrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "distinct" => Ok(Variant::Distinct),
            "uniform" => Ok(Variant::Uniform),
            "rmoe" | "r-moe" => Ok(Variant::RMoe),
            other => Err(GsvrError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Model hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GsvrConfig {
    pub embed_dim: usize,
    /// Width of the scenario-specific latent (posterior/prior dimension).
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    /// Hidden sizes of the prediction perceptron.
    pub mlp_hidden: Vec<usize>,
    /// KL weight in the objective.
    pub alpha: f64,
    /// Monte-Carlo samples per record during training.
    pub mc_samples: usize,
    pub variant: Variant,
    pub moe: MoeConfig,
}

impl Default for GsvrConfig {
    fn default() -> Self {
        GsvrConfig {
            embed_dim: 40,
            latent_dim: 40,
            encoder_hidden: 64,
            mlp_hidden: vec![256, 128, 64],
            alpha: 0.6,
            mc_samples: 5,
            variant: Variant::Full,
            moe: MoeConfig {
                num_shared: 2,
                num_specific: 2,
                expert_hidden: 64,
                expert_out: 40,
            },
        }
    }
}

impl GsvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) || self.alpha == 0.0 {
            return Err(GsvrError::Config(format!(
                "alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.mc_samples < 1 {
            return Err(GsvrError::Config("mc_samples must be >= 1".into()));
        }
        if self.embed_dim < 1 || self.latent_dim < 1 {
            return Err(GsvrError::Config("dimensions must be >= 1".into()));
        }
        self.moe.validate()
    }
}

/// Loss decomposition for one batch or one epoch. KL terms are stored
/// unweighted; total = pred + alpha * (kl_user + kl_item + anchors).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "pred")]
    pub pred_loss: f64,
    #[serde(rename = "kl_user")]
    pub kl_user_post: f64,
    #[serde(rename = "kl_item")]
    pub kl_item_post: f64,
    pub kl_anchor_user: f64,
    pub kl_anchor_item: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn validate_finite(&self) -> Result<()> {
        let fields = [
            ("pred", self.pred_loss),
            ("kl_user", self.kl_user_post),
            ("kl_item", self.kl_item_post),
            ("kl_anchor_user", self.kl_anchor_user),
            ("kl_anchor_item", self.kl_anchor_item),
            ("total", self.total),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(GsvrError::Numeric(format!(
                    "loss term '{name}' is {v}; aborting"
                )));
            }
        }
        Ok(())
    }

    fn add_weighted(&mut self, other: &LossBreakdown, weight: f64) {
        self.pred_loss += weight * other.pred_loss;
        self.kl_user_post += weight * other.kl_user_post;
        self.kl_item_post += weight * other.kl_item_post;
        self.kl_anchor_user += weight * other.kl_anchor_user;
        self.kl_anchor_item += weight * other.kl_anchor_item;
        self.total += weight * other.total;
    }
}

/// The eight prediction inputs, in their canonical order.
pub struct PredInputs {
    pub u: NodeId,
    pub u_s: NodeId,
    pub v: NodeId,
    pub v_s: NodeId,
    pub b_us: NodeId,
    pub c: NodeId,
    pub c_s: NodeId,
    pub s: NodeId,
}

/// Replaceable prediction head: consumes the eight inputs and returns a
/// probability column. The shipped implementation is a plain perceptron;
/// gate-scaling backbones can slot in behind this interface.
pub trait Backbone: Send + Sync {
    fn predict(&self, tape: &mut Tape, inputs: &PredInputs) -> Result<NodeId>;
}

/// Perceptron with relu hidden layers and a sigmoid output unit.
pub struct MlpBackbone {
    layers: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl MlpBackbone {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        d_in: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = d_in;
        for (i, &h) in hidden.iter().enumerate() {
            let wname = format!("{name}.l{i}.w");
            let mut rng = Rng::named_substream(seed, stream::INIT, &wname);
            let w = store.insert(EmbeddingTable::xavier_dense(&wname, width, h, &mut rng))?;
            let b = store.insert(EmbeddingTable::zeros(
                &format!("{name}.l{i}.b"),
                1,
                h,
                TableKind::Dense,
            ))?;
            layers.push((w, b));
            width = h;
        }
        let wname = format!("{name}.out.w");
        let mut rng = Rng::named_substream(seed, stream::INIT, &wname);
        let w = store.insert(EmbeddingTable::xavier_dense(&wname, width, 1, &mut rng))?;
        let b = store.insert(EmbeddingTable::zeros(
            &format!("{name}.out.b"),
            1,
            1,
            TableKind::Dense,
        ))?;
        Ok(MlpBackbone {
            layers,
            out: (w, b),
        })
    }
}

impl Backbone for MlpBackbone {
    fn predict(&self, tape: &mut Tape, inputs: &PredInputs) -> Result<NodeId> {
        let mut x = tape.concat(&[
            inputs.u, inputs.u_s, inputs.v, inputs.v_s, inputs.b_us, inputs.c, inputs.c_s,
            inputs.s,
        ])?;
        for &(w, b) in &self.layers {
            let wn = tape.param(w);
            let bn = tape.param(b);
            x = tape.linear(x, wn, bn)?;
            x = tape.relu(x)?;
        }
        let wn = tape.param(self.out.0);
        let bn = tape.param(self.out.1);
        let logit = tape.linear(x, wn, bn)?;
        tape.sigmoid(logit)
    }
}

/// Where the Monte-Carlo noise comes from.
pub enum EpsSource<'a> {
    /// Draw from the Monte-Carlo noise stream.
    Rng(&'a mut Rng),
    /// All-zero noise: the deterministic inference path.
    Zero,
    /// Externally fixed draws, one (user, item) pair per sample; used by the
    /// gradient-check oracle, which must re-evaluate under identical noise.
    Fixed(&'a [(Tensor2, Tensor2)]),
}

/// Predictions and loss for one batch.
pub struct TrainForward {
    /// [n x L] sampled prediction probabilities ([n x 1] for Distinct).
    pub predictions: Tensor2,
    pub loss: LossBreakdown,
}

/// Architecture handles into a [`ParamStore`]. The store itself is owned by
/// the caller, so oracles can perturb weights while the model stays borrowed
/// immutably.
pub struct GsvrModel {
    pub config: GsvrConfig,
    pub vocabs: Vocabs,
    user_shared: ParamId,
    item_shared: ParamId,
    behavior_table: ParamId,
    scenario_table: ParamId,
    user_scen: ScenarioKeyedTable,
    item_scen: ScenarioKeyedTable,
    side_shared: Vec<ParamId>,
    side_scen: Vec<ScenarioKeyedTable>,
    enc_user: EncoderNet,
    enc_item: EncoderNet,
    behavior_net: BehaviorModeNet,
    side_net: SidePriorNet,
    backbone: Box<dyn Backbone>,
}

impl GsvrModel {
    /// Width of the concatenated prediction input for this config/variant.
    pub fn pred_input_width(config: &GsvrConfig, vocabs: &Vocabs) -> usize {
        let d = config.embed_dim;
        let slots = vocabs.side_vocab_sizes.len();
        let us_width = match config.variant {
            Variant::Distinct => d,
            _ => config.latent_dim,
        };
        let bus_width = match config.variant {
            Variant::RMoe => d,
            _ => 2 * config.moe.expert_out,
        };
        d + us_width + d + us_width + bus_width + slots * d + slots * d + d
    }

    pub fn build(
        config: GsvrConfig,
        vocabs: Vocabs,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Self> {
        let width = Self::pred_input_width(&config, &vocabs);
        let hidden = config.mlp_hidden.clone();
        Self::build_with_backbone(config, vocabs, seed, store, |store| {
            Ok(Box::new(MlpBackbone::new(store, seed, "pred", width, &hidden)?))
        })
    }

    /// Build with a caller-supplied prediction backbone.
    pub fn build_with_backbone(
        config: GsvrConfig,
        vocabs: Vocabs,
        seed: u64,
        store: &mut ParamStore,
        make_backbone: impl FnOnce(&mut ParamStore) -> Result<Box<dyn Backbone>>,
    ) -> Result<Self> {
        let d = config.embed_dim;
        let m = vocabs.num_scenarios;
        let emb = |store: &mut ParamStore, name: &str, vocab: usize, dim: usize, kind| {
            let mut rng = Rng::named_substream(seed, stream::INIT, name);
            store.insert(EmbeddingTable::xavier_embedding(name, vocab, dim, &mut rng, kind))
        };
        let user_shared = emb(store, "emb.user_shared", vocabs.num_users, d, TableKind::SharedEmbedding)?;
        let user_scen = ScenarioKeyedTable {
            param: emb(
                store,
                "emb.user_scenario",
                vocabs.num_users * m,
                d,
                TableKind::ScenarioEmbedding,
            )?,
            entity_vocab: vocabs.num_users,
            num_scenarios: m,
        };
        let item_shared = emb(store, "emb.item_shared", vocabs.num_items, d, TableKind::SharedEmbedding)?;
        let item_scen = ScenarioKeyedTable {
            param: emb(
                store,
                "emb.item_scenario",
                vocabs.num_items * m,
                d,
                TableKind::ScenarioEmbedding,
            )?,
            entity_vocab: vocabs.num_items,
            num_scenarios: m,
        };
        // Behavior vocabulary includes the padding id (= num_items).
        let behavior_table = emb(
            store,
            "emb.behavior",
            vocabs.num_items + 1,
            d,
            TableKind::SharedEmbedding,
        )?;
        let scenario_table = emb(store, "emb.scenario", m, d, TableKind::SharedEmbedding)?;
        let mut side_shared = Vec::new();
        let mut side_scen = Vec::new();
        for (k, &vocab) in vocabs.side_vocab_sizes.iter().enumerate() {
            side_shared.push(emb(
                store,
                &format!("emb.side_shared.{k}"),
                vocab,
                d,
                TableKind::SharedEmbedding,
            )?);
            side_scen.push(ScenarioKeyedTable {
                param: emb(
                    store,
                    &format!("emb.side_scenario.{k}"),
                    vocab * m,
                    d,
                    TableKind::ScenarioEmbedding,
                )?,
                entity_vocab: vocab,
                num_scenarios: m,
            });
        }

        let enc_user = EncoderNet::new(store, seed, "enc.user", d, config.encoder_hidden, config.latent_dim)?;
        let enc_item = EncoderNet::new(store, seed, "enc.item", d, config.encoder_hidden, config.latent_dim)?;

        // In the expert-free variant the prior head consumes the pooled
        // sequence directly.
        let prior_in = match config.variant {
            Variant::RMoe => d,
            _ => 2 * config.moe.expert_out,
        };
        let behavior_net = BehaviorModeNet::new(
            store,
            seed,
            "prior.behavior",
            d,
            d,
            config.moe,
            prior_in,
            config.encoder_hidden,
            config.latent_dim,
        )?;
        let side_slots = vocabs.side_vocab_sizes.len();
        let side_net = SidePriorNet::new(
            store,
            seed,
            "prior.side",
            side_slots * d,
            config.encoder_hidden,
            config.latent_dim,
        )?;
        let backbone = make_backbone(store)?;
        Ok(GsvrModel {
            config,
            vocabs,
            user_shared,
            item_shared,
            behavior_table,
            scenario_table,
            user_scen,
            item_scen,
            side_shared,
            side_scen,
            enc_user,
            enc_item,
            behavior_net,
            side_net,
            backbone,
        })
    }

    /// Parameters of the scenario-specific embedding tables (the quantization
    /// targets).
    pub fn scenario_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.user_scen.param, self.item_scen.param];
        ids.extend(self.side_scen.iter().map(|t| t.param));
        ids
    }

    /// Expert and gate parameters of the behavior-mode network.
    pub fn expert_gate_param_ids(&self) -> Vec<ParamId> {
        self.behavior_net.expert_gate_param_ids()
    }

    /// Prior-network parameters (user prior head and item side prior).
    pub fn prior_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.behavior_net.prior_head.param_ids();
        ids.extend(self.side_net.param_ids());
        ids
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(GsvrError::Contract("empty batch".to_string()));
        }
        if batch.sides.len() != self.vocabs.side_vocab_sizes.len() {
            return Err(GsvrError::Data(format!(
                "batch has {} side slots, model expects {}",
                batch.sides.len(),
                self.vocabs.side_vocab_sizes.len()
            )));
        }
        Ok(())
    }

    /// Shared forward construction. When `with_loss` is false only the
    /// prediction nodes are built (the inference path).
    fn build_forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        eps: &mut EpsSource<'_>,
        with_loss: bool,
    ) -> Result<(Vec<NodeId>, Option<LossNodes>)> {
        let n = batch.len();
        let d = self.config.embed_dim;
        let latent = self.config.latent_dim;

        let u = tape.gather(self.user_shared, &batch.users)?;
        let v = tape.gather(self.item_shared, &batch.items)?;
        let e_us = tape.gather(
            self.user_scen.param,
            &self.user_scen.composite_ids(&batch.users, &batch.scenarios),
        )?;
        let e_vs = tape.gather(
            self.item_scen.param,
            &self.item_scen.composite_ids(&batch.items, &batch.scenarios),
        )?;
        let mut c_parts = Vec::with_capacity(self.side_shared.len());
        let mut cs_parts = Vec::with_capacity(self.side_scen.len());
        for (k, (&shared, scen)) in self
            .side_shared
            .iter()
            .zip(self.side_scen.iter())
            .enumerate()
        {
            c_parts.push(tape.gather(shared, &batch.sides[k])?);
            cs_parts.push(tape.gather(
                scen.param,
                &scen.composite_ids(&batch.sides[k], &batch.scenarios),
            )?);
        }
        let c = tape.concat(&c_parts)?;
        let c_s = tape.concat(&cs_parts)?;
        let s = tape.gather(self.scenario_table, &batch.scenarios)?;

        // Pooled behavior sequence.
        let gathered = if batch.seq_width > 0 {
            Some(tape.gather(self.behavior_table, &batch.behaviors)?)
        } else {
            None
        };
        let h = aggregate_sequence(tape, gathered, batch.seq_width, &batch.behavior_counts, d)?;

        // Behavior mode: gated expert mixture, or h itself when experts are
        // removed.
        let b_us = match self.config.variant {
            Variant::RMoe => h,
            _ => self.behavior_net.behavior_mode(tape, h, s)?,
        };

        if self.config.variant == Variant::Distinct {
            // Point estimates: no posteriors, no sampling, no KL terms.
            let pred = self.backbone.predict(
                tape,
                &PredInputs {
                    u,
                    u_s: e_us,
                    v,
                    v_s: e_vs,
                    b_us,
                    c,
                    c_s,
                    s,
                },
            )?;
            let loss_nodes = if with_loss {
                let bce = bce_mean(tape, pred, &batch.labels)?;
                Some(LossNodes {
                    pred_loss: bce,
                    kl_user_post: None,
                    kl_item_post: None,
                    kl_anchor_user: None,
                    kl_anchor_item: None,
                    total: bce,
                })
            } else {
                None
            };
            return Ok((vec![pred], loss_nodes));
        }

        let q_user = self.enc_user.encode(tape, e_us)?;
        let q_item = self.enc_item.encode(tape, e_vs)?;

        // Priors by variant; Uniform replaces them with standard normals.
        let priors = match self.config.variant {
            Variant::Uniform => None,
            Variant::RMoe => Some((
                self.behavior_net.user_prior(tape, h)?,
                self.side_net.item_prior(tape, c_s, c)?,
            )),
            _ => Some((
                self.behavior_net.user_prior(tape, b_us)?,
                self.side_net.item_prior(tape, c_s, c)?,
            )),
        };

        // Sampled predictions: L Monte-Carlo draws.
        let samples = match eps {
            EpsSource::Zero => 1,
            _ => self.config.mc_samples,
        };
        let mut preds = Vec::with_capacity(samples);
        for l in 0..samples {
            let (eps_u, eps_v) = match eps {
                EpsSource::Rng(rng) => {
                    (rng.normal_tensor(n, latent), rng.normal_tensor(n, latent))
                }
                EpsSource::Zero => (Tensor2::zeros(n, latent), Tensor2::zeros(n, latent)),
                EpsSource::Fixed(list) => {
                    let pair = list.get(l).ok_or_else(|| {
                        GsvrError::Contract(format!(
                            "fixed eps provides {} samples, need {samples}",
                            list.len()
                        ))
                    })?;
                    (pair.0.clone(), pair.1.clone())
                }
            };
            let eu = tape.constant(eps_u);
            let ev = tape.constant(eps_v);
            let u_s = reparam_sample(tape, &q_user, eu)?;
            let v_s = reparam_sample(tape, &q_item, ev)?;
            preds.push(self.backbone.predict(
                tape,
                &PredInputs {
                    u,
                    u_s,
                    v,
                    v_s,
                    b_us,
                    c,
                    c_s,
                    s,
                },
            )?);
        }

        let loss_nodes = if with_loss {
            // KL terms once per instance, closed form, then batch means.
            let (kl_u_rows, kl_v_rows, anchor_u_rows, anchor_v_rows) = match &priors {
                Some((p_user, p_item)) => (
                    kl_diag(tape, &q_user, p_user)?,
                    kl_diag(tape, &q_item, p_item)?,
                    Some(kl_to_standard(tape, p_user)?),
                    Some(kl_to_standard(tape, p_item)?),
                ),
                None => (
                    kl_to_standard(tape, &q_user)?,
                    kl_to_standard(tape, &q_item)?,
                    None,
                    None,
                ),
            };
            let kl_user = tape.mean_all(kl_u_rows);
            let kl_item = tape.mean_all(kl_v_rows);
            let anchor_user = anchor_u_rows.map(|r| tape.mean_all(r));
            let anchor_item = anchor_v_rows.map(|r| tape.mean_all(r));

            // L_pre: mean over instances and samples of the BCE.
            let mut acc: Option<NodeId> = None;
            for &p in &preds {
                let bce = bce_mean(tape, p, &batch.labels)?;
                acc = Some(match acc {
                    None => bce,
                    Some(prev) => tape.add(prev, bce)?,
                });
            }
            let pred_loss = tape.scale(acc.expect("samples >= 1"), 1.0 / samples as f64);

            let mut kl_sum = tape.add(kl_user, kl_item)?;
            if let Some(a) = anchor_user {
                kl_sum = tape.add(kl_sum, a)?;
            }
            if let Some(a) = anchor_item {
                kl_sum = tape.add(kl_sum, a)?;
            }
            let weighted = tape.scale(kl_sum, self.config.alpha);
            let total = tape.add(pred_loss, weighted)?;
            Some(LossNodes {
                pred_loss,
                kl_user_post: Some(kl_user),
                kl_item_post: Some(kl_item),
                kl_anchor_user: anchor_user,
                kl_anchor_item: anchor_item,
                total,
            })
        } else {
            None
        };
        Ok((preds, loss_nodes))
    }

    /// Training forward pass: per-instance sampled predictions and the full
    /// loss decomposition.
    pub fn forward_train(
        &self,
        store: &ParamStore,
        batch: &Batch,
        mut eps: EpsSource<'_>,
    ) -> Result<TrainForward> {
        self.check_batch(batch)?;
        let mut tape = Tape::new(store);
        let (preds, loss_nodes) = self.build_forward(&mut tape, batch, &mut eps, true)?;
        let loss_nodes = loss_nodes.expect("with_loss");
        Ok(TrainForward {
            predictions: collect_predictions(&tape, &preds, batch.len()),
            loss: loss_nodes.extract(&tape),
        })
    }

    /// Forward plus backward: the gradients of the total loss.
    pub fn train_grads(
        &self,
        store: &ParamStore,
        batch: &Batch,
        mut eps: EpsSource<'_>,
    ) -> Result<(TrainForward, Gradients)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new(store);
        let (preds, loss_nodes) = self.build_forward(&mut tape, batch, &mut eps, true)?;
        let loss_nodes = loss_nodes.expect("with_loss");
        let grads = tape.backward(loss_nodes.total)?;
        Ok((
            TrainForward {
                predictions: collect_predictions(&tape, &preds, batch.len()),
                loss: loss_nodes.extract(&tape),
            },
            grads,
        ))
    }

    /// Total training loss under externally fixed noise; the closure the
    /// finite-difference oracle differentiates.
    pub fn loss_with_fixed_eps(
        &self,
        store: &ParamStore,
        batch: &Batch,
        eps: &[(Tensor2, Tensor2)],
    ) -> Result<f64> {
        Ok(self
            .forward_train(store, batch, EpsSource::Fixed(eps))?
            .loss
            .total)
    }

    /// Deterministic inference: all sampling noise replaced by zeros, so the
    /// latents collapse to the posterior means. No loss is computed.
    pub fn forward_infer(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new(store);
        let mut eps = EpsSource::Zero;
        let (preds, _) = self.build_forward(&mut tape, batch, &mut eps, false)?;
        Ok(tape.value(preds[0]).data().to_vec())
    }

    /// One pass over the dataset: shuffled batches, Adam with the epoch's
    /// decayed learning rate, and instance-weighted average loss terms.
    pub fn train_epoch(
        &self,
        store: &mut ParamStore,
        dataset: &Dataset,
        hyper: &AdamHyper,
        batch_size: usize,
        epoch: usize,
        data_rng: &mut Rng,
        mc_rng: &mut Rng,
    ) -> Result<LossBreakdown> {
        if dataset.is_empty() {
            return Err(GsvrError::Contract("empty dataset".to_string()));
        }
        let lr = hyper.lr_at_epoch(epoch);
        let mut avg = LossBreakdown::default();
        let total = dataset.len() as f64;
        for batch in batches(dataset, batch_size, BatchOrder::Shuffled(data_rng)) {
            let (fwd, grads) = self.train_grads(store, &batch, EpsSource::Rng(mc_rng))?;
            fwd.loss.validate_finite()?;
            store.adam_step(&grads, hyper, lr);
            avg.add_weighted(&fwd.loss, batch.len() as f64 / total);
        }
        Ok(avg)
    }

    /// Score a dataset in inference mode, sequential batches.
    pub fn score_dataset(
        &self,
        store: &ParamStore,
        dataset: &Dataset,
        batch_size: usize,
    ) -> Result<crate::eval::ScoredSet> {
        let mut set = crate::eval::ScoredSet::default();
        for batch in batches(dataset, batch_size, BatchOrder::Sequential) {
            let scores = self.forward_infer(store, &batch)?;
            for (i, &score) in scores.iter().enumerate() {
                let scenario_raw = dataset.scenario_raw[batch.scenarios[i]];
                set.push(
                    score,
                    batch.labels[i] as u8,
                    batch.group_keys[i],
                    scenario_raw,
                );
            }
        }
        Ok(set)
    }
}

struct LossNodes {
    pred_loss: NodeId,
    kl_user_post: Option<NodeId>,
    kl_item_post: Option<NodeId>,
    kl_anchor_user: Option<NodeId>,
    kl_anchor_item: Option<NodeId>,
    total: NodeId,
}

impl LossNodes {
    fn extract(&self, tape: &Tape) -> LossBreakdown {
        let get = |n: Option<NodeId>| n.map_or(0.0, |id| tape.value(id).item());
        LossBreakdown {
            pred_loss: tape.value(self.pred_loss).item(),
            kl_user_post: get(self.kl_user_post),
            kl_item_post: get(self.kl_item_post),
            kl_anchor_user: get(self.kl_anchor_user),
            kl_anchor_item: get(self.kl_anchor_item),
            total: tape.value(self.total).item(),
        }
    }
}

/// Mean binary cross-entropy of one prediction column against the labels,
/// with the predictions clipped away from 0 and 1.
fn bce_mean(tape: &mut Tape, pred: NodeId, labels: &[f64]) -> Result<NodeId> {
    let n = labels.len();
    let y = tape.constant(Tensor2::new(n, 1, labels.to_vec()));
    let one_minus_y =
        tape.constant(Tensor2::new(n, 1, labels.iter().map(|&l| 1.0 - l).collect()));
    let ones = tape.constant(Tensor2::filled(n, 1, 1.0));
    let p = tape.clip(pred, BCE_CLIP, 1.0 - BCE_CLIP);
    let log_p = tape.log(p)?;
    let q = tape.sub(ones, p)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(one_minus_y, log_q)?;
    let ll = tape.add(pos, neg)?;
    let mean = tape.mean_all(ll);
    Ok(tape.scale(mean, -1.0))
}

fn collect_predictions(tape: &Tape, preds: &[NodeId], n: usize) -> Tensor2 {
    let l = preds.len();
    let mut out = Tensor2::zeros(n, l);
    for (j, &p) in preds.iter().enumerate() {
        let col = tape.value(p);
        for r in 0..n {
            out.set(r, j, col.get(r, 0));
        }
    }
    out
}
