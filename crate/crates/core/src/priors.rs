//! Global-knowledge priors: the mixture-of-experts behavior-mode network
//! conditioning the user prior, and the side-feature network conditioning the
//! item prior.

use crate::embeddings::{EmbeddingTable, ParamStore, TableKind};
use crate::encoder::{DiagGaussian, GaussianHead, MlpHead};
use crate::error::Result;
use crate::numerics::{NodeId, ParamId, Rng, Tape, Tensor2, stream};

/// Expert-pool sizes and widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeConfig {
    /// Number of shared experts.
    pub num_shared: usize,
    /// Number of scenario-specific experts.
    pub num_specific: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.num_shared < 1 || self.num_specific < 1 {
            return Err(crate::error::GsvrError::Config(
                "expert counts must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Mean pooling over a gathered behavior sequence laid out as
/// [n*width x d]; padding rows beyond each count are excluded. A batch with
/// no behaviors at all (width 0) pools to zeros.
pub fn aggregate_sequence(
    tape: &mut Tape,
    gathered: Option<NodeId>,
    width: usize,
    counts: &[usize],
    dim: usize,
) -> Result<NodeId> {
    match gathered {
        Some(x) if width > 0 => tape.segment_mean(x, width, counts),
        _ => Ok(tape.constant(Tensor2::zeros(counts.len(), dim))),
    }
}

/// Shared and scenario-specific expert pools with softmax gates, plus the
/// Gaussian head that turns the extracted behavior mode into the user prior.
#[derive(Debug, Clone)]
pub struct BehaviorModeNet {
    pub shared_experts: Vec<MlpHead>,
    pub specific_experts: Vec<MlpHead>,
    pub gate_shared_w: ParamId,
    pub gate_shared_b: ParamId,
    pub gate_specific_w: ParamId,
    pub gate_specific_b: ParamId,
    pub prior_head: GaussianHead,
    pub moe: MoeConfig,
}

impl BehaviorModeNet {
    /// `prior_in` is the width consumed by the prior head: 2 * expert_out for
    /// the full model, or the pooled-sequence width when experts are bypassed.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        seq_dim: usize,
        scenario_dim: usize,
        moe: MoeConfig,
        prior_in: usize,
        head_hidden: usize,
        latent: usize,
    ) -> Result<Self> {
        moe.validate()?;
        let mut shared_experts = Vec::with_capacity(moe.num_shared);
        for i in 0..moe.num_shared {
            shared_experts.push(MlpHead::new(
                store,
                seed,
                &format!("{name}.expert_shared.{i}"),
                seq_dim,
                moe.expert_hidden,
                moe.expert_out,
            )?);
        }
        let joint_dim = seq_dim + scenario_dim;
        let mut specific_experts = Vec::with_capacity(moe.num_specific);
        for i in 0..moe.num_specific {
            specific_experts.push(MlpHead::new(
                store,
                seed,
                &format!("{name}.expert_specific.{i}"),
                joint_dim,
                moe.expert_hidden,
                moe.expert_out,
            )?);
        }
        let dense = |store: &mut ParamStore, suffix: &str, r: usize, c: usize| {
            let full = format!("{name}.{suffix}");
            let mut rng = Rng::named_substream(seed, stream::INIT, &full);
            store.insert(EmbeddingTable::xavier_dense(&full, r, c, &mut rng))
        };
        let zeros = |store: &mut ParamStore, suffix: &str, c: usize| {
            store.insert(EmbeddingTable::zeros(
                &format!("{name}.{suffix}"),
                1,
                c,
                TableKind::Dense,
            ))
        };
        let gate_shared_w = dense(store, "gate_shared.w", seq_dim, moe.num_shared)?;
        let gate_shared_b = zeros(store, "gate_shared.b", moe.num_shared)?;
        let gate_specific_w = dense(store, "gate_specific.w", joint_dim, moe.num_specific)?;
        let gate_specific_b = zeros(store, "gate_specific.b", moe.num_specific)?;
        let prior_head = GaussianHead::new(
            store,
            seed,
            &format!("{name}.prior"),
            prior_in,
            head_hidden,
            latent,
        )?;
        Ok(BehaviorModeNet {
            shared_experts,
            specific_experts,
            gate_shared_w,
            gate_shared_b,
            gate_specific_w,
            gate_specific_b,
            prior_head,
            moe,
        })
    }

    /// Gate-weighted mixture of one expert pool.
    fn mixture(
        &self,
        tape: &mut Tape,
        experts: &[MlpHead],
        gate_w: ParamId,
        gate_b: ParamId,
        input: NodeId,
    ) -> Result<NodeId> {
        let w = tape.param(gate_w);
        let b = tape.param(gate_b);
        let logits = tape.linear(input, w, b)?;
        let gates = tape.softmax(logits)?;
        let mut acc: Option<NodeId> = None;
        for (i, expert) in experts.iter().enumerate() {
            let out = expert.forward(tape, input)?;
            let gi = tape.column(gates, i)?;
            let weighted = tape.mul_col(out, gi)?;
            acc = Some(match acc {
                None => weighted,
                Some(prev) => tape.add(prev, weighted)?,
            });
        }
        Ok(acc.expect("at least one expert"))
    }

    /// Behavior mode b = (sum_i a_ci E_ci(h)) (+) (sum_i a_si E_si(h (+) s)),
    /// output width 2 * expert_out.
    pub fn behavior_mode(&self, tape: &mut Tape, h: NodeId, s_emb: NodeId) -> Result<NodeId> {
        let shared = self.mixture(
            tape,
            &self.shared_experts,
            self.gate_shared_w,
            self.gate_shared_b,
            h,
        )?;
        let joint = tape.concat(&[h, s_emb])?;
        let specific = self.mixture(
            tape,
            &self.specific_experts,
            self.gate_specific_w,
            self.gate_specific_b,
            joint,
        )?;
        tape.concat(&[shared, specific])
    }

    /// User prior Gaussian from the extracted behavior mode (or from the
    /// pooled sequence directly in the expert-free variant).
    pub fn user_prior(&self, tape: &mut Tape, mode: NodeId) -> Result<DiagGaussian> {
        self.prior_head.gaussian(tape, mode)
    }

    /// Ids of the expert and gate parameters (excludes the prior head).
    pub fn expert_gate_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for e in self.shared_experts.iter().chain(self.specific_experts.iter()) {
            ids.extend(e.param_ids());
        }
        ids.extend([
            self.gate_shared_w,
            self.gate_shared_b,
            self.gate_specific_w,
            self.gate_specific_b,
        ]);
        ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.expert_gate_param_ids();
        ids.extend(self.prior_head.param_ids());
        ids
    }
}

/// Item prior network over concatenated scenario-specific and shared
/// side-feature embeddings.
#[derive(Debug, Clone)]
pub struct SidePriorNet {
    pub head: GaussianHead,
}

impl SidePriorNet {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        side_dim: usize,
        hidden: usize,
        latent: usize,
    ) -> Result<Self> {
        Ok(SidePriorNet {
            head: GaussianHead::new(store, seed, name, 2 * side_dim, hidden, latent)?,
        })
    }

    pub fn item_prior(&self, tape: &mut Tape, c_s: NodeId, c: NodeId) -> Result<DiagGaussian> {
        let joint = tape.concat(&[c_s, c])?;
        self.head.gaussian(tape, joint)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::kl_diag;
    use crate::numerics::{finite_diff, grads_close, Gradients, ParamsMut};

    #[test]
    fn aggregate_single_behavior_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor2::from_rows(&[vec![1.0, -2.0, 3.0]]));
        let h = aggregate_sequence(&mut tape, Some(x), 1, &[1], 3).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn aggregate_opposite_vectors_cancel() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor2::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]));
        let h = aggregate_sequence(&mut tape, Some(x), 2, &[2], 2).unwrap();
        assert!(tape.value(h).max_abs_diff(&Tensor2::zeros(1, 2)) < 1e-15);
    }

    #[test]
    fn aggregate_empty_sequence_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let h = aggregate_sequence(&mut tape, None, 0, &[0, 0], 4).unwrap();
        assert_eq!(tape.value(h).shape(), (2, 4));
        assert!(tape.value(h).iter().all(|&v| v == 0.0));
    }

    fn small_net(store: &mut ParamStore, moe: MoeConfig) -> BehaviorModeNet {
        BehaviorModeNet::new(
            store,
            7,
            "bm",
            3,
            2,
            moe,
            2 * moe.expert_out,
            5,
            3,
        )
        .unwrap()
    }

    #[test]
    fn single_expert_degenerates_to_concat() {
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 1,
            num_specific: 1,
            expert_hidden: 4,
            expert_out: 2,
        };
        let net = small_net(&mut store, moe);
        let mut rng = Rng::new(4);
        let h_val = rng.normal_tensor(2, 3);
        let s_val = rng.normal_tensor(2, 2);
        let mut tape = Tape::new(&store);
        let h = tape.constant(h_val.clone());
        let s = tape.constant(s_val.clone());
        let b = net.behavior_mode(&mut tape, h, s).unwrap();
        // With one expert per pool the gate is [1]; output is E_c(h) (+) E_s(h (+) s).
        let ec = net.shared_experts[0].forward(&mut tape, h).unwrap();
        let jo = tape.concat(&[h, s]).unwrap();
        let es = net.specific_experts[0].forward(&mut tape, jo).unwrap();
        let want = tape.concat(&[ec, es]).unwrap();
        assert!(tape.value(b).max_abs_diff(tape.value(want)) < 1e-12);
        assert_eq!(tape.value(b).cols(), 2 * moe.expert_out);
    }

    #[test]
    fn gate_weights_sum_to_one() {
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 3,
            num_specific: 2,
            expert_hidden: 4,
            expert_out: 2,
        };
        let net = small_net(&mut store, moe);
        let mut rng = Rng::new(12);
        let mut tape = Tape::new(&store);
        let h = tape.constant(rng.normal_tensor(5, 3));
        let w = tape.param(net.gate_shared_w);
        let b = tape.param(net.gate_shared_b);
        let logits = tape.linear(h, w, b).unwrap();
        let gates = tape.softmax(logits).unwrap();
        for r in 0..5 {
            let sum: f64 = tape.value(gates).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(tape.value(gates).row(r).iter().all(|&v| v >= 0.0));
        }
        assert_eq!(tape.value(gates).cols(), moe.num_shared);
    }

    #[test]
    fn behavior_mode_matches_hand_computed_mixture() {
        // Freeze experts to fixed linear maps and set gate logits by hand.
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 2,
            num_specific: 2,
            expert_hidden: 2,
            expert_out: 2,
        };
        let net = BehaviorModeNet::new(&mut store, 1, "bm", 2, 1, moe, 4, 3, 2).unwrap();

        // Expert k computes relu(x W1) W2 with W1 = I scaled, W2 = I, bias 0.
        // Shared expert 0: doubles; shared expert 1: triples.
        let set = |store: &mut ParamStore, id: ParamId, vals: &[f64]| {
            store.values_mut(id).copy_from_slice(vals);
        };
        for (i, scale) in [(0usize, 2.0f64), (1, 3.0)] {
            let e = &net.shared_experts[i];
            set(&mut store, e.w1, &[scale, 0.0, 0.0, scale]);
            set(&mut store, e.b1, &[0.0, 0.0]);
            set(&mut store, e.w2, &[1.0, 0.0, 0.0, 1.0]);
            set(&mut store, e.b2, &[0.0, 0.0]);
        }
        // Specific experts: input is h (+) s, 3 wide; map to first two coords
        // times a scale.
        for (i, scale) in [(0usize, 1.0f64), (1, -1.0)] {
            let e = &net.specific_experts[i];
            set(&mut store, e.w1, &[scale, 0.0, 0.0, scale, 0.0, 0.0]);
            set(&mut store, e.b1, &[0.0, 0.0]);
            set(&mut store, e.w2, &[1.0, 0.0, 0.0, 1.0]);
            set(&mut store, e.b2, &[0.0, 0.0]);
        }
        // Gate logits: shared prefers expert 0 with logit ln(3) vs 0
        // -> weights 0.75 / 0.25. Specific gate: zeros -> 0.5 / 0.5.
        set(&mut store, net.gate_shared_w, &[0.0, 0.0, 0.0, 0.0]);
        set(&mut store, net.gate_shared_b, &[3f64.ln(), 0.0]);
        set(&mut store, net.gate_specific_w, &[0.0; 6]);
        set(&mut store, net.gate_specific_b, &[0.0, 0.0]);

        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor2::from_rows(&[vec![1.0, 2.0]]));
        let s = tape.constant(Tensor2::from_rows(&[vec![0.5]]));
        let b = net.behavior_mode(&mut tape, h, s).unwrap();
        // Shared: 0.75 * 2h + 0.25 * 3h = 2.25 h (h positive so relu passes).
        // Specific on (1,2,0.5): 0.5 * (1,2) + 0.5 * relu(-(1,2)) = (0.5, 1.0).
        let want = Tensor2::from_rows(&[vec![2.25, 4.5, 0.5, 1.0]]);
        assert!(tape.value(b).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn zero_initialized_prior_head_gives_standard_normal() {
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 2,
            num_specific: 2,
            expert_hidden: 4,
            expert_out: 2,
        };
        let net = small_net(&mut store, moe);
        for id in net.prior_head.param_ids() {
            store.values_mut(id).fill(0.0);
        }
        let mut rng = Rng::new(3);
        let mut tape = Tape::new(&store);
        let mode = tape.constant(rng.normal_tensor(2, 4));
        let prior = net.user_prior(&mut tape, mode).unwrap();
        assert!(tape.value(prior.mean).iter().all(|&v| v == 0.0));
        assert!(tape.value(prior.std).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_inputs_give_identical_priors() {
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 2,
            num_specific: 2,
            expert_hidden: 4,
            expert_out: 2,
        };
        let net = small_net(&mut store, moe);
        let mut rng = Rng::new(8);
        let seq = rng.normal_tensor(1, 3);
        let scen = rng.normal_tensor(1, 2);
        // Two rows with the same pooled sequence and scenario embedding.
        let h = Tensor2::from_rows(&[seq.row(0).to_vec(), seq.row(0).to_vec()]);
        let s = Tensor2::from_rows(&[scen.row(0).to_vec(), scen.row(0).to_vec()]);
        let mut tape = Tape::new(&store);
        let hn = tape.constant(h);
        let sn = tape.constant(s);
        let mode = net.behavior_mode(&mut tape, hn, sn).unwrap();
        let prior = net.user_prior(&mut tape, mode).unwrap();
        let mv = tape.value(prior.mean);
        let sv = tape.value(prior.std);
        assert_eq!(mv.row(0), mv.row(1));
        assert_eq!(sv.row(0), sv.row(1));
    }

    #[test]
    fn prior_head_gradients_pass_finite_difference() {
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 2,
            num_specific: 1,
            expert_hidden: 3,
            expert_out: 2,
        };
        let net = small_net(&mut store, moe);
        let ids = net.param_ids();
        let mut rng = Rng::new(15);
        let h_val = rng.normal_tensor(2, 3);
        let s_val = rng.normal_tensor(2, 2);
        let run = |s: &ParamStore| -> Result<(f64, Option<Gradients>)> {
            let mut tape = Tape::new(s);
            let h = tape.constant(h_val.clone());
            let sc = tape.constant(s_val.clone());
            let mode = net.behavior_mode(&mut tape, h, sc)?;
            let prior = net.user_prior(&mut tape, mode)?;
            let both = tape.concat(&[prior.mean, prior.std])?;
            let sq = tape.mul(both, both)?;
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), Some(grads)))
        };
        let (_, grads) = run(&store).unwrap();
        let grads = grads.unwrap();
        let fd = finite_diff(&mut store, &ids, |s| run(s).map(|x| x.0), 1e-5).unwrap();
        for &id in &ids {
            let (r, c) = (fd[&id].rows(), fd[&id].cols());
            assert!(
                grads_close(&grads.dense(id, r, c), &fd[&id], 1e-4, 1e-6),
                "param {id:?}"
            );
        }
    }

    #[test]
    fn item_prior_zero_init_and_determinism() {
        let mut store = ParamStore::new();
        let net = SidePriorNet::new(&mut store, 2, "side", 3, 4, 2).unwrap();
        for id in net.param_ids() {
            store.values_mut(id).fill(0.0);
        }
        let mut rng = Rng::new(6);
        let cs = rng.normal_tensor(2, 3);
        let c = rng.normal_tensor(2, 3);
        let mut tape = Tape::new(&store);
        let csn = tape.constant(cs.clone());
        let cn = tape.constant(c.clone());
        let prior = net.item_prior(&mut tape, csn, cn).unwrap();
        assert!(tape.value(prior.mean).iter().all(|&v| v == 0.0));
        assert!(tape.value(prior.std).iter().all(|&v| v == 1.0));

        // Items sharing side features in a scenario share a prior.
        let mut store2 = ParamStore::new();
        let net2 = SidePriorNet::new(&mut store2, 23, "side", 3, 4, 2).unwrap();
        let same_cs = Tensor2::from_rows(&[cs.row(0).to_vec(), cs.row(0).to_vec()]);
        let same_c = Tensor2::from_rows(&[c.row(0).to_vec(), c.row(0).to_vec()]);
        let mut tape2 = Tape::new(&store2);
        let a = tape2.constant(same_cs);
        let b = tape2.constant(same_c);
        let p = net2.item_prior(&mut tape2, a, b).unwrap();
        assert_eq!(tape2.value(p.mean).row(0), tape2.value(p.mean).row(1));
        assert_eq!(tape2.value(p.std).row(0), tape2.value(p.std).row(1));
    }

    #[test]
    fn item_prior_gradients_pass_finite_difference() {
        let mut store = ParamStore::new();
        let net = SidePriorNet::new(&mut store, 3, "side", 2, 4, 2).unwrap();
        let ids = net.param_ids();
        let mut rng = Rng::new(9);
        let cs = rng.normal_tensor(3, 2);
        let c = rng.normal_tensor(3, 2);
        let run = |s: &ParamStore| -> Result<(f64, Option<Gradients>)> {
            let mut tape = Tape::new(s);
            let a = tape.constant(cs.clone());
            let b = tape.constant(c.clone());
            let prior = net.item_prior(&mut tape, a, b)?;
            let both = tape.concat(&[prior.mean, prior.std])?;
            let sq = tape.mul(both, both)?;
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), Some(grads)))
        };
        let (_, grads) = run(&store).unwrap();
        let grads = grads.unwrap();
        let fd = finite_diff(&mut store, &ids, |s| run(s).map(|x| x.0), 1e-5).unwrap();
        for &id in &ids {
            let (r, c2) = (fd[&id].rows(), fd[&id].cols());
            assert!(grads_close(&grads.dense(id, r, c2), &fd[&id], 1e-4, 1e-6));
        }
    }

    /// Sequences differing in one element should induce closer priors than
    /// disjoint sequences, most of the time. Uses a net trained briefly to a
    /// smooth target; an untrained net has no such guarantee.
    #[test]
    fn similar_sequences_give_closer_priors() {
        let mut store = ParamStore::new();
        let moe = MoeConfig {
            num_shared: 2,
            num_specific: 2,
            expert_hidden: 6,
            expert_out: 4,
        };
        let dim = 4;
        let net = BehaviorModeNet::new(&mut store, 77, "bm", dim, dim, moe, 8, 6, 4).unwrap();
        let mut rng = Rng::substream(99, stream::EVAL);

        // Fit the prior to track the pooled sequence (mean -> h/2, std -> 1).
        let hyper = crate::embeddings::AdamHyper::default();
        let mut train_rng = Rng::substream(99, stream::INIT);
        for _ in 0..400 {
            let h_val = train_rng.normal_tensor(8, dim);
            let s_val = train_rng.normal_tensor(8, dim);
            let grads = {
                let mut tape = Tape::new(&store);
                let h = tape.constant(h_val.clone());
                let s = tape.constant(s_val);
                let mode = net.behavior_mode(&mut tape, h, s).unwrap();
                let prior = net.user_prior(&mut tape, mode).unwrap();
                let target = tape.scale(h, 0.5);
                let dm = tape.sub(prior.mean, target).unwrap();
                let dm2 = tape.mul(dm, dm).unwrap();
                let ds = tape.add_scalar(prior.std, -1.0);
                let ds2 = tape.mul(ds, ds).unwrap();
                let err = tape.add(dm2, ds2).unwrap();
                let loss = tape.mean_all(err);
                tape.backward(loss).unwrap()
            };
            store.adam_step(&grads, &hyper, 0.01);
        }
        let mut hits = 0;
        let trials = 100;
        for _ in 0..trials {
            // Pool of random behavior embeddings and one scenario embedding.
            let pool: Vec<Vec<f64>> = (0..30)
                .map(|_| (0..dim).map(|_| rng.normal()).collect())
                .collect();
            let scen: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let mean_of = |idxs: &[usize]| -> Vec<f64> {
                let mut m = vec![0.0; dim];
                for &i in idxs {
                    for (a, b) in m.iter_mut().zip(pool[i].iter()) {
                        *a += b / idxs.len() as f64;
                    }
                }
                m
            };
            let base: Vec<usize> = (0..10).collect();
            let mut near = base.clone();
            near[4] = 10; // one of ten behaviors replaced
            let far: Vec<usize> = (10..20).collect();

            let kl_between = |a: &[f64], b: &[f64], store: &ParamStore| -> f64 {
                let mut tape = Tape::new(store);
                let ha = tape.constant(Tensor2::new(1, dim, a.to_vec()));
                let hb = tape.constant(Tensor2::new(1, dim, b.to_vec()));
                let sn = tape.constant(Tensor2::new(1, dim, scen.clone()));
                let ma = net.behavior_mode(&mut tape, ha, sn).unwrap();
                let mb = net.behavior_mode(&mut tape, hb, sn).unwrap();
                let pa = net.user_prior(&mut tape, ma).unwrap();
                let pb = net.user_prior(&mut tape, mb).unwrap();
                let kl = kl_diag(&mut tape, &pa, &pb).unwrap();
                tape.value(kl).item()
            };
            let h_base = mean_of(&base);
            let kl_near = kl_between(&h_base, &mean_of(&near), &store);
            let kl_far = kl_between(&h_base, &mean_of(&far), &store);
            if kl_near <= kl_far {
                hits += 1;
            }
        }
        assert!(hits >= 90, "only {hits}/{trials} trials ordered correctly");
    }
}
