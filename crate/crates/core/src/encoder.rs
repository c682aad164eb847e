//! Variational posterior machinery: networks mapping embeddings to diagonal
//! Gaussians, reparameterized sampling, and closed-form KL divergences.

use crate::embeddings::{EmbeddingTable, ParamStore};
use crate::error::Result;
use crate::numerics::{NodeId, ParamId, Rng, Tape, stream};

/// Log-variance outputs are clamped to +-LOGVAR_CLIP before exponentiation,
/// so standard deviations live in [e^-5, e^5].
pub const LOGVAR_CLIP: f64 = 10.0;

/// Diagonal Gaussian as a pair of tape nodes (mean and strictly positive std).
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: NodeId,
    pub std: NodeId,
}

/// Two-layer perceptron: linear, relu, linear.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        let dense = |store: &mut ParamStore, suffix: &str, r: usize, c: usize| {
            let full = format!("{name}.{suffix}");
            let mut rng = Rng::named_substream(seed, stream::INIT, &full);
            store.insert(EmbeddingTable::xavier_dense(&full, r, c, &mut rng))
        };
        let zeros = |store: &mut ParamStore, suffix: &str, c: usize| {
            let full = format!("{name}.{suffix}");
            store.insert(EmbeddingTable::zeros(
                &full,
                1,
                c,
                crate::embeddings::TableKind::Dense,
            ))
        };
        Ok(MlpHead {
            w1: dense(store, "w1", d_in, hidden)?,
            b1: zeros(store, "b1", hidden)?,
            w2: dense(store, "w2", hidden, d_out)?,
            b2: zeros(store, "b2", d_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let h = tape.linear(x, w1, b1)?;
        let h = tape.relu(h)?;
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        tape.linear(h, w2, b2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Mean head plus log-variance head producing a diagonal Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean_head: MlpHead,
    pub logvar_head: MlpHead,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        d_in: usize,
        hidden: usize,
        latent: usize,
    ) -> Result<Self> {
        Ok(GaussianHead {
            mean_head: MlpHead::new(store, seed, &format!("{name}.mean"), d_in, hidden, latent)?,
            logvar_head: MlpHead::new(
                store,
                seed,
                &format!("{name}.logvar"),
                d_in,
                hidden,
                latent,
            )?,
        })
    }

    pub fn gaussian(&self, tape: &mut Tape, x: NodeId) -> Result<DiagGaussian> {
        let mean = self.mean_head.forward(tape, x)?;
        let logvar = self.logvar_head.forward(tape, x)?;
        let clipped = tape.clip(logvar, -LOGVAR_CLIP, LOGVAR_CLIP);
        let half = tape.scale(clipped, 0.5);
        let std = tape.exp(half)?;
        Ok(DiagGaussian { mean, std })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.mean_head.param_ids();
        ids.extend(self.logvar_head.param_ids());
        ids
    }
}

/// Posterior encoder for one entity type: embedding in, Gaussian out.
/// Heads are shared across scenarios; scenario specificity enters through
/// the scenario-keyed input embedding.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub head: GaussianHead,
}

impl EncoderNet {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        embed_dim: usize,
        hidden: usize,
        latent: usize,
    ) -> Result<Self> {
        Ok(EncoderNet {
            head: GaussianHead::new(store, seed, name, embed_dim, hidden, latent)?,
        })
    }

    pub fn encode(&self, tape: &mut Tape, e: NodeId) -> Result<DiagGaussian> {
        self.head.gaussian(tape, e)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }
}

/// mean + std (.) eps, with eps entering as a constant leaf.
pub fn reparam_sample(tape: &mut Tape, g: &DiagGaussian, eps: NodeId) -> Result<NodeId> {
    let scaled = tape.mul(g.std, eps)?;
    tape.add(g.mean, scaled)
}

/// Per-row KL(q || p) of diagonal Gaussians, [n x 1]:
/// sum_d [ ln(p.std/q.std) + (q.std^2 + (q.mean - p.mean)^2) / (2 p.std^2) - 1/2 ].
pub fn kl_diag(tape: &mut Tape, q: &DiagGaussian, p: &DiagGaussian) -> Result<NodeId> {
    let lq = tape.log(q.std)?;
    let lp = tape.log(p.std)?;
    let log_ratio = tape.sub(lp, lq)?;
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.mul(dm, dm)?;
    let qs2 = tape.mul(q.std, q.std)?;
    let num = tape.add(qs2, dm2)?;
    let ps2 = tape.mul(p.std, p.std)?;
    let den = tape.scale(ps2, 2.0);
    let ratio = tape.div(num, den)?;
    let elem = tape.add(log_ratio, ratio)?;
    let elem = tape.add_scalar(elem, -0.5);
    Ok(tape.row_sum(elem))
}

/// Per-row KL(q || N(0, I)), [n x 1], via the specialized form
/// 1/2 sum_d (mu^2 + sigma^2 - ln sigma^2 - 1).
pub fn kl_to_standard(tape: &mut Tape, q: &DiagGaussian) -> Result<NodeId> {
    let m2 = tape.mul(q.mean, q.mean)?;
    let s2 = tape.mul(q.std, q.std)?;
    let ls = tape.log(q.std)?;
    let two_ls = tape.scale(ls, 2.0);
    let sum = tape.add(m2, s2)?;
    let sum = tape.sub(sum, two_ls)?;
    let sum = tape.add_scalar(sum, -1.0);
    let half = tape.scale(sum, 0.5);
    Ok(tape.row_sum(half))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff, grads_close, Gradients, ParamsMut, Tensor2};

    fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            store.values_mut(id).fill(0.0);
        }
    }

    fn const_gaussian(tape: &mut Tape, mean: &[f64], std: &[f64]) -> DiagGaussian {
        let m = tape.constant(Tensor2::new(1, mean.len(), mean.to_vec()));
        let s = tape.constant(Tensor2::new(1, std.len(), std.to_vec()));
        DiagGaussian { mean: m, std: s }
    }

    #[test]
    fn zero_initialized_encoder_gives_standard_normal() {
        let mut store = ParamStore::new();
        let enc = EncoderNet::new(&mut store, 1, "enc.user", 6, 8, 4).unwrap();
        let ids = enc.param_ids();
        zero_params(&mut store, &ids);
        let mut tape = Tape::new(&store);
        let mut rng = Rng::new(2);
        let e = tape.constant(rng.normal_tensor(3, 6));
        let g = enc.encode(&mut tape, e).unwrap();
        assert!(tape.value(g.mean).max_abs_diff(&Tensor2::zeros(3, 4)) < 1e-15);
        assert!(tape.value(g.std).max_abs_diff(&Tensor2::filled(3, 4, 1.0)) < 1e-15);
    }

    #[test]
    fn logvar_clip_bounds_std() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let big = tape.constant(Tensor2::from_rows(&[vec![100.0, -100.0]]));
        let clipped = tape.clip(big, -LOGVAR_CLIP, LOGVAR_CLIP);
        let half = tape.scale(clipped, 0.5);
        let std = tape.exp(half).unwrap();
        assert!((tape.value(std).get(0, 0) - 5f64.exp()).abs() < 1e-12);
        assert!((tape.value(std).get(0, 1) - (-5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn encoder_gradients_pass_finite_difference() {
        let mut store = ParamStore::new();
        let enc = EncoderNet::new(&mut store, 3, "enc.item", 4, 6, 3).unwrap();
        let ids = enc.param_ids();
        let mut rng = Rng::new(5);
        let e = rng.normal_tensor(2, 4);
        let run = |s: &ParamStore| -> Result<(f64, Option<Gradients>)> {
            let mut tape = Tape::new(s);
            let x = tape.constant(e.clone());
            let g = enc.encode(&mut tape, x)?;
            // Scalarize mean and std together.
            let both = tape.concat(&[g.mean, g.std])?;
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
                grads_close(&grads.dense(id, r, c), &fd[&id], 1e-4, 1e-7),
                "param {id:?}"
            );
        }
    }

    #[test]
    fn reparam_eps_zero_is_mean() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = const_gaussian(&mut tape, &[3.0, -1.0], &[2.0, 0.5]);
        let eps = tape.constant(Tensor2::zeros(1, 2));
        let s = reparam_sample(&mut tape, &g, eps).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, -1.0]);
    }

    #[test]
    fn reparam_unit_eps() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = const_gaussian(&mut tape, &[3.0], &[2.0]);
        let eps = tape.constant(Tensor2::scalar(1.0));
        let s = reparam_sample(&mut tape, &g, eps).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);
    }

    #[test]
    fn reparam_shape_mismatch_errors() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let g = const_gaussian(&mut tape, &[0.0, 0.0], &[1.0, 1.0]);
        let eps = tape.constant(Tensor2::zeros(1, 3));
        assert!(reparam_sample(&mut tape, &g, eps).is_err());
    }

    #[test]
    fn reparam_sample_mean_clt() {
        let store = ParamStore::new();
        let mut rng = Rng::substream(8, stream::EVAL);
        let n = 100_000;
        let mean = [0.7, -0.2];
        let std = [1.3, 0.4];
        let mut sums = [0.0f64; 2];
        let mut tape = Tape::new(&store);
        let g = const_gaussian(&mut tape, &mean, &std);
        for _ in 0..n {
            let eps = tape.constant(rng.normal_tensor(1, 2));
            let s = reparam_sample(&mut tape, &g, eps).unwrap();
            sums[0] += tape.value(s).get(0, 0);
            sums[1] += tape.value(s).get(0, 1);
        }
        for j in 0..2 {
            let got = sums[j] / n as f64;
            let bound = 4.0 * std[j] / (n as f64).sqrt();
            assert!((got - mean[j]).abs() < bound, "coord {j}: {got} vs {}", mean[j]);
        }
    }

    #[test]
    fn reparam_gradients_are_affine() {
        // d sample / d mean = 1, d sample / d std = eps, checked by FD.
        let mut store = ParamStore::new();
        let mid = store
            .insert(EmbeddingTable::from_weights(
                "m",
                1,
                2,
                vec![0.3, -0.8],
                crate::embeddings::TableKind::Dense,
            ))
            .unwrap();
        let sid = store
            .insert(EmbeddingTable::from_weights(
                "s",
                1,
                2,
                vec![1.1, 0.6],
                crate::embeddings::TableKind::Dense,
            ))
            .unwrap();
        let eps = Tensor2::from_rows(&[vec![0.9, -1.7]]);
        let run = |s: &ParamStore| -> Result<(f64, Option<Gradients>)> {
            let mut tape = Tape::new(s);
            let g = DiagGaussian {
                mean: tape.param(mid),
                std: tape.param(sid),
            };
            let e = tape.constant(eps.clone());
            let sample = reparam_sample(&mut tape, &g, e)?;
            let loss = tape.mean_all(sample);
            let loss = tape.scale(loss, 2.0); // sum over the two coords
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), Some(grads)))
        };
        let (_, grads) = run(&store).unwrap();
        let grads = grads.unwrap();
        assert!(grads
            .dense(mid, 1, 2)
            .max_abs_diff(&Tensor2::filled(1, 2, 1.0))
            < 1e-12);
        assert!(grads.dense(sid, 1, 2).max_abs_diff(&eps) < 1e-12);
        let fd = finite_diff(&mut store, &[mid, sid], |s| run(s).map(|x| x.0), 1e-5).unwrap();
        assert!(grads_close(&grads.dense(mid, 1, 2), &fd[&mid], 1e-4, 1e-7));
        assert!(grads_close(&grads.dense(sid, 1, 2), &fd[&sid], 1e-4, 1e-7));
    }

    #[test]
    fn kl_identical_gaussians_is_zero() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = const_gaussian(&mut tape, &[0.4, -1.2, 2.0], &[0.9, 1.5, 0.3]);
        let p = const_gaussian(&mut tape, &[0.4, -1.2, 2.0], &[0.9, 1.5, 0.3]);
        let kl = kl_diag(&mut tape, &q, &p).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn kl_hand_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        // KL(N(1,1) || N(0,1)) = 1/2.
        let q = const_gaussian(&mut tape, &[1.0], &[1.0]);
        let p = const_gaussian(&mut tape, &[0.0], &[1.0]);
        let kl = kl_diag(&mut tape, &q, &p).unwrap();
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-12);
        // KL(N(0,4) || N(0,1)) = -ln 2 + 2 - 1/2.
        let q2 = const_gaussian(&mut tape, &[0.0], &[2.0]);
        let kl2 = kl_diag(&mut tape, &q2, &p).unwrap();
        let want = -(2f64.ln()) + 2.0 - 0.5;
        assert!((tape.value(kl2).item() - want).abs() < 1e-12);
    }

    /// Monte-Carlo estimate of E_q[ln q(x) - ln p(x)] as an independent
    /// oracle for the closed form.
    fn mc_kl(mean_q: &[f64], std_q: &[f64], mean_p: &[f64], std_p: &[f64], n: usize, rng: &mut Rng) -> f64 {
        let d = mean_q.len();
        let mut acc = 0.0;
        for _ in 0..n {
            let mut lq = 0.0;
            let mut lp = 0.0;
            for j in 0..d {
                let x = mean_q[j] + std_q[j] * rng.normal();
                let zq = (x - mean_q[j]) / std_q[j];
                let zp = (x - mean_p[j]) / std_p[j];
                lq += -0.5 * zq * zq - std_q[j].ln();
                lp += -0.5 * zp * zp - std_p[j].ln();
            }
            acc += lq - lp;
        }
        acc / n as f64
    }

    #[test]
    fn kl_closed_form_agrees_with_monte_carlo() {
        let mut rng = Rng::substream(21, stream::EVAL);
        let store = ParamStore::new();
        for trial in 0..3 {
            let d = 3;
            let mean_q: Vec<f64> = (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let std_q: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.5, 2.0)).collect();
            let mean_p: Vec<f64> = (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let std_p: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.5, 2.0)).collect();
            let mut tape = Tape::new(&store);
            let q = const_gaussian(&mut tape, &mean_q, &std_q);
            let p = const_gaussian(&mut tape, &mean_p, &std_p);
            let kl_node = kl_diag(&mut tape, &q, &p).unwrap();
            let closed = tape.value(kl_node).item();
            let mc = mc_kl(&mean_q, &std_q, &mean_p, &std_p, 200_000, &mut rng);
            assert!(
                (closed - mc).abs() <= 0.02 * closed.abs().max(0.05),
                "trial {trial}: closed {closed} vs mc {mc}"
            );
        }
    }

    #[test]
    fn kl_to_standard_values() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let std_normal = const_gaussian(&mut tape, &[0.0, 0.0], &[1.0, 1.0]);
        let kl = kl_to_standard(&mut tape, &std_normal).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-15);

        // All standard except one coordinate with mean 2: KL = mu^2 / 2 = 2.
        let shifted = const_gaussian(&mut tape, &[0.0, 2.0, 0.0], &[1.0, 1.0, 1.0]);
        let kl2 = kl_to_standard(&mut tape, &shifted).unwrap();
        assert!((tape.value(kl2).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_to_standard_matches_general_form() {
        let mut rng = Rng::new(31);
        let store = ParamStore::new();
        for _ in 0..20 {
            let d = 4;
            let mean: Vec<f64> = (0..d).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let std: Vec<f64> = (0..d).map(|_| rng.uniform_in(0.2, 3.0)).collect();
            let mut tape = Tape::new(&store);
            let q = const_gaussian(&mut tape, &mean, &std);
            let p = const_gaussian(&mut tape, &vec![0.0; d], &vec![1.0; d]);
            let special_node = kl_to_standard(&mut tape, &q).unwrap();
            let special = tape.value(special_node).item();
            let general_node = kl_diag(&mut tape, &q, &p).unwrap();
            let general = tape.value(general_node).item();
            assert!((special - general).abs() < 1e-12);
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::embeddings::ParamStore;
    use crate::numerics::Tensor2;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn kl_nonnegative_zero_iff_equal(
            mean_q in proptest::collection::vec(-3.0f64..3.0, 3),
            std_q in proptest::collection::vec(0.2f64..3.0, 3),
            mean_p in proptest::collection::vec(-3.0f64..3.0, 3),
            std_p in proptest::collection::vec(0.2f64..3.0, 3),
        ) {
            let store = ParamStore::new();
            let mut tape = Tape::new(&store);
            let q = DiagGaussian {
                mean: tape.constant(Tensor2::new(1, 3, mean_q.clone())),
                std: tape.constant(Tensor2::new(1, 3, std_q.clone())),
            };
            let p = DiagGaussian {
                mean: tape.constant(Tensor2::new(1, 3, mean_p.clone())),
                std: tape.constant(Tensor2::new(1, 3, std_p.clone())),
            };
            let kl = kl_diag(&mut tape, &q, &p).unwrap();
            let v = tape.value(kl).item();
            prop_assert!(v >= -1e-12);
            let equal = mean_q == mean_p && std_q == std_p;
            if equal {
                prop_assert!(v.abs() < 1e-12);
            }
        }
    }
}
