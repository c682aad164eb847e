//! Datasets: synthetic multi-scenario generation with controllable sparsity,
//! interaction-log ingestion, splits, and deterministic batching.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GsvrError, Result};
use crate::numerics::Rng;

/// One impression record. All ids are contiguous internal indices; the owning
/// [`Dataset`] keeps the raw-id maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub scenario: usize,
    /// Item ids, most recent last; may be empty.
    pub behaviors: Vec<usize>,
    /// Fixed slot count of categorical side features.
    pub side: Vec<usize>,
    pub label: u8,
    pub session: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = GsvrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(GsvrError::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Vocabulary sizes the model is built against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub num_users: usize,
    pub num_items: usize,
    pub num_scenarios: usize,
    pub side_vocab_sizes: Vec<usize>,
}

/// Interactions plus vocabularies and raw-id maps (internal index -> raw id).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub num_scenarios: usize,
    pub side_vocab_sizes: Vec<usize>,
    pub user_raw: Vec<u64>,
    pub item_raw: Vec<u64>,
    pub scenario_raw: Vec<u64>,
    pub side_raw: Vec<Vec<u64>>,
    pub split: Option<Split>,
}

/// Split assignment by hashing (user, session): 8/1/1 train/valid/test.
/// Whole sessions land in one split, so session groups never straddle splits.
pub fn split_of(user: usize, session: u64) -> Split {
    let mut x = (user as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ session.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ 0xA5A5_5A5A_1234_5678;
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    match x % 10 {
        8 => Split::Valid,
        9 => Split::Test,
        _ => Split::Train,
    }
}

impl Dataset {
    pub fn vocabs(&self) -> Vocabs {
        Vocabs {
            num_users: self.num_users,
            num_items: self.num_items,
            num_scenarios: self.num_scenarios,
            side_vocab_sizes: self.side_vocab_sizes.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// The subset belonging to one split. Vocabularies are inherited.
    pub fn subset(&self, split: Split) -> Dataset {
        let interactions = self
            .interactions
            .iter()
            .filter(|it| split_of(it.user, it.session) == split)
            .cloned()
            .collect();
        Dataset {
            interactions,
            split: Some(split),
            num_users: self.num_users,
            num_items: self.num_items,
            num_scenarios: self.num_scenarios,
            side_vocab_sizes: self.side_vocab_sizes.clone(),
            user_raw: self.user_raw.clone(),
            item_raw: self.item_raw.clone(),
            scenario_raw: self.scenario_raw.clone(),
            side_raw: self.side_raw.clone(),
        }
    }

    /// Assemble a padded batch from interaction indices.
    pub fn make_batch(&self, idxs: &[usize]) -> Batch {
        let n = idxs.len();
        let num_slots = self.side_vocab_sizes.len();
        let mut batch = Batch {
            users: Vec::with_capacity(n),
            items: Vec::with_capacity(n),
            scenarios: Vec::with_capacity(n),
            sides: vec![Vec::with_capacity(n); num_slots],
            behaviors: Vec::new(),
            behavior_counts: Vec::with_capacity(n),
            seq_width: 0,
            labels: Vec::with_capacity(n),
            group_keys: Vec::with_capacity(n),
            pad_id: self.num_items,
        };
        let width = idxs
            .iter()
            .map(|&i| self.interactions[i].behaviors.len())
            .max()
            .unwrap_or(0);
        batch.seq_width = width;
        batch.behaviors.reserve(n * width);
        for &i in idxs {
            let it = &self.interactions[i];
            batch.users.push(it.user);
            batch.items.push(it.item);
            batch.scenarios.push(it.scenario);
            for (slot, v) in it.side.iter().enumerate() {
                batch.sides[slot].push(*v);
            }
            batch.behaviors.extend_from_slice(&it.behaviors);
            batch
                .behaviors
                .extend(std::iter::repeat(batch.pad_id).take(width - it.behaviors.len()));
            batch.behavior_counts.push(it.behaviors.len());
            batch.labels.push(it.label as f64);
            batch
                .group_keys
                .push(((it.user as u64) << 32) | (it.session & 0xFFFF_FFFF));
        }
        batch
    }
}

/// A model-ready batch: ids column-wise, behavior sequences padded to the
/// batch maximum with an explicit padding id excluded from pooling.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub scenarios: Vec<usize>,
    /// One vector per side-feature slot.
    pub sides: Vec<Vec<usize>>,
    /// n * seq_width flattened padded behavior ids.
    pub behaviors: Vec<usize>,
    pub behavior_counts: Vec<usize>,
    pub seq_width: usize,
    pub labels: Vec<f64>,
    /// (user, session) combined key for grouped metrics.
    pub group_keys: Vec<u64>,
    pub pad_id: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Batch iteration order.
pub enum BatchOrder<'a> {
    Sequential,
    Shuffled(&'a mut Rng),
}

/// Iterator over batches; the final partial batch is included.
pub fn batches<'d>(
    dataset: &'d Dataset,
    batch_size: usize,
    order: BatchOrder<'_>,
) -> impl Iterator<Item = Batch> + 'd {
    assert!(batch_size >= 1);
    let mut idxs: Vec<usize> = (0..dataset.len()).collect();
    if let BatchOrder::Shuffled(rng) = order {
        rng.shuffle(&mut idxs);
    }
    let chunks: Vec<Vec<usize>> = idxs.chunks(batch_size).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |c| dataset.make_batch(&c))
}

/// Controls for the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_scenarios: usize,
    /// Dimension of the ground-truth latent vectors.
    pub latent_dim_true: usize,
    /// Per-scenario sampling weights; sparse scenarios get small weight.
    pub scenario_skew: Vec<f64>,
    /// Scale of the logistic noise on the label threshold. Zero makes labels
    /// a deterministic function of the latents.
    pub noise: f64,
    /// Maximum behaviors per user (actual lengths vary, down to empty).
    pub seq_len: usize,
    pub sessions_per_user: usize,
    pub impressions_per_session: usize,
    /// Cluster counts per side-feature slot (items in a cluster share the id).
    pub side_categories: Vec<usize>,
    /// Scale of the structured part of each scenario offset (a per-scenario
    /// linear map of the global latent), relative to the global latents.
    pub offset_map_scale: f64,
    /// Scale of the unstructured per-(entity, scenario) offset noise.
    pub offset_noise_scale: f64,
    /// Threshold shift controlling the label base rate.
    pub bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 2000,
            num_items: 2000,
            num_scenarios: 4,
            latent_dim_true: 8,
            scenario_skew: vec![0.7, 0.2, 0.08, 0.02],
            noise: 0.8,
            seq_len: 10,
            sessions_per_user: 10,
            impressions_per_session: 10,
            side_categories: vec![12, 24],
            offset_map_scale: 0.55,
            offset_noise_scale: 0.15,
            bias: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenario_skew.len() != self.num_scenarios {
            return Err(GsvrError::Config(format!(
                "scenario_skew has {} entries for {} scenarios",
                self.scenario_skew.len(),
                self.num_scenarios
            )));
        }
        if self.scenario_skew.iter().any(|&w| w <= 0.0) {
            return Err(GsvrError::Config("skew weights must be positive".into()));
        }
        let total: f64 = self.scenario_skew.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GsvrError::Config(format!(
                "skew weights sum to {total}, expected 1"
            )));
        }
        if self.num_users == 0 || self.num_items == 0 || self.num_scenarios == 0 {
            return Err(GsvrError::Config("empty vocabulary".into()));
        }
        Ok(())
    }

    pub fn total_impressions(&self) -> usize {
        self.num_users * self.sessions_per_user * self.impressions_per_session
    }
}

/// Ground truth and bookkeeping emitted next to a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub seed: u64,
    pub scenario_counts: Vec<usize>,
    pub base_rate: f64,
    pub user_latents: Vec<Vec<f64>>,
    pub item_latents: Vec<Vec<f64>>,
    /// [entity][scenario] -> offset vector.
    pub user_offsets: Vec<Vec<Vec<f64>>>,
    pub item_offsets: Vec<Vec<Vec<f64>>>,
}

fn normal_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal()).collect()
}

/// Lloyd's k-means over item latents; returns a cluster id per item.
/// Deterministic given the rng state.
fn kmeans_labels(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.len();
    let d = points[0].len();
    let mut centroids: Vec<Vec<f64>> = (0..k)
        .map(|_| points[rng.gen_range(n)].clone())
        .collect();
    let mut labels = vec![0usize; n];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let dist: f64 = p
                    .iter()
                    .zip(cen.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            labels[i] = best;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cen, s) in centroids[c].iter_mut().zip(sums[c].iter()) {
                    *cen = s / counts[c] as f64;
                }
            }
        }
    }
    labels
}

/// Generate a synthetic multi-scenario dataset.
///
/// Ground truth: global user/item latents plus small per-scenario offsets.
/// Each offset is a per-scenario linear map of the entity's global latent
/// plus independent noise, so global structure informs the scenario-specific
/// deviations. Side features cluster items in latent space; behaviors come
/// from each user's top-affinity items globally. The label is a thresholded
/// latent utility: 1 when margin + noise * logistic > 0, which makes the
/// marginal click probability sigmoid(margin / noise) and labels
/// deterministic when noise is zero.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, SynthMeta)> {
    cfg.validate()?;
    let mut rng = Rng::substream(seed, crate::numerics::stream::DATA);
    let d = cfg.latent_dim_true;
    let m = cfg.num_scenarios;

    let user_latents: Vec<Vec<f64>> = (0..cfg.num_users).map(|_| normal_vec(&mut rng, d)).collect();
    let item_latents: Vec<Vec<f64>> = (0..cfg.num_items).map(|_| normal_vec(&mut rng, d)).collect();

    // Per-scenario linear maps, entries scaled so ||A g|| ~ ||g||.
    let col_scale = 1.0 / (d as f64).sqrt();
    let mk_maps = |rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| (0..d * d).map(|_| rng.normal() * col_scale).collect())
            .collect()
    };
    let user_maps = mk_maps(&mut rng);
    let item_maps = mk_maps(&mut rng);

    let apply_map = |map: &[f64], g: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| (0..d).map(|j| map[i * d + j] * g[j]).sum())
            .collect()
    };
    let mk_offsets = |latents: &[Vec<f64>], maps: &[Vec<f64>], rng: &mut Rng| {
        latents
            .iter()
            .map(|g| {
                (0..m)
                    .map(|s| {
                        let mapped = apply_map(&maps[s], g);
                        mapped
                            .iter()
                            .map(|&v| cfg.offset_map_scale * v + cfg.offset_noise_scale * rng.normal())
                            .collect::<Vec<f64>>()
                    })
                    .collect::<Vec<Vec<f64>>>()
            })
            .collect::<Vec<Vec<Vec<f64>>>>()
    };
    let user_offsets = mk_offsets(&user_latents, &user_maps, &mut rng);
    let item_offsets = mk_offsets(&item_latents, &item_maps, &mut rng);

    // Side features: cluster item latents, one clustering per slot.
    let side_labels: Vec<Vec<usize>> = cfg
        .side_categories
        .iter()
        .map(|&k| kmeans_labels(&item_latents, k.min(cfg.num_items), 10, &mut rng))
        .collect();

    // Behavior pools: each user's top-affinity items under the global latents.
    let pool_size = 50.min(cfg.num_items);
    let behavior_pools: Vec<Vec<usize>> = user_latents
        .iter()
        .map(|u| {
            let mut scored: Vec<(f64, usize)> = item_latents
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                    (-dot, i)
                })
                .collect();
            scored.select_nth_unstable_by(pool_size - 1, |a, b| {
                a.partial_cmp(b).unwrap()
            });
            scored[..pool_size].iter().map(|&(_, i)| i).collect()
        })
        .collect();

    // Per-user behavior sequences of varying length (possibly empty).
    let behaviors: Vec<Vec<usize>> = (0..cfg.num_users)
        .map(|u| {
            let len = rng.gen_range(cfg.seq_len + 1);
            (0..len)
                .map(|_| behavior_pools[u][rng.gen_range(pool_size)])
                .collect()
        })
        .collect();

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut interactions = Vec::with_capacity(cfg.total_impressions());
    let mut scenario_counts = vec![0usize; m];
    let mut positives = 0usize;
    for user in 0..cfg.num_users {
        for session in 0..cfg.sessions_per_user {
            for _ in 0..cfg.impressions_per_session {
                let scenario = rng.categorical(&cfg.scenario_skew);
                let item = rng.gen_range(cfg.num_items);
                let mut dot = 0.0;
                for j in 0..d {
                    let uu = user_latents[user][j] + user_offsets[user][scenario][j];
                    let vv = item_latents[item][j] + item_offsets[item][scenario][j];
                    dot += uu * vv;
                }
                let margin = dot * inv_sqrt_d - cfg.bias;
                let utility = if cfg.noise == 0.0 {
                    margin
                } else {
                    margin + cfg.noise * rng.logistic()
                };
                let label = u8::from(utility > 0.0);
                positives += label as usize;
                scenario_counts[scenario] += 1;
                interactions.push(Interaction {
                    user,
                    item,
                    scenario,
                    behaviors: behaviors[user].clone(),
                    side: side_labels.iter().map(|labels| labels[item]).collect(),
                    label,
                    session: session as u64,
                });
            }
        }
    }
    let base_rate = positives as f64 / interactions.len().max(1) as f64;

    let dataset = Dataset {
        interactions,
        num_users: cfg.num_users,
        num_items: cfg.num_items,
        num_scenarios: m,
        side_vocab_sizes: cfg
            .side_categories
            .iter()
            .map(|&k| k.min(cfg.num_items))
            .collect(),
        user_raw: (0..cfg.num_users as u64).collect(),
        item_raw: (0..cfg.num_items as u64).collect(),
        scenario_raw: (0..m as u64).collect(),
        side_raw: cfg
            .side_categories
            .iter()
            .map(|&k| (0..k.min(cfg.num_items) as u64).collect())
            .collect(),
        split: None,
    };
    let meta = SynthMeta {
        config: cfg.clone(),
        seed,
        scenario_counts,
        base_rate,
        user_latents,
        item_latents,
        user_offsets,
        item_offsets,
    };
    Ok((dataset, meta))
}

/// First-seen-order remapping of raw ids to contiguous internal indices.
#[derive(Debug, Default)]
struct IdMap {
    map: HashMap<u64, usize>,
    raw: Vec<u64>,
}

impl IdMap {
    fn intern(&mut self, raw: u64) -> usize {
        if let Some(&id) = self.map.get(&raw) {
            return id;
        }
        let id = self.raw.len();
        self.map.insert(raw, id);
        self.raw.push(raw);
        id
    }
}

fn parse_u64(field: &str, what: &str, line: usize) -> Result<u64> {
    field.trim().parse::<u64>().map_err(|_| GsvrError::Parse {
        line,
        detail: format!("{what} is not a nonnegative integer: '{field}'"),
    })
}

/// Parse the tab-separated interaction-log format:
/// `user \t item \t scenario \t label \t session \t behaviors \t side_features`
/// with comma-separated lists in the last two columns and optional
/// `#`-prefixed header lines. Vocabularies are built in first-seen order.
pub fn load_log(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut scenarios = IdMap::default();
    let mut sides: Vec<IdMap> = Vec::new();
    let mut num_slots: Option<usize> = None;
    let mut interactions = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 7 {
            return Err(GsvrError::Parse {
                line: lineno,
                detail: format!("expected 7 tab-separated fields, found {}", fields.len()),
            });
        }
        let user = users.intern(parse_u64(fields[0], "user_id", lineno)?);
        let item = items.intern(parse_u64(fields[1], "item_id", lineno)?);
        let scenario = scenarios.intern(parse_u64(fields[2], "scenario_id", lineno)?);
        let label_raw = parse_u64(fields[3], "label", lineno)?;
        if label_raw > 1 {
            return Err(GsvrError::Parse {
                line: lineno,
                detail: format!("label must be 0 or 1, found {label_raw}"),
            });
        }
        let session = parse_u64(fields[4], "session_id", lineno)?;
        let behaviors: Vec<usize> = if fields[5].is_empty() {
            Vec::new()
        } else {
            fields[5]
                .split(',')
                .map(|b| Ok(items.intern(parse_u64(b, "behavior item", lineno)?)))
                .collect::<Result<_>>()?
        };
        let side_fields: Vec<&str> = if fields[6].is_empty() {
            Vec::new()
        } else {
            fields[6].split(',').collect()
        };
        match num_slots {
            None => {
                num_slots = Some(side_fields.len());
                sides = (0..side_fields.len()).map(|_| IdMap::default()).collect();
            }
            Some(k) if k != side_fields.len() => {
                return Err(GsvrError::Parse {
                    line: lineno,
                    detail: format!(
                        "expected {k} side features, found {}",
                        side_fields.len()
                    ),
                });
            }
            _ => {}
        }
        let side = side_fields
            .iter()
            .enumerate()
            .map(|(slot, f)| Ok(sides[slot].intern(parse_u64(f, "side feature", lineno)?)))
            .collect::<Result<_>>()?;
        interactions.push(Interaction {
            user,
            item,
            scenario,
            behaviors,
            side,
            label: label_raw as u8,
            session,
        });
    }
    if interactions.is_empty() {
        return Err(GsvrError::Data(format!(
            "no interactions in {}",
            path.display()
        )));
    }
    Ok(Dataset {
        interactions,
        num_users: users.raw.len(),
        num_items: items.raw.len(),
        num_scenarios: scenarios.raw.len(),
        side_vocab_sizes: sides.iter().map(|s| s.raw.len()).collect(),
        user_raw: users.raw,
        item_raw: items.raw,
        scenario_raw: scenarios.raw,
        side_raw: sides.into_iter().map(|s| s.raw).collect(),
        split: None,
    })
}

/// Write the interaction-log format, mapping internal ids back to raw ids.
pub fn write_log(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_log_to(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn write_log_to<W: Write>(w: &mut W, dataset: &Dataset) -> Result<()> {
    writeln!(
        w,
        "# user_id\titem_id\tscenario_id\tlabel\tsession_id\tbehaviors\tside_features"
    )?;
    for it in &dataset.interactions {
        let behaviors = it
            .behaviors
            .iter()
            .map(|&b| dataset.item_raw[b].to_string())
            .collect::<Vec<_>>()
            .join(",");
        let side = it
            .side
            .iter()
            .enumerate()
            .map(|(slot, &v)| dataset.side_raw[slot][v].to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            dataset.user_raw[it.user],
            dataset.item_raw[it.item],
            dataset.scenario_raw[it.scenario],
            it.label,
            it.session,
            behaviors,
            side
        )?;
    }
    Ok(())
}
