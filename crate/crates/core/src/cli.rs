//! Run configuration and the command implementations behind the CLI verbs.
//!
//! Configuration is flat `key=value` text with `#` comments; every key has a
//! command-line flag of the same name (hyphenated). Commands print
//! line-delimited structured objects on standard output; timestamps are
//! confined to a single header line so reruns are byte-comparable.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint;
use crate::data::{self, Dataset, Split, SynthConfig, Vocabs};
use crate::embeddings::{AdamHyper, ParamStore};
use crate::error::{GsvrError, Result};
use crate::eval::MetricsReport;
use crate::model::{GsvrConfig, GsvrModel, Variant};
use crate::numerics::{stream, Rng};
use crate::priors::MoeConfig;
use crate::quantize;

/// Everything a run needs: model and optimizer hyper-parameters, data source,
/// and the synthetic-generator controls. Field names are the config keys.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub variant: Variant,
    pub mc_samples: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub mlp_hidden: Vec<usize>,
    pub experts_shared: usize,
    pub experts_specific: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Interaction-log path; synthetic data is used when absent.
    pub data: Option<PathBuf>,
    pub synth: bool,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_scenarios: usize,
    pub synth_skew: Vec<f64>,
    pub synth_noise: f64,
    pub synth_seq_len: usize,
    pub synth_sessions_per_user: usize,
    pub synth_impressions_per_session: usize,
    pub synth_latent_dim: usize,
    pub synth_side_categories: Vec<usize>,
    pub synth_offset_map_scale: f64,
    pub synth_offset_noise_scale: f64,
    pub synth_bias: f64,
    /// Vocabulary sizes pinned at training time so checkpoints can be loaded
    /// without re-reading the data.
    pub vocab_users: Option<usize>,
    pub vocab_items: Option<usize>,
    pub vocab_scenarios: Option<usize>,
    pub vocab_side: Option<Vec<usize>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: 42,
            epochs: 10,
            batch_size: 512,
            alpha: 0.6,
            variant: Variant::Full,
            mc_samples: 5,
            embed_dim: 40,
            latent_dim: 40,
            encoder_hidden: 64,
            mlp_hidden: vec![256, 128, 64],
            experts_shared: 2,
            experts_specific: 2,
            expert_hidden: 64,
            expert_out: 40,
            lr: 0.001,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            data: None,
            synth: true,
            synth_users: synth.num_users,
            synth_items: synth.num_items,
            synth_scenarios: synth.num_scenarios,
            synth_skew: synth.scenario_skew,
            synth_noise: synth.noise,
            synth_seq_len: synth.seq_len,
            synth_sessions_per_user: synth.sessions_per_user,
            synth_impressions_per_session: synth.impressions_per_session,
            synth_latent_dim: synth.latent_dim_true,
            synth_side_categories: synth.side_categories,
            synth_offset_map_scale: synth.offset_map_scale,
            synth_offset_noise_scale: synth.offset_noise_scale,
            synth_bias: synth.bias,
            vocab_users: None,
            vocab_items: None,
            vocab_scenarios: None,
            vocab_side: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        GsvrError::Config(format!("invalid value '{value}' for key '{key}'"))
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse::<T>(key, s))
        .collect()
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "variant" => self.variant = Variant::from_str(value.trim())?,
            "mc_samples" => self.mc_samples = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse_list(key, value)?,
            "experts_shared" => self.experts_shared = parse(key, value)?,
            "experts_specific" => self.experts_specific = parse(key, value)?,
            "expert_hidden" => self.expert_hidden = parse(key, value)?,
            "expert_out" => self.expert_out = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "synth" => self.synth = parse(key, value)?,
            "synth_users" => self.synth_users = parse(key, value)?,
            "synth_items" => self.synth_items = parse(key, value)?,
            "synth_scenarios" => self.synth_scenarios = parse(key, value)?,
            "synth_skew" => self.synth_skew = parse_list(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "synth_seq_len" => self.synth_seq_len = parse(key, value)?,
            "synth_sessions_per_user" => self.synth_sessions_per_user = parse(key, value)?,
            "synth_impressions_per_session" => {
                self.synth_impressions_per_session = parse(key, value)?
            }
            "synth_latent_dim" => self.synth_latent_dim = parse(key, value)?,
            "synth_side_categories" => self.synth_side_categories = parse_list(key, value)?,
            "synth_offset_map_scale" => self.synth_offset_map_scale = parse(key, value)?,
            "synth_offset_noise_scale" => self.synth_offset_noise_scale = parse(key, value)?,
            "synth_bias" => self.synth_bias = parse(key, value)?,
            "vocab_users" => self.vocab_users = Some(parse(key, value)?),
            "vocab_items" => self.vocab_items = Some(parse(key, value)?),
            "vocab_scenarios" => self.vocab_scenarios = Some(parse(key, value)?),
            "vocab_side" => self.vocab_side = Some(parse_list(key, value)?),
            other => {
                return Err(GsvrError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Overlay `key=value` lines from a config file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GsvrError::Parse {
                line: lineno + 1,
                detail: format!("expected key=value, found '{line}'"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Serialize every key, suitable for re-loading with [`apply_file`].
    pub fn to_config_text(&self) -> String {
        let join_usize = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let join_f64 =
            |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "variant={}", self.variant.as_str());
        let _ = writeln!(s, "mc_samples={}", self.mc_samples);
        let _ = writeln!(s, "embed_dim={}", self.embed_dim);
        let _ = writeln!(s, "latent_dim={}", self.latent_dim);
        let _ = writeln!(s, "encoder_hidden={}", self.encoder_hidden);
        let _ = writeln!(s, "mlp_hidden={}", join_usize(&self.mlp_hidden));
        let _ = writeln!(s, "experts_shared={}", self.experts_shared);
        let _ = writeln!(s, "experts_specific={}", self.experts_specific);
        let _ = writeln!(s, "expert_hidden={}", self.expert_hidden);
        let _ = writeln!(s, "expert_out={}", self.expert_out);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "decay={}", self.decay);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "adam_eps={}", self.adam_eps);
        if let Some(p) = &self.data {
            let _ = writeln!(s, "data={}", p.display());
        }
        let _ = writeln!(s, "synth={}", self.synth);
        let _ = writeln!(s, "synth_users={}", self.synth_users);
        let _ = writeln!(s, "synth_items={}", self.synth_items);
        let _ = writeln!(s, "synth_scenarios={}", self.synth_scenarios);
        let _ = writeln!(s, "synth_skew={}", join_f64(&self.synth_skew));
        let _ = writeln!(s, "synth_noise={}", self.synth_noise);
        let _ = writeln!(s, "synth_seq_len={}", self.synth_seq_len);
        let _ = writeln!(s, "synth_sessions_per_user={}", self.synth_sessions_per_user);
        let _ = writeln!(
            s,
            "synth_impressions_per_session={}",
            self.synth_impressions_per_session
        );
        let _ = writeln!(s, "synth_latent_dim={}", self.synth_latent_dim);
        let _ = writeln!(
            s,
            "synth_side_categories={}",
            join_usize(&self.synth_side_categories)
        );
        let _ = writeln!(s, "synth_offset_map_scale={}", self.synth_offset_map_scale);
        let _ = writeln!(
            s,
            "synth_offset_noise_scale={}",
            self.synth_offset_noise_scale
        );
        let _ = writeln!(s, "synth_bias={}", self.synth_bias);
        if let Some(v) = self.vocab_users {
            let _ = writeln!(s, "vocab_users={v}");
        }
        if let Some(v) = self.vocab_items {
            let _ = writeln!(s, "vocab_items={v}");
        }
        if let Some(v) = self.vocab_scenarios {
            let _ = writeln!(s, "vocab_scenarios={v}");
        }
        if let Some(v) = &self.vocab_side {
            let _ = writeln!(s, "vocab_side={}", join_usize(v));
        }
        s
    }

    pub fn to_gsvr_config(&self) -> GsvrConfig {
        GsvrConfig {
            embed_dim: self.embed_dim,
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden,
            mlp_hidden: self.mlp_hidden.clone(),
            alpha: self.alpha,
            mc_samples: self.mc_samples,
            variant: self.variant,
            moe: MoeConfig {
                num_shared: self.experts_shared,
                num_specific: self.experts_specific,
                expert_hidden: self.expert_hidden,
                expert_out: self.expert_out,
            },
        }
    }

    pub fn to_synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_users: self.synth_users,
            num_items: self.synth_items,
            num_scenarios: self.synth_scenarios,
            latent_dim_true: self.synth_latent_dim,
            scenario_skew: self.synth_skew.clone(),
            noise: self.synth_noise,
            seq_len: self.synth_seq_len,
            sessions_per_user: self.synth_sessions_per_user,
            impressions_per_session: self.synth_impressions_per_session,
            side_categories: self.synth_side_categories.clone(),
            offset_map_scale: self.synth_offset_map_scale,
            offset_noise_scale: self.synth_offset_noise_scale,
            bias: self.synth_bias,
        }
    }

    pub fn to_adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            decay: self.decay,
        }
    }

    pub fn record_vocabs(&mut self, vocabs: &Vocabs) {
        self.vocab_users = Some(vocabs.num_users);
        self.vocab_items = Some(vocabs.num_items);
        self.vocab_scenarios = Some(vocabs.num_scenarios);
        self.vocab_side = Some(vocabs.side_vocab_sizes.clone());
    }

    pub fn pinned_vocabs(&self) -> Option<Vocabs> {
        Some(Vocabs {
            num_users: self.vocab_users?,
            num_items: self.vocab_items?,
            num_scenarios: self.vocab_scenarios?,
            side_vocab_sizes: self.vocab_side.clone()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.to_gsvr_config().validate()?;
        self.to_adam_hyper().validate()?;
        if self.epochs == 0 {
            return Err(GsvrError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(GsvrError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// The dataset this run trains/evaluates on.
    pub fn resolve_dataset(&self) -> Result<Dataset> {
        if let Some(path) = &self.data {
            data::load_log(path)
        } else if self.synth {
            let (dataset, _) = data::generate_synthetic(&self.to_synth_config(), self.seed)?;
            Ok(dataset)
        } else {
            Err(GsvrError::Config(
                "no data source: set data=PATH or synth=true".into(),
            ))
        }
    }
}

/// Single-line run header; the only place a timestamp appears.
pub fn header_line(command: &str, cfg: &RunConfig) -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!(
        "{{\"event\":\"run_start\",\"command\":\"{command}\",\"seed\":{},\"variant\":\"{}\",\"alpha\":{},\"timestamp\":{now}}}",
        cfg.seed,
        cfg.variant.as_str(),
        cfg.alpha
    )
}

/// `gen-data`: write the interaction log and its ground-truth sidecar.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let synth = cfg.to_synth_config();
    synth.validate()?;
    let (dataset, meta) = data::generate_synthetic(&synth, cfg.seed)?;
    fs::create_dir_all(out)?;
    let log_path = out.join("data.log");
    let meta_path = out.join("data.meta.json");
    data::write_log(&log_path, &dataset)?;
    let meta_json = serde_json::to_string(&meta)
        .map_err(|e| GsvrError::Data(format!("metadata serialization: {e}")))?;
    fs::write(&meta_path, meta_json)?;
    Ok((log_path, meta_path))
}

/// Artifacts of a finished training run.
pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub run_cfg: PathBuf,
    pub metrics_path: PathBuf,
    /// Per-epoch metric lines plus the final train-split line.
    pub metric_lines: Vec<String>,
    /// Overall test-split report, computed on request by `eval`.
    pub final_train_report: MetricsReport,
}

/// Core training loop shared by `train`, `ablate`, and `sweep-alpha`.
pub fn run_training(cfg: &RunConfig, dataset: &Dataset, out: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let train = dataset.subset(Split::Train);
    let valid = dataset.subset(Split::Valid);
    if train.is_empty() {
        return Err(GsvrError::Data("train split is empty".into()));
    }
    let mut store = ParamStore::new();
    let model = GsvrModel::build(
        cfg.to_gsvr_config(),
        dataset.vocabs(),
        cfg.seed,
        &mut store,
    )?;
    let hyper = cfg.to_adam_hyper();
    let mut data_rng = Rng::substream(cfg.seed, stream::DATA);
    let mut mc_rng = Rng::substream(cfg.seed, stream::MC_NOISE);
    let mut lines = Vec::new();
    for epoch in 0..cfg.epochs {
        let avg = model.train_epoch(
            &mut store,
            &train,
            &hyper,
            cfg.batch_size,
            epoch,
            &mut data_rng,
            &mut mc_rng,
        )?;
        avg.validate_finite()?;
        let scored = model.score_dataset(&store, &valid, cfg.batch_size)?;
        let mut report = MetricsReport::from_scores(epoch, "valid", &scored);
        report.loss = Some(avg);
        lines.push(report.to_json_line());
    }
    // Final train-split report so `eval` on the train split can be checked
    // against the training log.
    let scored = model.score_dataset(&store, &train, cfg.batch_size)?;
    let final_train_report =
        MetricsReport::from_scores(cfg.epochs.saturating_sub(1), "train", &scored);
    lines.push(final_train_report.to_json_line());

    let checkpoint_path = out.join("checkpoint.gsvr");
    checkpoint::write_checkpoint(&checkpoint_path, &store)?;
    let mut resolved = cfg.clone();
    resolved.record_vocabs(&dataset.vocabs());
    let run_cfg_path = out.join("run.cfg");
    fs::write(&run_cfg_path, resolved.to_config_text())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut f = fs::File::create(&metrics_path)?;
    for line in &lines {
        writeln!(f, "{line}")?;
    }
    Ok(TrainResult {
        checkpoint: checkpoint_path,
        run_cfg: run_cfg_path,
        metrics_path,
        metric_lines: lines,
        final_train_report,
    })
}

/// `train`: resolve data, run the loop, emit metric lines.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainResult> {
    let dataset = cfg.resolve_dataset()?;
    run_training(cfg, &dataset, out)
}

/// Rebuild a model from a resolved run config and checkpoint. When a dataset
/// is supplied its vocabularies are cross-checked against the pinned ones.
pub fn load_model(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    dataset: Option<&Dataset>,
) -> Result<(GsvrModel, ParamStore)> {
    let vocabs = match (cfg.pinned_vocabs(), dataset) {
        (Some(pinned), Some(d)) => {
            let dv = d.vocabs();
            if pinned != dv {
                let table = if pinned.num_users != dv.num_users {
                    "emb.user_shared"
                } else if pinned.num_items != dv.num_items {
                    "emb.item_shared"
                } else if pinned.num_scenarios != dv.num_scenarios {
                    "emb.scenario"
                } else {
                    "emb.side_shared.0"
                };
                return Err(GsvrError::Compat {
                    table: table.to_string(),
                    detail: format!("checkpoint vocabs {pinned:?} vs dataset vocabs {dv:?}"),
                });
            }
            pinned
        }
        (Some(pinned), None) => pinned,
        (None, Some(d)) => d.vocabs(),
        (None, None) => {
            return Err(GsvrError::Config(
                "config has no pinned vocabularies and no dataset was given".into(),
            ));
        }
    };
    let mut store = ParamStore::new();
    let model = GsvrModel::build(cfg.to_gsvr_config(), vocabs, cfg.seed, &mut store)?;
    let tables = checkpoint::read_checkpoint(checkpoint_path)?;
    store.load_raw(tables)?;
    Ok((model, store))
}

/// `eval`: inference-mode scoring of one split.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    split: Split,
) -> Result<MetricsReport> {
    let dataset = cfg.resolve_dataset()?;
    let (model, store) = load_model(cfg, checkpoint_path, Some(&dataset))?;
    let subset = dataset.subset(split);
    if subset.is_empty() {
        return Err(GsvrError::Data(format!("{split} split is empty")));
    }
    let scored = model.score_dataset(&store, &subset, cfg.batch_size)?;
    let mut report =
        MetricsReport::from_scores(cfg.epochs.saturating_sub(1), &split.to_string(), &scored);
    report.loss = None;
    Ok(report)
}

/// One ablation row: a variant and its test metrics.
pub struct AblateRow {
    pub variant: Variant,
    pub report: MetricsReport,
}

/// `ablate`: train every variant with identical seed and data, evaluate on
/// the test split.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblateRow>> {
    let dataset = cfg.resolve_dataset()?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let vout = out.join(variant.as_str());
        let result = run_training(&vcfg, &dataset, &vout)?;
        let (model, store) = load_model(&vcfg, &result.checkpoint, Some(&dataset))?;
        let test = dataset.subset(Split::Test);
        let scored = model.score_dataset(&store, &test, vcfg.batch_size)?;
        let report = MetricsReport::from_scores(vcfg.epochs - 1, "test", &scored);
        rows.push(AblateRow { variant, report });
    }
    Ok(rows)
}

/// Render the ablation comparison table: variants x scenarios.
pub fn ablate_table(rows: &[AblateRow]) -> String {
    let mut s = String::new();
    let scenario_ids: Vec<u64> = rows
        .first()
        .map(|r| r.report.scenarios.iter().map(|sc| sc.scenario).collect())
        .unwrap_or_default();
    let _ = write!(s, "{:<10} {:>9}", "variant", "overall");
    for sid in &scenario_ids {
        let _ = write!(s, " {:>9}", format!("s{sid}"));
    }
    let _ = writeln!(s);
    for row in rows {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "n/a".to_string(),
        };
        let _ = write!(s, "{:<10} {:>9}", row.variant.as_str(), fmt(row.report.auc));
        for sid in &scenario_ids {
            let auc = row
                .report
                .scenarios
                .iter()
                .find(|sc| sc.scenario == *sid)
                .and_then(|sc| sc.auc);
            let _ = write!(s, " {:>9}", fmt(auc));
        }
        let _ = writeln!(s);
    }
    s
}

/// One sweep row: the KL weight and its test metrics.
pub struct SweepRow {
    pub alpha: f64,
    pub report: MetricsReport,
}

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// `sweep-alpha`: one full train+eval per KL weight, shared seed and data.
pub fn cmd_sweep_alpha(cfg: &RunConfig, alphas: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(GsvrError::Config("alpha grid is empty".into()));
    }
    let dataset = cfg.resolve_dataset()?;
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut acfg = cfg.clone();
        acfg.alpha = alpha;
        let aout = out.join(format!("alpha_{alpha}"));
        let result = run_training(&acfg, &dataset, &aout)?;
        let (model, store) = load_model(&acfg, &result.checkpoint, Some(&dataset))?;
        let test = dataset.subset(Split::Test);
        let scored = model.score_dataset(&store, &test, acfg.batch_size)?;
        let report = MetricsReport::from_scores(acfg.epochs - 1, "test", &scored);
        rows.push(SweepRow { alpha, report });
    }
    Ok(rows)
}

/// Render the sweep table plus the advisory interior-peak line.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>9} {:>9}", "alpha", "auc", "s_gauc");
    let mut best: Option<(f64, f64)> = None;
    for row in rows {
        let auc = row.report.auc.unwrap_or(f64::NAN);
        let sg = row.report.s_gauc.unwrap_or(f64::NAN);
        let _ = writeln!(s, "{:<8} {:>9.4} {:>9.4}", row.alpha, auc, sg);
        if best.is_none() || auc > best.unwrap().1 {
            best = Some((row.alpha, auc));
        }
    }
    if let Some((alpha, auc)) = best {
        let interior = rows.first().map(|r| r.alpha) != Some(alpha)
            && rows.last().map(|r| r.alpha) != Some(alpha);
        let _ = writeln!(
            s,
            "# best alpha={alpha} (auc {auc:.4}); interior peak: {interior}"
        );
    }
    s
}

/// Outcome of `quantize`.
pub struct QuantizeResult {
    pub report: quantize::QuantReport,
    pub quantized_checkpoint: PathBuf,
    pub codes_file: PathBuf,
    /// (before, after) overall test AUC when a dataset was available.
    pub auc_before: Option<f64>,
    pub auc_after: Option<f64>,
}

/// `quantize`: per-row symmetric quantization of the scenario-specific
/// tables only; shared tables and networks are untouched.
pub fn cmd_quantize(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    bits: u32,
    out: &Path,
) -> Result<QuantizeResult> {
    fs::create_dir_all(out)?;
    let dataset = if cfg.data.is_some() || cfg.synth {
        Some(cfg.resolve_dataset()?)
    } else {
        None
    };
    let (model, store) = load_model(cfg, checkpoint_path, dataset.as_ref())?;
    let test = dataset.as_ref().map(|d| d.subset(Split::Test));
    let auc_before = match &test {
        Some(t) if !t.is_empty() => {
            let scored = model.score_dataset(&store, t, cfg.batch_size)?;
            crate::eval::auc(&scored.scores, &scored.labels).ok()
        }
        _ => None,
    };

    let (mut model, mut qstore) = load_model(cfg, checkpoint_path, dataset.as_ref())?;
    let targets = model.scenario_param_ids();
    let (tables, report) = quantize::quantize_scenario_embeddings(&mut qstore, &targets, bits)?;
    let auc_after = match &test {
        Some(t) if !t.is_empty() => {
            let scored = model.score_dataset(&qstore, t, cfg.batch_size)?;
            crate::eval::auc(&scored.scores, &scored.labels).ok()
        }
        _ => None,
    };
    let _ = &mut model;

    let quantized_checkpoint = out.join("quantized.gsvr");
    checkpoint::write_checkpoint(&quantized_checkpoint, &qstore)?;
    let codes_file = out.join("quantized.gsvrq");
    write_codes_file(&codes_file, &tables, bits)?;
    Ok(QuantizeResult {
        report,
        quantized_checkpoint,
        codes_file,
        auc_before,
        auc_after,
    })
}

/// Raw quantized storage: magic "GSVQ", version, bits, then per table the
/// name, shape, f64 scales, and packed integer codes.
fn write_codes_file(path: &Path, tables: &[quantize::QuantizedTable], bits: u32) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(b"GSVQ")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    for t in tables {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.vocab_size as u64).to_le_bytes())?;
        w.write_all(&(t.dim as u64).to_le_bytes())?;
        for &s in &t.scales {
            w.write_all(&s.to_le_bytes())?;
        }
        match &t.codes {
            quantize::Codes::I8(v) => {
                let bytes: Vec<u8> = v.iter().map(|&c| c as u8).collect();
                w.write_all(&bytes)?;
            }
            quantize::Codes::I16(v) => {
                for &c in v {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.mlp_hidden = vec![32, 16];
        cfg.variant = Variant::Uniform;
        cfg.synth_skew = vec![0.5, 0.5];
        cfg.synth_scenarios = 2;
        cfg.record_vocabs(&Vocabs {
            num_users: 10,
            num_items: 20,
            num_scenarios: 2,
            side_vocab_sizes: vec![3, 4],
        });
        let text = cfg.to_config_text();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, &text).unwrap();
        let mut loaded = RunConfig::default();
        loaded.apply_file(&path).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.mlp_hidden, vec![32, 16]);
        assert_eq!(loaded.variant, Variant::Uniform);
        assert_eq!(loaded.pinned_vocabs().unwrap().side_vocab_sizes, vec![3, 4]);
        assert_eq!(loaded.to_config_text(), text);
    }

    #[test]
    fn config_rejects_unknown_key() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("not_a_key", "1").is_err());
        assert!(cfg.set("alpha", "zero").is_err());
    }

    #[test]
    fn config_file_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "# comment\nseed=5\n\nalpha=0.3\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.alpha, 0.3);
    }

    #[test]
    fn header_is_single_line_json() {
        let cfg = RunConfig::default();
        let h = header_line("train", &cfg);
        assert!(!h.contains('\n'));
        let parsed: serde_json::Value = serde_json::from_str(&h).unwrap();
        assert_eq!(parsed["command"], "train");
    }
}
