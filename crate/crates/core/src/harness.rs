//! Experiment orchestration: configs, the warmup / selection / masked-training
//! schedule, multi-seed runs, reports and sweeps.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, calibrate_sigma_with_prefix, LedgerReport, SgmEvent};
use crate::data::{load_csv, load_idx, synth_transfer_task, Dataset, Split, TaskSpec};
use crate::engine::{
    batches_per_epoch, step, train_epoch, DpSgdConfig, LrSchedule, MomentumState, PrivacySession,
    Progress,
};
use crate::error::{Error, ErrorRecord, Result};
use crate::mask::{
    select_mask_bitfit, select_mask_dpsgd_gradients, select_mask_last_layer, select_mask_magnitude,
    select_mask_oracle, select_mask_random, select_mask_sparta, Grouping, GroupingKind, Mask, OracleScore,
    ScoringSetup, SparsityBudget,
};
use crate::model::{ConvSpec, Model, ModelSpec};
use crate::params::ParamVector;
use crate::persist::{write_mask, MaskMeta};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Sparta,
    DpsgdGrad,
    Oracle,
    Mp,
    Random,
    Last,
    Bitfit,
    All,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Sparta,
        Strategy::DpsgdGrad,
        Strategy::Oracle,
        Strategy::Mp,
        Strategy::Random,
        Strategy::Last,
        Strategy::Bitfit,
        Strategy::All,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Sparta => "sparta",
            Strategy::DpsgdGrad => "dpsgd-grad",
            Strategy::Oracle => "oracle",
            Strategy::Mp => "mp",
            Strategy::Random => "random",
            Strategy::Last => "last",
            Strategy::Bitfit => "bitfit",
            Strategy::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| Error::Usage(format!("unknown strategy {s:?}")))
    }

    /// Strategies that spend an epoch scoring data to pick the mask.
    pub fn scores_data(&self) -> bool {
        matches!(self, Strategy::Sparta | Strategy::DpsgdGrad | Strategy::Oracle)
    }
}

/// Epoch plan of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Scoring strategies: warmup, one selection epoch, masked training.
    /// Fixed-mask strategies train every epoch with their mask.
    #[default]
    Standard,
    /// Every strategy follows warmup, selection epoch, masked training; fixed
    /// masks are installed at the selection epoch. Lets trajectories of
    /// different strategies be compared step for step.
    Staged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        #[serde(flatten)]
        task: TaskSpec,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        pretrain_images: Option<PathBuf>,
        #[serde(default)]
        pretrain_labels: Option<PathBuf>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        pretrain: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            task: TaskSpec::default(),
        }
    }
}

/// Architecture without the data-dependent input and output sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArch {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub conv: Option<ConvSpec>,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            hidden: vec![64],
            layer_norm: false,
            conv: None,
        }
    }
}

impl ModelArch {
    pub fn spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            classes,
            hidden: self.hidden.clone(),
            layer_norm: self.layer_norm,
            conv: self.conv.clone(),
        }
    }
}

/// Non-private training on the public split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 100,
            lr: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSource,
    /// Seed of the dataset and of the shared pretrained model.
    pub data_seed: u64,
    pub model: ModelArch,
    pub pretrain: PretrainConfig,
    pub strategy: Strategy,
    pub grouping: GroupingKind,
    pub sparsity: f64,
    /// Target budget; exactly one of `epsilon` and `sigma` must be set.
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: Option<f64>,
    /// Noise multiplier of the selection epoch; defaults to the training one.
    pub mask_sigma: Option<f64>,
    /// Nominal batch size; the Poisson rate is `batch_size / n`.
    pub batch_size: usize,
    pub clip: f64,
    pub lr: f64,
    pub classifier_lr: f64,
    pub momentum: f64,
    pub warmup: f64,
    pub epochs: usize,
    pub mask_epoch: usize,
    pub oracle_score: OracleScore,
    pub schedule: Schedule,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataSource::default(),
            data_seed: 0,
            model: ModelArch::default(),
            pretrain: PretrainConfig::default(),
            strategy: Strategy::Sparta,
            grouping: GroupingKind::Row,
            sparsity: 0.2,
            epsilon: Some(1.0),
            delta: 1e-5,
            sigma: None,
            mask_sigma: None,
            batch_size: 500,
            clip: 1.0,
            lr: 0.01,
            classifier_lr: 0.1,
            momentum: 0.9,
            warmup: 0.02,
            epochs: 50,
            mask_epoch: 10,
            oracle_score: OracleScore::L1,
            schedule: Schedule::Standard,
            seeds: vec![0],
        }
    }
}

impl TrainConfig {
    /// Reads JSON or TOML, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = parse_structured(path, &text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.epsilon, self.sigma) {
            (Some(e), None) if e > 0.0 => {}
            (None, Some(s)) if s >= 0.0 && s.is_finite() => {}
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("set exactly one of epsilon and sigma".into()));
            }
            _ => return Err(Error::Config("epsilon must be positive and sigma nonnegative".into())),
        }
        if let Some(s) = self.mask_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("invalid mask_sigma {s}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        SparsityBudget::new(self.sparsity).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let GroupingKind::Random { block_size: 0 } = self.grouping {
            return Err(Error::Config("random grouping needs block_size > 0".into()));
        }
        self.dp_config(0.5, 1.0).validate()
    }

    fn dp_config(&self, sample_rate: f64, sigma: f64) -> DpSgdConfig {
        DpSgdConfig {
            clip: self.clip,
            noise_multiplier: sigma,
            sample_rate,
            lr: self.lr,
            classifier_lr: self.classifier_lr,
            momentum: self.momentum,
            schedule: LrSchedule::Cosine { warmup: self.warmup },
            epochs: self.epochs,
            mask_epoch: self.mask_epoch,
        }
    }

    /// Whether this run spends epoch `mask_epoch` on selection.
    fn has_selection_epoch(&self) -> bool {
        self.strategy.scores_data() || self.schedule == Schedule::Staged
    }

    /// Grouping actually used by the strategy.
    pub fn effective_grouping(&self) -> GroupingKind {
        match self.strategy {
            Strategy::DpsgdGrad => GroupingKind::Singleton,
            _ => self.grouping,
        }
    }

    /// Training and selection noise multipliers for sampling rate `q`.
    pub fn resolve_noise(&self, q: f64) -> Result<(f64, f64)> {
        let tb = batches_per_epoch(q) as u64;
        let t = self.epochs as u64;
        if let Some(s) = self.sigma {
            return Ok((s, self.mask_sigma.unwrap_or(s)));
        }
        let target = self.epsilon.expect("validated");
        // The oracle is calibrated as if its selection epoch were private so
        // its noise matches the private strategies.
        let selection = self.has_selection_epoch() || self.strategy == Strategy::Oracle;
        match self.mask_sigma {
            Some(ms) if selection => {
                let prefix = [SgmEvent::new(q, ms, tb)?];
                let s = calibrate_sigma_with_prefix(&prefix, q, (t - 1) * tb, target, self.delta)?;
                Ok((s, ms))
            }
            _ => {
                let s = calibrate_sigma(q, t * tb, target, self.delta)?;
                Ok((s, self.mask_sigma.unwrap_or(s)))
            }
        }
    }
}

pub(crate) fn parse_structured<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        Some("json") => serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        _ => Err(Error::Usage(format!("{}: config must end in .json or .toml", path.display()))),
    }
}

/// Fine-tune splits, the model, and the shared pretrained weights.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub model: Model,
    /// Pretrained weights with a zero head; the head is drawn per seed.
    pub pretrained: ParamVector,
    pub planted_dims: Option<Vec<usize>>,
}

impl Prepared {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let (pretrain, train, test, planted) = match &cfg.data {
            DataSource::Synthetic { task } => {
                let t = synth_transfer_task(task, cfg.data_seed)?;
                let planted = (task.planted_fraction > 0.0).then_some(t.planted_dims);
                (Some(t.pretrain), t.train, t.test, planted)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                pretrain_images,
                pretrain_labels,
            } => {
                let mut train = load_idx(train_images, train_labels, Split::FinetuneTrain)?;
                let mut test = load_idx(test_images, test_labels, Split::FinetuneTest)?;
                let stats = train.normalize_fit();
                test.normalize_with(&stats);
                let pretrain = match (pretrain_images, pretrain_labels) {
                    (Some(i), Some(l)) => {
                        let mut p = load_idx(i, l, Split::Pretrain)?;
                        p.normalize_fit();
                        Some(p)
                    }
                    (None, None) => None,
                    _ => return Err(Error::Config("pretrain images and labels must be given together".into())),
                };
                (pretrain, train, test, None)
            }
            DataSource::Csv { train, test, pretrain } => {
                let mut tr = load_csv(train, Split::FinetuneTrain)?;
                let mut te = load_csv(test, Split::FinetuneTest)?;
                let classes = tr.classes.max(te.classes);
                tr.classes = classes;
                te.classes = classes;
                let stats = tr.normalize_fit();
                te.normalize_with(&stats);
                let pre = match pretrain {
                    Some(p) => {
                        let mut p = load_csv(p, Split::Pretrain)?;
                        p.normalize_fit();
                        Some(p)
                    }
                    None => None,
                };
                (pre, tr, te, None)
            }
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if train.dim != test.dim {
            return Err(Error::Config("train and test feature dimensions differ".into()));
        }
        let model = Model::new(cfg.model.spec(train.dim, train.classes))?;
        let pretrained = match &pretrain {
            Some(p) => {
                if p.dim != train.dim {
                    return Err(Error::Config("pretrain feature dimension differs from fine-tune".into()));
                }
                pretrain_body(cfg, p, &model)?
            }
            None => model.init_params(&mut stream(cfg.data_seed, Stream::Init, 0)),
        };
        Ok(Prepared {
            train,
            test,
            model,
            pretrained,
            planted_dims: planted,
        })
    }

    /// Pretrained body with a freshly drawn head for `seed`.
    pub fn initial_params(&self, seed: u64) -> ParamVector {
        let mut p = self.pretrained.clone();
        self.model.reinit_head(&mut p, &mut stream(seed, Stream::Init, 1));
        p
    }
}

/// Trains a model with the pretrain label space non-privately and copies
/// every non-head segment into the fine-tune layout.
fn pretrain_body(cfg: &TrainConfig, data: &Dataset, model: &Model) -> Result<ParamVector> {
    let pre_model = Model::new(cfg.model.spec(data.dim, data.classes))?;
    let mut p = pre_model.init_params(&mut stream(cfg.data_seed, Stream::Init, 0));
    let pc = &cfg.pretrain;
    let mask = Mask::all(pre_model.layout().clone());
    let mut state = MomentumState::new(pre_model.dim());
    let dp = DpSgdConfig {
        lr: pc.lr,
        classifier_lr: pc.lr,
        schedule: LrSchedule::Constant,
        ..DpSgdConfig::default()
    };
    let bs = pc.batch_size.max(1);
    for e in 0..pc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.data_seed, Stream::Pretrain, e as u64));
        for chunk in order.chunks(bs) {
            let g = pre_model.batch_grad(&p, &data.batch(chunk))?;
            step(&mut p, &g, &mask, &dp, Progress { step: 0, total_steps: 1 }, &mut state)?;
        }
    }
    let mut out = ParamVector::zeros(model.layout().clone());
    for seg in model.layout().segments().iter().filter(|s| !s.spec.head) {
        let src = p
            .segment(seg.name())
            .ok_or_else(|| Error::Config(format!("pretrained model lacks segment {}", seg.name())))?;
        out.segment_mut(seg.name()).expect("own segment").copy_from_slice(src);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Select,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-sample loss over the epoch's batches; absent for selection epochs.
    pub train_loss: Option<f64>,
    pub test_accuracy: f64,
    pub epsilon: f64,
    /// Base learning rate times the schedule factor at the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub name: String,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub trainable: usize,
    pub total: usize,
    pub maskable_selected: usize,
    pub layers: Vec<LayerDensity>,
    /// Share of the smaller of {selected, planted} first-layer coordinates
    /// that lie in both, when the task has planted input dimensions.
    pub planted_overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub noise_multiplier: f64,
    pub mask_noise_multiplier: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub ledger: LedgerReport,
    pub batches_drawn: u64,
    /// Every private batch read went through a recorded mechanism.
    pub private: bool,
    pub mask: MaskStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub runs: Vec<SeedReport>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// Largest final epsilon across seeds.
    pub epsilon: f64,
    pub not_dp: bool,
    pub wall_time_secs: f64,
}

/// Everything one seed produced, including artifacts not serialised in the report.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub report: SeedReport,
    pub mask: Mask,
    pub params: ParamVector,
    pub params_old: ParamVector,
    pub ledger: crate::accountant::PrivacyLedger,
}

fn fixed_mask(cfg: &TrainConfig, prep: &Prepared, w_old: &ParamVector, seed: u64) -> Result<Mask> {
    let layout = prep.model.layout().clone();
    let budget = SparsityBudget::new(cfg.sparsity)?;
    let grouping = || -> Result<Arc<Grouping>> {
        Ok(Arc::new(Grouping::new(
            &layout,
            cfg.effective_grouping(),
            &mut stream(seed, Stream::Grouping, 0),
        )?))
    };
    Ok(match cfg.strategy {
        Strategy::Mp => select_mask_magnitude(w_old, grouping()?, &budget)?,
        Strategy::Random => {
            select_mask_random(layout.clone(), grouping()?, &budget, &mut stream(seed, Stream::MaskRandom, 0))?
        }
        Strategy::Last => select_mask_last_layer(layout),
        Strategy::Bitfit => select_mask_bitfit(layout),
        Strategy::All => Mask::all(layout),
        _ => unreachable!("scoring strategies have no fixed mask"),
    })
}

/// Runs one seed of `cfg` on prepared data.
pub fn run_seed(cfg: &TrainConfig, prep: &Prepared, seed: u64) -> Result<SeedOutcome> {
    cfg.validate()?;
    let model = &prep.model;
    let n = prep.train.len();
    let q = (cfg.batch_size as f64 / n as f64).min(1.0);
    let (sigma, mask_sigma) = cfg.resolve_noise(q)?;
    let dp = cfg.dp_config(q, sigma);
    dp.validate()?;
    let tb = batches_per_epoch(q) as u64;
    let total_steps = cfg.epochs as u64 * tb;

    let w_old = prep.initial_params(seed);
    let mut params = w_old.clone();
    let mut session = PrivacySession::new(cfg.delta)?;
    let mut momentum = MomentumState::new(model.dim());
    let selection = cfg.has_selection_epoch();
    let mut mask = if selection {
        select_mask_bitfit(model.layout().clone())
    } else {
        fixed_mask(cfg, prep, &w_old, seed)?
    };

    let mut records = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let batches = session.draw_epoch(&prep.train, q, &mut stream(seed, Stream::Batches, e as u64))?;
        let (phase, loss) = if selection && e == cfg.mask_epoch {
            mask = select(cfg, prep, &params, &w_old, &batches, q, mask_sigma, seed, e, &mut session)?;
            momentum.reset();
            (Phase::Select, None)
        } else {
            let stats = train_epoch(
                model,
                &mut params,
                &batches,
                n,
                &mask,
                &dp,
                e as u64 * tb,
                total_steps,
                &mut momentum,
                &mut session.ledger,
                &mut stream(seed, Stream::TrainNoise, e as u64),
            )?;
            let phase = if selection && e < cfg.mask_epoch { Phase::Warmup } else { Phase::Train };
            (phase, Some(stats.mean_loss))
        };
        records.push(EpochRecord {
            epoch: e,
            phase,
            train_loss: loss,
            test_accuracy: model.evaluate(&params, &prep.test)?,
            epsilon: session.ledger.epsilon()?,
            lr: cfg.lr * dp.schedule.factor((e as u64 + 1) * tb - 1, total_steps),
        });
    }

    let stats = mask_stats(&mask, prep);
    let private = session.is_accounted() && cfg.strategy != Strategy::Oracle;
    let report = SeedReport {
        seed,
        noise_multiplier: sigma,
        mask_noise_multiplier: mask_sigma,
        final_accuracy: records.last().map(|r| r.test_accuracy).unwrap_or(0.0),
        epochs: records,
        ledger: session.ledger.report()?,
        batches_drawn: session.batches_drawn(),
        private,
        mask: stats,
    };
    Ok(SeedOutcome {
        report,
        mask,
        params,
        params_old: w_old,
        ledger: session.ledger,
    })
}

#[allow(clippy::too_many_arguments)]
fn select(
    cfg: &TrainConfig,
    prep: &Prepared,
    params: &ParamVector,
    w_old: &ParamVector,
    batches: &[crate::model::Batch],
    q: f64,
    mask_sigma: f64,
    seed: u64,
    epoch: usize,
    session: &mut PrivacySession,
) -> Result<Mask> {
    let model = &prep.model;
    let setup = ScoringSetup {
        clip: cfg.clip,
        noise_multiplier: mask_sigma,
        sample_rate: q,
    };
    let budget = SparsityBudget::new(cfg.sparsity)?;
    let grouping = || -> Result<Arc<Grouping>> {
        Ok(Arc::new(Grouping::new(
            model.layout(),
            cfg.effective_grouping(),
            &mut stream(seed, Stream::Grouping, 0),
        )?))
    };
    let mut rng = stream(seed, Stream::ScoreNoise, epoch as u64);
    match cfg.strategy {
        Strategy::Sparta => {
            select_mask_sparta(model, params, batches, &setup, grouping()?, &budget, &mut session.ledger, &mut rng)
        }
        Strategy::DpsgdGrad => select_mask_dpsgd_gradients(
            model,
            params,
            batches,
            &setup,
            grouping()?,
            &budget,
            &mut session.ledger,
            &mut rng,
        ),
        Strategy::Oracle => select_mask_oracle(model, params, batches, cfg.oracle_score, grouping()?, &budget),
        _ => {
            // A fixed mask installed at the selection epoch: the drawn batches
            // are charged as a scoring epoch would be, keeping budgets equal.
            session.ledger.record(q, mask_sigma, batches.len() as u64)?;
            fixed_mask(cfg, prep, w_old, seed)
        }
    }
}

fn mask_stats(mask: &Mask, prep: &Prepared) -> MaskStats {
    let layout = mask.layout();
    let planted_overlap = match (&prep.planted_dims, prep.model.spec().conv.is_none()) {
        (Some(dims), true) => layout.maskable().next().and_then(|(s, seg)| {
            let crate::params::SegmentKind::Weight { cols, .. } = seg.spec.kind else { return None };
            let bits = mask.segment_bits(s);
            let mut planted_row = vec![false; bits.len() / cols];
            dims.iter().for_each(|&d| planted_row[d] = true);
            let selected = bits.iter().filter(|&&b| b).count();
            let hit = bits.iter().enumerate().filter(|&(i, &b)| b && planted_row[i / cols]).count();
            let denom = selected.min(dims.len() * cols);
            Some(if denom == 0 { 0.0 } else { hit as f64 / denom as f64 })
        }),
        _ => None,
    };
    MaskStats {
        trainable: mask.trainable_count(),
        total: layout.dim(),
        maskable_selected: mask.maskable_selected(),
        layers: mask
            .layer_density()
            .into_iter()
            .map(|(name, density)| LayerDensity { name, density })
            .collect(),
        planted_overlap,
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every seed of `cfg` in parallel; results keep seed order.
pub fn run_experiment_full(cfg: &TrainConfig) -> Result<(RunReport, Vec<SeedOutcome>)> {
    let start = Instant::now();
    cfg.validate()?;
    let prep = Prepared::new(cfg)?;
    let outcomes = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, &prep, s))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = outcomes.iter().map(|o| o.report.final_accuracy).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let report = RunReport {
        config: cfg.clone(),
        accuracy_mean,
        accuracy_std,
        epsilon: outcomes.iter().map(|o| o.report.ledger.epsilon).fold(0.0, f64::max),
        not_dp: outcomes.iter().any(|o| !o.report.private),
        runs: outcomes.iter().map(|o| o.report.clone()).collect(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, outcomes))
}

pub fn run_experiment(cfg: &TrainConfig) -> Result<RunReport> {
    run_experiment_full(cfg).map(|(r, _)| r)
}

/// Writes `report.json`, `results.csv` and one mask file per seed into `dir`.
pub fn write_run(dir: impl AsRef<Path>, report: &RunReport, outcomes: &[SeedOutcome]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    write_csv(std::fs::File::create(dir.join("results.csv"))?, &report_rows(report))?;
    for o in outcomes {
        let meta = MaskMeta {
            strategy: Some(report.config.strategy.label().into()),
            sparsity: Some(report.config.sparsity),
            seed: Some(o.report.seed),
            private: o.report.private,
            ledger: Some(o.report.ledger.clone()),
        };
        write_mask(dir.join(format!("mask-seed{}.dpmask", o.report.seed)), &o.mask, &meta)?;
    }
    Ok(())
}

/// One CSV line per seed of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sparsity: f64,
    pub grouping: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub final_epsilon: Option<f64>,
    /// Empty unless the run failed.
    pub error: Option<String>,
}

fn row_for(cfg: &TrainConfig, seed: u64) -> ResultRow {
    ResultRow {
        strategy: cfg.strategy.label().into(),
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        sparsity: cfg.sparsity,
        grouping: cfg.effective_grouping().label(),
        seed,
        accuracy: None,
        final_epsilon: None,
        error: None,
    }
}

pub fn report_rows(report: &RunReport) -> Vec<ResultRow> {
    report
        .runs
        .iter()
        .map(|r| ResultRow {
            accuracy: Some(r.final_accuracy),
            final_epsilon: Some(r.ledger.epsilon),
            ..row_for(&report.config, r.seed)
        })
        .collect()
}

pub fn write_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(CSV_COLUMNS)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub const CSV_COLUMNS: [&str; 9] = [
    "strategy",
    "epsilon",
    "delta",
    "sparsity",
    "grouping",
    "seed",
    "accuracy",
    "final_epsilon",
    "error",
];

pub fn read_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Config(format!("unexpected CSV columns {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Grid of runs sharing a base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: TrainConfig,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub sparsities: Vec<f64>,
    #[serde(default)]
    pub groupings: Vec<GroupingKind>,
}

impl SweepSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        parse_structured(path, &std::fs::read_to_string(path)?)
    }

    /// Cartesian product in strategy, epsilon, sparsity, grouping order.
    /// An empty axis keeps the base value.
    pub fn expand(&self) -> Vec<TrainConfig> {
        let b = &self.base;
        let or = |v: &[Strategy]| if v.is_empty() { vec![b.strategy] } else { v.to_vec() };
        let eps: Vec<Option<f64>> = if self.epsilons.is_empty() {
            vec![b.epsilon]
        } else {
            self.epsilons.iter().map(|&e| Some(e)).collect()
        };
        let sp = if self.sparsities.is_empty() { vec![b.sparsity] } else { self.sparsities.clone() };
        let gr = if self.groupings.is_empty() { vec![b.grouping] } else { self.groupings.clone() };
        let mut out = Vec::new();
        for s in or(&self.strategies) {
            for &e in &eps {
                for &x in &sp {
                    for &g in &gr {
                        let mut c = b.clone();
                        c.strategy = s;
                        if e.is_some() {
                            c.epsilon = e;
                            c.sigma = None;
                        }
                        c.sparsity = x;
                        c.grouping = g;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// Result of one sweep entry: a report or the error that stopped it.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config: TrainConfig,
    pub outcome: std::result::Result<RunReport, ErrorRecord>,
}

/// Runs every config; failures are recorded per run and do not stop the sweep.
pub fn sweep(configs: &[TrainConfig]) -> (Vec<ResultRow>, Vec<SweepEntry>) {
    let entries: Vec<SweepEntry> = configs
        .par_iter()
        .map(|c| SweepEntry {
            config: c.clone(),
            outcome: run_experiment(c).map_err(|e| e.record()),
        })
        .collect();
    let rows = entries
        .iter()
        .flat_map(|e| match &e.outcome {
            Ok(r) => report_rows(r),
            Err(err) => e
                .config
                .seeds
                .iter()
                .map(|&s| ResultRow {
                    error: Some(format!("{}: {}", err.kind, err.message)),
                    ..row_for(&e.config, s)
                })
                .collect(),
        })
        .collect();
    (rows, entries)
}

/// The planted synthetic transfer task used for the strategy ablation.
///
/// Only a tenth of the input dimensions carry fine-tune signal, so the
/// matching rows of the first weight matrix form the ground-truth mask. Each
/// fine-tune class sits at `+mu` or `-mu`, which a readout of the pretrained
/// features cannot separate well: accuracy depends on which first-layer
/// weights get trained. All strategies share the staged schedule (warmup,
/// selection epoch, masked training) and identical hyperparameters; only the
/// selection step differs. Grouping follows the strategy: rows for sparta
/// and mp, single coordinates otherwise.
pub fn planted_ablation(strategy: Strategy, seeds: Vec<u64>) -> TrainConfig {
    TrainConfig {
        data: DataSource::Synthetic {
            task: TaskSpec {
                dim: 100,
                pretrain_classes: 10,
                classes: 10,
                pretrain_samples: 4000,
                train_samples: 2000,
                test_samples: 2000,
                separation: 1.5,
                planted_fraction: 0.1,
                nuisance_activity: 0.0,
                relatedness: 0.5,
                antipodal: true,
            },
        },
        model: ModelArch {
            hidden: vec![64],
            ..ModelArch::default()
        },
        strategy,
        grouping: match strategy {
            Strategy::Sparta | Strategy::Mp => GroupingKind::Row,
            _ => GroupingKind::Singleton,
        },
        sparsity: 0.2,
        epsilon: Some(1.0),
        batch_size: 250,
        lr: 0.05,
        schedule: Schedule::Staged,
        seeds,
        ..TrainConfig::default()
    }
}
