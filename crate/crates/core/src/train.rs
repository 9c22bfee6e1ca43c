//! Training loop, learning-rate schedule, evaluation and run records.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{HardShareNet, NetConfig, SharingKind, SharingNetwork, StageSpec};
use crate::data::{Batch, Dataset, GroupingKind, GroupingScheme};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::par::{self, Execution};
use crate::param::ParamStore;
use crate::sharing::AblationConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Which network is trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One stream, one head over all attributes.
    HardSharing,
    /// Two independent streams, no sharing units.
    Vanilla,
    CrossStitch,
    Sluice,
    #[default]
    Cas,
}

impl ModelKind {
    pub const BASELINES: [ModelKind; 5] = [
        ModelKind::HardSharing,
        ModelKind::Vanilla,
        ModelKind::CrossStitch,
        ModelKind::Sluice,
        ModelKind::Cas,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::HardSharing => "hard_sharing",
            ModelKind::Vanilla => "vanilla",
            ModelKind::CrossStitch => "cross_stitch",
            ModelKind::Sluice => "sluice",
            ModelKind::Cas => "cas",
        }
    }

    fn sharing(self) -> SharingKind {
        match self {
            ModelKind::HardSharing | ModelKind::Vanilla => SharingKind::None,
            ModelKind::CrossStitch => SharingKind::CrossStitch,
            ModelKind::Sluice => SharingKind::Sluice,
            ModelKind::Cas => SharingKind::Cas,
        }
    }
}

fn default_stages() -> Vec<StageSpec> {
    NetConfig::default().stages
}

fn default_mask() -> Vec<bool> {
    vec![true; 4]
}

/// Hyperparameters of one training run. Serialises field-for-field to the
/// TOML config files read by the command-line tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_after: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub reduction: usize,
    pub seed: u64,
    pub sharing_kind: ModelKind,
    #[serde(default = "default_mask")]
    pub insertion_mask: Vec<bool>,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub grouping: GroupingKind,
    #[serde(default = "default_stages")]
    pub stages: Vec<StageSpec>,
    /// Probability above which an attribute counts as predicted.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            lr: 0.02,
            lr_decay_epoch: 40,
            lr_after: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            reduction: 16,
            seed: 0,
            sharing_kind: ModelKind::Cas,
            insertion_mask: default_mask(),
            ablation: AblationConfig::default(),
            grouping: GroupingKind::GlobalLocal,
            stages: default_stages(),
            threshold: default_threshold(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_after > 0.0 && self.lr_after < self.lr) {
            return bad(format!("lr_after must lie in (0, lr), got {}", self.lr_after));
        }
        if !(self.lr_decay_epoch > 0 && self.lr_decay_epoch < self.epochs) {
            return bad(format!(
                "lr_decay_epoch must lie in (0, epochs = {}), got {}",
                self.epochs, self.lr_decay_epoch
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        self.net_config(1, 1).validate()
    }

    /// Step schedule: `lr` before `lr_decay_epoch`, `lr_after` from it on.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr
        } else {
            self.lr_after
        }
    }

    pub fn net_config(&self, labels_a: usize, labels_b: usize) -> NetConfig {
        NetConfig {
            in_channels: 3,
            stages: self.stages.clone(),
            insertion_mask: self.insertion_mask.clone(),
            sharing: self.sharing_kind.sharing(),
            ablation: self.ablation,
            reduction: self.reduction,
            labels_a,
            labels_b,
            seed: self.seed,
        }
    }
}

/// A trainable network of any kind.
#[derive(Clone, Debug)]
pub enum Model {
    Hard(HardShareNet),
    Soft(SharingNetwork),
}

/// Loss nodes of one forward pass.
pub struct LossVars {
    pub total: Var,
    pub a: Var,
    pub b: Var,
}

impl Model {
    pub fn build(cfg: &TrainConfig, labels_a: usize, labels_b: usize) -> Result<Model> {
        let net = cfg.net_config(labels_a, labels_b);
        Ok(match cfg.sharing_kind {
            ModelKind::HardSharing => Model::Hard(HardShareNet::build(&net)?),
            _ => Model::Soft(SharingNetwork::build(&net)?),
        })
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Hard(n) => &n.store,
            Model::Soft(n) => &n.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Hard(n) => &mut n.store,
            Model::Soft(n) => &mut n.store,
        }
    }

    pub fn net_config(&self) -> &NetConfig {
        match self {
            Model::Hard(n) => &n.config,
            Model::Soft(n) => &n.config,
        }
    }

    /// Per-group logits `(a, b)` recorded on `tape`.
    fn logits(&self, tape: &mut Tape, images: Var) -> Result<(Var, Var)> {
        match self {
            Model::Hard(n) => {
                let z = n.forward_tape(tape, &n.store, images)?;
                let la = n.config.labels_a;
                let za = tape.slice_channels(z, 0, la)?;
                let zb = tape.slice_channels(z, la, n.config.labels_b)?;
                Ok((za, zb))
            }
            Model::Soft(n) => {
                let out = n.forward_tape(tape, &n.store, images, &mut Vec::new())?;
                Ok((out.logits_a, out.logits_b))
            }
        }
    }

    /// Records the training loss. Two-stream models sum the two group
    /// losses; the single-stream model uses one loss averaged over all
    /// attributes.
    pub fn loss(&self, tape: &mut Tape, batch: &Batch) -> Result<LossVars> {
        let x = tape.input(batch.images.clone());
        let (za, zb) = self.logits(tape, x)?;
        let a = tape.bce_loss(za, &batch.targets_a)?;
        let b = tape.bce_loss(zb, &batch.targets_b)?;
        let total = match self {
            Model::Soft(_) => tape.add(a, b)?,
            Model::Hard(n) => {
                let (la, lb) = (n.config.labels_a as f64, n.config.labels_b as f64);
                let wa = tape.scale(a, la / (la + lb))?;
                let wb = tape.scale(b, lb / (la + lb))?;
                tape.add(wa, wb)?
            }
        };
        Ok(LossVars { total, a, b })
    }

    /// Attribute probabilities `[N, 1, 1, La + Lb]`, group A first.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let (za, zb) = self.logits(&mut tape, x)?;
        let z = tape.concat_channels(za, zb)?;
        let p = tape.sigmoid(z)?;
        Ok(tape.value(p).clone())
    }
}

/// Train/validation/test partitions.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss_a: f64,
    pub train_loss_b: f64,
    pub val: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub grouping: GroupingScheme,
    pub num_params: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (highest validation F1).
    pub best_epoch: usize,
    pub test: MetricReport,
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// Equality of everything except wall-clock time.
    pub fn same_results(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| RunRecord {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// A finished run: its record plus the selected model.
pub struct TrainOutput {
    pub record: RunRecord,
    pub model: Model,
}

fn check_grouping(ds: &Dataset, grouping: &GroupingScheme) -> Result<()> {
    let mut seen = vec![false; ds.num_attributes()];
    for &i in grouping.order().iter() {
        if i >= seen.len() || seen[i] {
            return Err(Error::Config(format!(
                "grouping does not partition the {} dataset attributes",
                seen.len()
            )));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) || grouping.group_a.is_empty() || grouping.group_b.is_empty() {
        return Err(Error::Config("grouping must cover every attribute with two non-empty groups".into()));
    }
    Ok(())
}

fn batches(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect()
}

/// Predicted probabilities and targets for a whole dataset, both in
/// grouping order.
pub fn predict_dataset(
    model: &Model,
    ds: &Dataset,
    grouping: &GroupingScheme,
    batch_size: usize,
    exec: Execution,
) -> Result<(Tensor, Tensor)> {
    let chunks = batches(ds.len(), batch_size.max(1));
    let parts = par::map(exec, &chunks, |idx| -> Result<(Tensor, Tensor)> {
        let b = ds.batch(idx, grouping)?;
        let targets = Tensor::from_fn(
            Shape::new(idx.len(), 1, 1, grouping.group_a.len() + grouping.group_b.len()),
            |[n, _, _, l]| {
                let la = grouping.group_a.len();
                if l < la {
                    b.targets_a.at([n, 0, 0, l])
                } else {
                    b.targets_b.at([n, 0, 0, l - la])
                }
            },
        );
        Ok((model.predict(&b.images)?, targets))
    });
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for p in parts {
        let (s, t) = p?;
        scores.push(s);
        targets.push(t);
    }
    let cat = |ts: &[Tensor]| -> Result<Tensor> {
        let l = ts[0].shape().c();
        let n = ts.iter().map(|t| t.shape().n()).sum();
        Tensor::from_vec(Shape::new(n, 1, 1, l), ts.iter().flat_map(|t| t.data().iter().copied()).collect())
    };
    if scores.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    Ok((cat(&scores)?, cat(&targets)?))
}

pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    grouping: &GroupingScheme,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<MetricReport> {
    let (scores, targets) = predict_dataset(model, ds, grouping, cfg.batch_size, exec)?;
    evaluate(&scores, &targets, cfg.threshold)
}

/// Mean per-batch training objective over `ds` without updating anything.
pub fn mean_loss(model: &Model, ds: &Dataset, grouping: &GroupingScheme, batch_size: usize, exec: Execution) -> Result<f64> {
    let chunks = batches(ds.len(), batch_size.max(1));
    let losses = par::map(exec, &chunks, |idx| -> Result<(f64, usize)> {
        let b = ds.batch(idx, grouping)?;
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, &b)?;
        Ok((tape.value(l.total).item(0).data()[0], idx.len()))
    });
    let mut sum = 0.0;
    for l in losses {
        let (v, n) = l?;
        sum += v * n as f64;
    }
    Ok(sum / ds.len().max(1) as f64)
}

/// SGD with momentum: `v = mu * v + g + wd * w`, `w -= lr * v`.
struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            momentum,
            weight_decay,
        }
    }

    fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let g = store.grad(id).data().to_vec();
            let w = store.value_mut(id).data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.data_mut()).zip(g) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

fn tag_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Epoch-by-epoch training state. Batches are shuffled each epoch by an
/// RNG seeded from `cfg.seed`, so everything recorded is a function of
/// `(cfg, data)`. `exec` only affects evaluation, which is
/// order-independent.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Splits,
    grouping: GroupingScheme,
    exec: Execution,
    model: Model,
    sgd: Sgd,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epochs: Vec<EpochRecord>,
    best: Option<(f64, usize, Vec<Tensor>)>,
    start: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Splits, grouping: &GroupingScheme, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        if grouping.kind != cfg.grouping {
            return Err(Error::Config(format!(
                "data grouped as {} but config asks for {}",
                grouping.kind.label(),
                cfg.grouping.label()
            )));
        }
        for ds in [&data.train, &data.val, &data.test] {
            check_grouping(ds, grouping)?;
            if ds.is_empty() {
                return Err(Error::Config("every split needs at least one sample".into()));
            }
        }
        let model = Model::build(cfg, grouping.group_a.len(), grouping.group_b.len())?;
        info!(
            "training {} ({} params) on {} samples for {} epochs",
            cfg.sharing_kind.label(),
            model.store().num_scalars(),
            data.train.len(),
            cfg.epochs
        );
        Ok(Trainer {
            sgd: Sgd::new(model.store(), cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521),
            order: (0..data.train.len()).collect(),
            epochs: Vec::with_capacity(cfg.epochs),
            best: None,
            start: Instant::now(),
            cfg: cfg.clone(),
            data,
            grouping: grouping.clone(),
            exec,
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs.len()
    }

    /// One pass over the shuffled training set followed by validation.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.epochs.len();
        let lr = self.cfg.lr_schedule(epoch);
        self.order.shuffle(&mut self.rng);
        let (mut sum_a, mut sum_b, mut seen) = (0.0, 0.0, 0usize);
        for (bi, idx) in self.order.chunks(self.cfg.batch_size).enumerate() {
            let batch = self.data.train.batch(idx, &self.grouping)?;
            let mut tape = Tape::new();
            let l = self.model.loss(&mut tape, &batch).map_err(|e| tag_divergence(e, epoch, bi))?;
            let total = tape.value(l.total).data()[0];
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, loss: total });
            }
            let store = self.model.store_mut();
            store.zero_grads();
            tape.backward(l.total, store).map_err(|e| tag_divergence(e, epoch, bi))?;
            self.sgd.step(store, lr);
            sum_a += tape.value(l.a).data()[0] * idx.len() as f64;
            sum_b += tape.value(l.b).data()[0] * idx.len() as f64;
            seen += idx.len();
        }
        let val = evaluate_model(&self.model, &self.data.val, &self.grouping, &self.cfg, self.exec)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss_a: sum_a / seen as f64,
            train_loss_b: sum_b / seen as f64,
            val,
        };
        debug!(
            "epoch {epoch}: lr {lr} loss {:.4}/{:.4} val F1 {:.4} mA {:.4}",
            rec.train_loss_a, rec.train_loss_b, rec.val.instance_f1, rec.val.ma
        );
        if self.best.as_ref().is_none_or(|(f1, _, _)| rec.val.instance_f1 > *f1) {
            self.best = Some((rec.val.instance_f1, epoch, self.model.store().snapshot()));
        }
        self.epochs.push(rec);
        Ok(self.epochs.last().expect("just pushed"))
    }

    /// Restores the best-validation parameters and scores the test split.
    pub fn finish(mut self) -> Result<TrainOutput> {
        let best_epoch = match self.best.take() {
            Some((_, e, snapshot)) => {
                self.model.store_mut().restore(&snapshot)?;
                e
            }
            None => 0,
        };
        let test = evaluate_model(&self.model, &self.data.test, &self.grouping, &self.cfg, self.exec)?;
        info!(
            "{}: test F1 {:.4} mA {:.4} (best epoch {best_epoch})",
            self.cfg.sharing_kind.label(),
            test.instance_f1,
            test.ma
        );
        Ok(TrainOutput {
            record: RunRecord {
                num_params: self.model.store().num_scalars(),
                config: self.cfg,
                grouping: self.grouping,
                epochs: self.epochs,
                best_epoch,
                test,
                wall_time_secs: self.start.elapsed().as_secs_f64(),
            },
            model: self.model,
        })
    }
}

/// Runs every configured epoch and returns the finished run.
pub fn train(cfg: &TrainConfig, data: &Splits, grouping: &GroupingScheme, exec: Execution) -> Result<TrainOutput> {
    let mut t = Trainer::new(cfg, data, grouping, exec)?;
    while t.epochs_done() < cfg.epochs {
        t.run_epoch()?;
    }
    t.finish()
}
