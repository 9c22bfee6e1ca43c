//! Feature-sharing units placed between two task streams.
//!
//! [`CasParams`] is the co-attentive unit: an intermediate channel
//! descriptor feeds three gates (sharing, attentive, task-specific), both
//! tasks' gated features are fused into per-task synergetic features and a
//! spatial map, and the result is aggregated as
//! `(feat + feat_syn + feat_t) * A`. [`CrossStitchParams`] and
//! [`SluiceParams`] are the linear-mixing baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Initializer, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Spatial-map convolution size.
pub const MAP_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    A,
    B,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::A, Task::B];

    pub fn index(self) -> usize {
        match self {
            Task::A => 0,
            Task::B => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Task::A => "A",
            Task::B => "B",
        }
    }
}

/// Component removals for the co-attentive unit.
///
/// * `synergetic_minus`: fuse gated features by addition instead of concatenation.
/// * `synergetic_minus2`: additionally drop the 1x1 fusion conv.
/// * `attentive_minus`: drop `V_a`; the spatial map alone is the attention.
/// * `attentive_minus2`: drop the attention entirely.
/// * `ts_minus2`: drop the task-specific branch.
/// * `channel_minus2`: drop all three channel gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub synergetic_minus: bool,
    pub synergetic_minus2: bool,
    pub attentive_minus: bool,
    pub attentive_minus2: bool,
    pub ts_minus2: bool,
    pub channel_minus2: bool,
}

impl AblationConfig {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.synergetic_minus && self.synergetic_minus2 {
            return Err(Error::Config(
                "synergetic_minus and synergetic_minus2 are mutually exclusive".into(),
            ));
        }
        if self.attentive_minus && self.attentive_minus2 {
            return Err(Error::Config(
                "attentive_minus and attentive_minus2 are mutually exclusive".into(),
            ));
        }
        if self.channel_minus2 && self.attentive_minus2 {
            return Err(Error::Config(
                "channel_minus2 uses the spatial map as attention, which attentive_minus2 removes"
                    .into(),
            ));
        }
        Ok(())
    }

    /// The single-component ablations followed by the full unit.
    pub fn table() -> Vec<(&'static str, AblationConfig)> {
        let one = |f: fn(&mut AblationConfig)| {
            let mut a = AblationConfig::default();
            f(&mut a);
            a
        };
        vec![
            ("synergetic-", one(|a| a.synergetic_minus = true)),
            ("synergetic--", one(|a| a.synergetic_minus2 = true)),
            ("attentive-", one(|a| a.attentive_minus = true)),
            ("attentive--", one(|a| a.attentive_minus2 = true)),
            ("ts--", one(|a| a.ts_minus2 = true)),
            ("channel--", one(|a| a.channel_minus2 = true)),
            ("full", AblationConfig::default()),
        ]
    }

    fn fuse_by_sum(&self) -> bool {
        self.synergetic_minus || self.synergetic_minus2
    }
    fn has_fusion_conv(&self) -> bool {
        !self.synergetic_minus2
    }
    fn has_attention(&self) -> bool {
        !self.attentive_minus2
    }
    fn has_share_gate(&self) -> bool {
        !self.channel_minus2
    }
    fn has_attention_gate(&self) -> bool {
        self.has_attention() && !self.attentive_minus && !self.channel_minus2
    }
    fn has_task_branch(&self) -> bool {
        !self.ts_minus2
    }
    fn has_task_gate(&self) -> bool {
        self.has_task_branch() && !self.channel_minus2
    }
    fn needs_descriptor(&self) -> bool {
        self.has_share_gate() || self.has_attention_gate() || self.has_task_gate()
    }
}

/// Which task's gated features come first in the fused tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConcatOrder {
    #[default]
    AFirst,
    BFirst,
}

/// Weight and bias of one dense or convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Layer {
    pub(crate) fn dense(store: &mut ParamStore, init: &mut Initializer, name: &str, cout: usize, cin: usize) -> Self {
        Layer {
            weight: store.add(format!("{name}.weight"), init.uniform(Shape::matrix(cout, cin), cin)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(cout))),
        }
    }

    pub(crate) fn conv(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        Layer {
            weight: store.add(
                format!("{name}.weight"),
                init.uniform(Shape::new(k, k, cin, cout), k * k * cin),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(cout))),
        }
    }

    /// Convolution followed by a ReLU, so He-initialised.
    pub(crate) fn conv_relu(store: &mut ParamStore, init: &mut Initializer, name: &str, k: usize, cin: usize, cout: usize) -> Self {
        Layer {
            weight: store.add(
                format!("{name}.weight"),
                init.he_uniform(Shape::new(k, k, cin, cout), k * k * cin),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(Shape::vector(cout))),
        }
    }

    pub fn apply_dense(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }

    pub fn apply_conv(&self, tape: &mut Tape, store: &ParamStore, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, stride, padding)
    }
}

/// One task's layers inside a co-attentive unit. Layers removed by the
/// ablation are `None`.
#[derive(Clone, Debug)]
pub struct TaskCasParams {
    /// `C -> C/r` descriptor layer.
    pub reduce: Option<Layer>,
    /// `C/r -> C` sharing gate.
    pub share_gate: Option<Layer>,
    /// `C/r -> C` attention gate.
    pub attention_gate: Option<Layer>,
    /// `C/r -> C` task-specific gate.
    pub task_gate: Option<Layer>,
    /// 1x1 fusion conv over the fused features.
    pub fusion: Option<Layer>,
    /// 7x7 conv from (mean, max) maps to the spatial map.
    pub spatial: Option<Layer>,
}

#[derive(Clone, Debug)]
pub struct CasParams {
    pub channels: usize,
    pub reduction: usize,
    pub reduced: usize,
    pub ablation: AblationConfig,
    pub concat_order: ConcatOrder,
    pub tasks: [TaskCasParams; 2],
}

/// Starting bias of the attention gate and the spatial-map conv. With
/// near-zero inputs both gates then open to `sqrt(2/3)`, and the full unit
/// passes `(1 + 1/2) * 2/3 = 1` times its input, so stacking units does not
/// shrink the signal before training starts.
pub fn initial_gate_bias() -> f64 {
    let g = (2.0f64 / 3.0).sqrt();
    (g / (1.0 - g)).ln()
}

/// Reduced descriptor width: `max(C / r, 1)`.
pub fn reduced_channels(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 {
        return Err(Error::Config("reduction ratio must be at least 1".into()));
    }
    if channels == 0 {
        return Err(Error::Config("sharing unit needs at least one channel".into()));
    }
    Ok((channels / reduction).max(1))
}

impl CasParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        channels: usize,
        reduction: usize,
        ablation: AblationConfig,
    ) -> Result<Self> {
        ablation.validate()?;
        let reduced = reduced_channels(channels, reduction)?;
        let c = channels;
        let fused = if ablation.fuse_by_sum() { c } else { 2 * c };
        let mut make = |task: Task| {
            let p = format!("{prefix}.{}", task.label());
            TaskCasParams {
                reduce: ablation
                    .needs_descriptor()
                    .then(|| Layer::dense(store, init, &format!("{p}.reduce"), reduced, c)),
                share_gate: ablation
                    .has_share_gate()
                    .then(|| Layer::dense(store, init, &format!("{p}.share_gate"), c, reduced)),
                attention_gate: ablation
                    .has_attention_gate()
                    .then(|| Layer::dense(store, init, &format!("{p}.attention_gate"), c, reduced)),
                task_gate: ablation
                    .has_task_gate()
                    .then(|| Layer::dense(store, init, &format!("{p}.task_gate"), c, reduced)),
                fusion: ablation
                    .has_fusion_conv()
                    .then(|| Layer::conv(store, init, &format!("{p}.fusion"), 1, fused, c)),
                spatial: ablation
                    .has_attention()
                    .then(|| Layer::conv(store, init, &format!("{p}.spatial"), MAP_KERNEL, 2, 1)),
            }
        };
        let a = make(Task::A);
        let b = make(Task::B);
        let bias = initial_gate_bias();
        for t in [&a, &b] {
            for layer in [t.attention_gate, t.spatial].into_iter().flatten() {
                store.value_mut(layer.bias).fill(bias);
            }
        }
        Ok(CasParams {
            channels,
            reduction,
            reduced,
            ablation,
            concat_order: ConcatOrder::AFirst,
            tasks: [a, b],
        })
    }

    pub fn task(&self, t: Task) -> &TaskCasParams {
        &self.tasks[t.index()]
    }

    /// All parameter ids owned by this unit.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.tasks
            .iter()
            .flat_map(|t| {
                [t.reduce, t.share_gate, t.attention_gate, t.task_gate, t.fusion, t.spatial]
                    .into_iter()
                    .flatten()
                    .flat_map(|l| [l.weight, l.bias])
            })
            .collect()
    }
}

/// Outputs of one sharing unit. `maps` holds the per-task spatial maps
/// when the unit produces them.
#[derive(Clone, Copy, Debug)]
pub struct SharingOutput {
    pub a: Var,
    pub b: Var,
    pub maps: Option<(Var, Var)>,
}

fn check_pair(tape: &Tape, a: Var, b: Var, channels: usize) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::InvalidShape(format!("task features disagree: {sa:?} vs {sb:?}")));
    }
    if sa.c() != channels {
        return Err(Error::InvalidShape(format!(
            "sharing unit built for {channels} channels, got {sa:?}"
        )));
    }
    Ok(())
}

fn gate(tape: &mut Tape, store: &ParamStore, layer: Option<Layer>, descriptor: Option<Var>) -> Result<Option<Var>> {
    match (layer, descriptor) {
        (Some(l), Some(vm)) => {
            let z = l.apply_dense(tape, store, vm)?;
            Ok(Some(tape.sigmoid(z)?))
        }
        _ => Ok(None),
    }
}

/// Co-attentive forward pass for both tasks.
pub fn cas_forward(tape: &mut Tape, store: &ParamStore, p: &CasParams, feat_a: Var, feat_b: Var) -> Result<SharingOutput> {
    check_pair(tape, feat_a, feat_b, p.channels)?;
    let ab = p.ablation;
    ab.validate()?;
    let feats = [feat_a, feat_b];

    // Intermediate descriptor and the three channel gates, per task.
    let mut share = [feat_a, feat_b];
    let mut attn_gates = [None, None];
    let mut task_gates = [None, None];
    for t in Task::BOTH {
        let tp = p.task(t);
        let feat = feats[t.index()];
        let descriptor = match tp.reduce {
            Some(l) => {
                let g = tape.gap(feat)?;
                let z = l.apply_dense(tape, store, g)?;
                Some(tape.relu(z)?)
            }
            None => None,
        };
        if let Some(v_sh) = gate(tape, store, tp.share_gate, descriptor)? {
            share[t.index()] = tape.mul(v_sh, feat)?;
        }
        attn_gates[t.index()] = gate(tape, store, tp.attention_gate, descriptor)?;
        task_gates[t.index()] = gate(tape, store, tp.task_gate, descriptor)?;
    }

    let (first, second) = match p.concat_order {
        ConcatOrder::AFirst => (share[0], share[1]),
        ConcatOrder::BFirst => (share[1], share[0]),
    };
    let fused = if ab.fuse_by_sum() {
        tape.add(first, second)?
    } else {
        tape.concat_channels(first, second)?
    };

    let pooled = if ab.has_attention() {
        let (avg, max) = tape.channel_stats(fused)?;
        Some(tape.concat_channels(avg, max)?)
    } else {
        None
    };

    let mut outs = [feat_a, feat_b];
    let mut maps = [None, None];
    for t in Task::BOTH {
        let tp = p.task(t);
        let i = t.index();
        let feat = feats[i];
        let syn = match tp.fusion {
            Some(l) => l.apply_conv(tape, store, fused, 1, 0)?,
            None => fused,
        };
        let attention = match (tp.spatial, pooled) {
            (Some(l), Some(pooled)) => {
                let z = l.apply_conv(tape, store, pooled, 1, MAP_KERNEL / 2)?;
                let m = tape.sigmoid(z)?;
                maps[i] = Some(m);
                Some(match attn_gates[i] {
                    Some(v_a) => tape.mul(v_a, m)?,
                    None => m,
                })
            }
            _ => None,
        };
        let mut acc = tape.add(feat, syn)?;
        if ab.has_task_branch() {
            let ft = match task_gates[i] {
                Some(v_t) => tape.mul(v_t, feat)?,
                None => feat,
            };
            acc = tape.add(acc, ft)?;
        }
        outs[i] = match attention {
            Some(a) => tape.mul(acc, a)?,
            None => acc,
        };
    }
    let maps = match maps {
        [Some(ma), Some(mb)] => Some((ma, mb)),
        _ => None,
    };
    Ok(SharingOutput {
        a: outs[0],
        b: outs[1],
        maps,
    })
}

/// Per-channel 2x2 mixing: `[a'; b'] = alpha_c [a; b]`.
///
/// Stored as four `[1, 1, 1, C]` vectors, one per matrix entry.
#[derive(Clone, Debug)]
pub struct CrossStitchParams {
    pub channels: usize,
    pub aa: ParamId,
    pub ab: ParamId,
    pub ba: ParamId,
    pub bb: ParamId,
}

pub const STITCH_SELF: f64 = 0.9;
pub const STITCH_OTHER: f64 = 0.1;

impl CrossStitchParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("cross-stitch unit needs at least one channel".into()));
        }
        let mut add = |name: &str, v: f64| store.add(format!("{prefix}.{name}"), Tensor::full(Shape::vector(channels), v));
        Ok(CrossStitchParams {
            channels,
            aa: add("alpha_aa", STITCH_SELF),
            ab: add("alpha_ab", STITCH_OTHER),
            ba: add("alpha_ba", STITCH_OTHER),
            bb: add("alpha_bb", STITCH_SELF),
        })
    }

    pub fn mixing(&self, store: &ParamStore, channel: usize) -> [[f64; 2]; 2] {
        let v = |id| store.value(id).data()[channel];
        [[v(self.aa), v(self.ab)], [v(self.ba), v(self.bb)]]
    }

    pub fn set_mixing(&self, store: &mut ParamStore, channel: usize, m: [[f64; 2]; 2]) {
        store.value_mut(self.aa).data_mut()[channel] = m[0][0];
        store.value_mut(self.ab).data_mut()[channel] = m[0][1];
        store.value_mut(self.ba).data_mut()[channel] = m[1][0];
        store.value_mut(self.bb).data_mut()[channel] = m[1][1];
    }

    /// Largest absolute row sum of `alpha_c - I` over channels.
    pub fn distance_from_identity(&self, store: &ParamStore) -> f64 {
        (0..self.channels)
            .map(|c| {
                let m = self.mixing(store, c);
                ((m[0][0] - 1.0).abs() + m[0][1].abs()).max(m[1][0].abs() + (m[1][1] - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.aa, self.ab, self.ba, self.bb]
    }
}

pub fn cross_stitch_forward(tape: &mut Tape, store: &ParamStore, p: &CrossStitchParams, feat_a: Var, feat_b: Var) -> Result<SharingOutput> {
    check_pair(tape, feat_a, feat_b, p.channels)?;
    let mut mix = |x: ParamId, y: ParamId| -> Result<Var> {
        let wx = tape.param(store, x);
        let wy = tape.param(store, y);
        let l = tape.mul(feat_a, wx)?;
        let r = tape.mul(feat_b, wy)?;
        tape.add(l, r)
    };
    let a = mix(p.aa, p.ab)?;
    let b = mix(p.ba, p.bb)?;
    Ok(SharingOutput { a, b, maps: None })
}

/// Subspace mixing over `[A_low, A_high, B_low, B_high]`, each half of the
/// channels, with one shared 4x4 matrix.
#[derive(Clone, Debug)]
pub struct SluiceParams {
    pub channels: usize,
    pub beta: ParamId,
}

pub const SLUICE_SUBSPACES: usize = 4;
pub const SLUICE_SELF: f64 = 0.9;
pub const SLUICE_OTHER: f64 = 0.1 / 3.0;

impl SluiceParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "sluice unit needs a positive even channel count, got {channels}"
            )));
        }
        let k = SLUICE_SUBSPACES;
        let beta = Tensor::from_fn(Shape::matrix(k, k), |[_, _, i, j]| if i == j { SLUICE_SELF } else { SLUICE_OTHER });
        Ok(SluiceParams {
            channels,
            beta: store.add(format!("{prefix}.beta"), beta),
        })
    }

    /// Largest absolute row sum of `beta - I`.
    pub fn distance_from_identity(&self, store: &ParamStore) -> f64 {
        let k = SLUICE_SUBSPACES;
        let b = store.value(self.beta).data();
        (0..k)
            .map(|i| (0..k).map(|j| (b[i * k + j] - if i == j { 1.0 } else { 0.0 }).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

pub fn sluice_forward(tape: &mut Tape, store: &ParamStore, p: &SluiceParams, feat_a: Var, feat_b: Var) -> Result<SharingOutput> {
    if p.channels % 2 != 0 {
        return Err(Error::Config(format!("sluice unit needs even channels, got {}", p.channels)));
    }
    check_pair(tape, feat_a, feat_b, p.channels)?;
    let half = p.channels / 2;
    let subspaces = [
        tape.slice_channels(feat_a, 0, half)?,
        tape.slice_channels(feat_a, half, half)?,
        tape.slice_channels(feat_b, 0, half)?,
        tape.slice_channels(feat_b, half, half)?,
    ];
    let beta = tape.param(store, p.beta);
    let mut mixed = [subspaces[0]; SLUICE_SUBSPACES];
    for (i, m) in mixed.iter_mut().enumerate() {
        *m = tape.weighted_sum(&subspaces, beta, i)?;
    }
    let a = tape.concat_channels(mixed[0], mixed[1])?;
    let b = tape.concat_channels(mixed[2], mixed[3])?;
    Ok(SharingOutput { a, b, maps: None })
}

/// A built sharing unit of any kind.
#[derive(Clone, Debug)]
pub enum SharingModule {
    Cas(CasParams),
    CrossStitch(CrossStitchParams),
    Sluice(SluiceParams),
}

impl SharingModule {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, a: Var, b: Var) -> Result<SharingOutput> {
        match self {
            SharingModule::Cas(p) => cas_forward(tape, store, p, a, b),
            SharingModule::CrossStitch(p) => cross_stitch_forward(tape, store, p, a, b),
            SharingModule::Sluice(p) => sluice_forward(tape, store, p, a, b),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            SharingModule::Cas(p) => p.param_ids(),
            SharingModule::CrossStitch(p) => p.param_ids(),
            SharingModule::Sluice(p) => vec![p.beta],
        }
    }
}
