//! Two-stream CNN with sharing units between corresponding stages, and the
//! single-stream hard-sharing baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Initializer, ParamStore};
use crate::sharing::{
    AblationConfig, CasParams, CrossStitchParams, Layer, SharingModule, SluiceParams, Task,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const MAX_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
    /// Number of conv3x3 + ReLU pairs; the first one carries the stride.
    pub blocks: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingKind {
    #[default]
    Cas,
    CrossStitch,
    Sluice,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub insertion_mask: Vec<bool>,
    pub sharing: SharingKind,
    #[serde(default)]
    pub ablation: AblationConfig,
    pub reduction: usize,
    pub labels_a: usize,
    pub labels_b: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    /// Channels 8/16/32/64, one block per stage, stride 2 everywhere, CAS
    /// after every stage, 13 + 13 labels.
    fn default() -> Self {
        let stage = |c| StageSpec {
            out_channels: c,
            stride: 2,
            blocks: 1,
        };
        NetConfig {
            in_channels: 3,
            stages: vec![stage(8), stage(16), stage(32), stage(64)],
            insertion_mask: vec![true; 4],
            sharing: SharingKind::Cas,
            ablation: AblationConfig::default(),
            reduction: 16,
            labels_a: 13,
            labels_b: 13,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > MAX_STAGES {
            return Err(Error::Config(format!(
                "expected 1..={MAX_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        if self.insertion_mask.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "insertion mask has {} entries for {} stages",
                self.insertion_mask.len(),
                self.stages.len()
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.blocks == 0 || !(1..=2).contains(&s.stride) {
                return Err(Error::Config(format!(
                    "stage {}: need out_channels >= 1, blocks >= 1, stride in {{1, 2}}; got {s:?}",
                    i + 1
                )));
            }
        }
        if self.labels_a == 0 || self.labels_b == 0 {
            return Err(Error::Config("both tasks need at least one label".into()));
        }
        self.ablation.validate()
    }

    /// Product of stage strides; input height and width must be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        ^ salt
}

/// Conv layers of one stream, grouped by stage.
#[derive(Clone, Debug)]
pub struct Stream {
    stages: Vec<Vec<(Layer, usize)>>,
}

impl Stream {
    fn build(store: &mut ParamStore, init: &mut Initializer, prefix: &str, cfg: &NetConfig) -> Self {
        let mut cin = cfg.in_channels;
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (0..s.blocks)
                    .map(|b| {
                        let name = format!("{prefix}.stage{}.conv{}", i + 1, b + 1);
                        let layer = Layer::conv_relu(store, init, &name, 3, cin, s.out_channels);
                        cin = s.out_channels;
                        (layer, if b == 0 { s.stride } else { 1 })
                    })
                    .collect()
            })
            .collect();
        Stream { stages }
    }

    fn stage(&self, tape: &mut Tape, store: &ParamStore, stage: usize, mut x: Var) -> Result<Var> {
        for (layer, stride) in &self.stages[stage] {
            let z = layer.apply_conv(tape, store, x, *stride, 1)?;
            x = tape.relu(z)?;
        }
        Ok(x)
    }
}

/// Pixels in `[0, 1]` enter the first conv as `(x - INPUT_CENTER) * INPUT_GAIN`.
pub const INPUT_CENTER: f64 = 0.4;
pub const INPUT_GAIN: f64 = 3.0;

/// Validates the image shape and applies the fixed input normalisation.
fn prepare_input(tape: &mut Tape, cfg: &NetConfig, images: Var) -> Result<Var> {
    check_input(tape, cfg, images)?;
    let shift = tape.input(Tensor::full(Shape::vector(cfg.in_channels), -INPUT_CENTER));
    let centered = tape.add(images, shift)?;
    tape.scale(centered, INPUT_GAIN)
}

fn check_input(tape: &Tape, cfg: &NetConfig, images: Var) -> Result<()> {
    let s = tape.shape(images);
    let stride = cfg.total_stride();
    if s.c() != cfg.in_channels || s.h() % stride != 0 || s.w() % stride != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::InvalidShape(format!(
            "images {s:?} need {} channels and spatial size divisible by {stride}",
            cfg.in_channels
        )));
    }
    Ok(())
}

/// Spatial maps of one co-attentive unit, tagged with its stage (1-based).
#[derive(Clone, Debug)]
pub struct StageMaps {
    pub stage: usize,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeOutput {
    pub logits_a: Var,
    pub logits_b: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits_a: Tensor,
    pub logits_b: Tensor,
    pub maps: Vec<StageMaps>,
}

/// Two task streams of identical architecture, independently initialised,
/// exchanging features through a sharing unit after each masked stage.
#[derive(Clone, Debug)]
pub struct SharingNetwork {
    pub config: NetConfig,
    pub store: ParamStore,
    streams: [Stream; 2],
    modules: Vec<Option<SharingModule>>,
    heads: [Layer; 2],
}

impl SharingNetwork {
    pub fn build(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let streams = [
            Stream::build(&mut store, &mut Initializer::new(derive_seed(config.seed, 1)), "A", config),
            Stream::build(&mut store, &mut Initializer::new(derive_seed(config.seed, 2)), "B", config),
        ];
        let mut init = Initializer::new(derive_seed(config.seed, 3));
        let mut modules = Vec::with_capacity(config.stages.len());
        for (i, (stage, &on)) in config.stages.iter().zip(&config.insertion_mask).enumerate() {
            let c = stage.out_channels;
            let prefix = format!("share{}", i + 1);
            let m = match (on, config.sharing) {
                (false, _) | (_, SharingKind::None) => None,
                (true, SharingKind::Cas) => Some(SharingModule::Cas(CasParams::new(
                    &mut store,
                    &mut init,
                    &prefix,
                    c,
                    config.reduction,
                    config.ablation,
                )?)),
                (true, SharingKind::CrossStitch) => Some(SharingModule::CrossStitch(
                    CrossStitchParams::new(&mut store, &prefix, c)?,
                )),
                (true, SharingKind::Sluice) => Some(SharingModule::Sluice(
                    SluiceParams::new(&mut store, &prefix, c)
                        .map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?,
                )),
            };
            modules.push(m);
        }
        let mut head_init = Initializer::new(derive_seed(config.seed, 4));
        let c4 = config.last_channels();
        let heads = [
            Layer::dense(&mut store, &mut head_init, "A.head", config.labels_a, c4),
            Layer::dense(&mut store, &mut head_init, "B.head", config.labels_b, c4),
        ];
        Ok(SharingNetwork {
            config: config.clone(),
            store,
            streams,
            modules,
            heads,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn modules(&self) -> &[Option<SharingModule>] {
        &self.modules
    }

    pub fn has_cas(&self) -> bool {
        self.modules.iter().any(|m| matches!(m, Some(SharingModule::Cas(_))))
    }

    /// Records the forward pass on `tape`. Spatial maps are appended to
    /// `maps` as `(stage, map_a, map_b)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: Var,
        maps: &mut Vec<(usize, Var, Var)>,
    ) -> Result<TapeOutput> {
        let x = prepare_input(tape, &self.config, images)?;
        let mut a = x;
        let mut b = x;
        for i in 0..self.config.stages.len() {
            a = self.streams[0].stage(tape, store, i, a)?;
            b = self.streams[1].stage(tape, store, i, b)?;
            if let Some(m) = &self.modules[i] {
                let out = m.forward(tape, store, a, b)?;
                a = out.a;
                b = out.b;
                if let Some((ma, mb)) = out.maps {
                    maps.push((i + 1, ma, mb));
                }
            }
        }
        let mut head = |t: Task, x: Var| -> Result<Var> {
            let g = tape.gap(x)?;
            self.heads[t.index()].apply_dense(tape, store, g)
        };
        Ok(TapeOutput {
            logits_a: head(Task::A, a)?,
            logits_b: head(Task::B, b)?,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let mut maps = Vec::new();
        let out = self.forward_tape(&mut tape, &self.store, x, &mut maps)?;
        Ok(ForwardOutput {
            logits_a: tape.value(out.logits_a).clone(),
            logits_b: tape.value(out.logits_b).clone(),
            maps: maps
                .into_iter()
                .map(|(stage, a, b)| StageMaps {
                    stage,
                    a: tape.value(a).clone(),
                    b: tape.value(b).clone(),
                })
                .collect(),
        })
    }
}

/// One stream predicting every attribute through a single head.
#[derive(Clone, Debug)]
pub struct HardShareNet {
    pub config: NetConfig,
    pub store: ParamStore,
    stream: Stream,
    head: Layer,
}

impl HardShareNet {
    /// Uses the stage layout, label counts and seed of `config`; sharing
    /// fields are ignored.
    pub fn build(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let stream = Stream::build(&mut store, &mut Initializer::new(derive_seed(config.seed, 1)), "S", config);
        let head = Layer::dense(
            &mut store,
            &mut Initializer::new(derive_seed(config.seed, 4)),
            "S.head",
            config.labels_a + config.labels_b,
            config.last_channels(),
        );
        Ok(HardShareNet {
            config: config.clone(),
            store,
            stream,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        let mut x = prepare_input(tape, &self.config, images)?;
        for i in 0..self.config.stages.len() {
            x = self.stream.stage(tape, store, i, x)?;
        }
        let g = tape.gap(x)?;
        self.head.apply_dense(tape, store, g)
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(images.clone());
        let out = self.forward_tape(&mut tape, &self.store, x)?;
        Ok(tape.value(out).clone())
    }
}

/// Parameter count of the conv stack alone, for either network type.
pub fn stream_param_count(cfg: &NetConfig) -> usize {
    let mut cin = cfg.in_channels;
    let mut total = 0;
    for s in &cfg.stages {
        for _ in 0..s.blocks {
            total += 9 * cin * s.out_channels + s.out_channels;
            cin = s.out_channels;
        }
    }
    total
}
