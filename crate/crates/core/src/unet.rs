//! The per-step segmentation network: a 3D encoder–decoder with skip
//! connections, instance normalization, and three auxiliary sigmoid heads in
//! the expanding pathway for deep supervision.
//!
//! The encoder halves the spatial extent per level (2x2x2 max pooling) and
//! doubles channels; the decoder mirrors it with trilinear upsampling, a
//! channel-reducing convolution and skip concatenation. Every head is a 1³
//! projection to one channel followed by upsampling to full resolution and a
//! sigmoid, so all heads compare against labels at label resolution.
//!
//! Auxiliary tap placement: with at least three decoder stages the heads tap
//! the three coarsest stage outputs; with two stages they tap the bottleneck
//! and both stage outputs; with one stage (levels = 2) the bottleneck, the
//! stage's first conv block and the stage output. This keeps exactly three
//! aux heads valid for every `levels >= 2`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamId, ParamStore, Tape};

const LEAKY_SLOPE: f64 = 0.01;

/// Number of auxiliary deep-supervision heads; fixed by the architecture.
pub const AUX_OUTPUTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Per-sample, per-channel normalization; batch statistics are degenerate
    /// at batch size 1.
    #[serde(rename = "instance")]
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Number of resolution levels (encoder depth); >= 2.
    pub levels: usize,
    /// Channels at the finest level; doubled per level below.
    pub base_channels: usize,
    pub norm: NormKind,
    /// Fixed at 3; kept in the config for checkpoint self-description.
    pub aux_outputs: usize,
}

impl UNetConfig {
    pub fn new(in_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            levels: 4,
            base_channels: 16,
            norm: NormKind::Instance,
            aux_outputs: AUX_OUTPUTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        if self.aux_outputs != AUX_OUTPUTS {
            return Err(Error::InvalidArgument(format!(
                "aux_outputs is fixed at {AUX_OUTPUTS}, got {}",
                self.aux_outputs
            )));
        }
        Ok(())
    }

    /// Encoder channel ladder, finest to coarsest.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.base_channels << i).collect()
    }

    /// Spatial extents must be divisible by this along every axis.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// conv3 + instance norm + leaky ReLU.
#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gain: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvBlock,
    block1: ConvBlock,
    block2: ConvBlock,
}

/// Where an auxiliary head taps the expanding pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapPoint {
    Bottleneck,
    DecBlock1 { stage: usize },
    DecOut { stage: usize },
}

/// Coarse-to-fine tap selection for exactly three aux heads.
fn aux_tap_points(levels: usize) -> [TapPoint; 3] {
    let stages = levels - 1;
    match stages {
        1 => [TapPoint::Bottleneck, TapPoint::DecBlock1 { stage: 0 }, TapPoint::DecOut { stage: 0 }],
        2 => [TapPoint::Bottleneck, TapPoint::DecOut { stage: 0 }, TapPoint::DecOut { stage: 1 }],
        _ => [
            TapPoint::DecOut { stage: 0 },
            TapPoint::DecOut { stage: 1 },
            TapPoint::DecOut { stage: 2 },
        ],
    }
}

fn tap_level(levels: usize, tap: TapPoint) -> usize {
    match tap {
        TapPoint::Bottleneck => levels - 1,
        TapPoint::DecBlock1 { stage } | TapPoint::DecOut { stage } => levels - 2 - stage,
    }
}

/// One step network; parameters live in the shared store.
#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    enc: Vec<[ConvBlock; 2]>,
    /// Decoder stages ordered coarse to fine.
    dec: Vec<DecoderStage>,
    main_head: (ParamId, ParamId),
    aux_heads: [(ParamId, ParamId); AUX_OUTPUTS],
}

/// Full-resolution sigmoid outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub main: NodeId,
    /// Coarsest tap first.
    pub aux: [NodeId; AUX_OUTPUTS],
}

fn he_conv(store: &mut ParamStore, oc: usize, ic: usize, k: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
    let fan_in = ic * k * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let data: Vec<f64> = (0..oc * ic * k * k * k).map(|_| normal.sample(rng)).collect();
    let w = store.add(vec![oc, ic, k, k, k], data);
    let b = store.add(vec![oc], vec![0.0; oc]);
    (w, b)
}

fn norm_params(store: &mut ParamStore, c: usize) -> (ParamId, ParamId) {
    (store.add(vec![c], vec![1.0; c]), store.add(vec![c], vec![0.0; c]))
}

fn conv_block(store: &mut ParamStore, oc: usize, ic: usize, rng: &mut impl Rng) -> ConvBlock {
    let (w, b) = he_conv(store, oc, ic, 3, rng);
    let (gain, beta) = norm_params(store, oc);
    ConvBlock { w, b, gain, beta }
}

impl UNet {
    pub fn build(cfg: UNetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<UNet> {
        cfg.validate()?;
        let channels = cfg.encoder_channels();
        let levels = cfg.levels;

        let mut enc = Vec::with_capacity(levels);
        for (i, &c) in channels.iter().enumerate() {
            let c_in = if i == 0 { cfg.in_channels } else { channels[i - 1] };
            enc.push([conv_block(store, c, c_in, rng), conv_block(store, c, c, rng)]);
        }

        let mut dec = Vec::with_capacity(levels - 1);
        for stage in 0..levels - 1 {
            let level = levels - 2 - stage;
            let c = channels[level];
            let c_below = channels[level + 1];
            dec.push(DecoderStage {
                up: conv_block(store, c, c_below, rng),
                block1: conv_block(store, c, 2 * c, rng),
                block2: conv_block(store, c, c, rng),
            });
        }

        let main_head = he_conv(store, 1, channels[0], 1, rng);
        let taps = aux_tap_points(levels);
        let mut aux_heads = [(ParamId(0), ParamId(0)); AUX_OUTPUTS];
        for (slot, &tap) in aux_heads.iter_mut().zip(&taps) {
            let c = channels[tap_level(levels, tap)];
            *slot = he_conv(store, 1, c, 1, rng);
        }

        Ok(UNet { cfg, enc, dec, main_head, aux_heads })
    }

    /// Every parameter of this network, in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let push_block = |b: &ConvBlock, ids: &mut Vec<ParamId>| {
            ids.extend([b.w, b.b, b.gain, b.beta]);
        };
        for level in &self.enc {
            push_block(&level[0], &mut ids);
            push_block(&level[1], &mut ids);
        }
        for stage in &self.dec {
            push_block(&stage.up, &mut ids);
            push_block(&stage.block1, &mut ids);
            push_block(&stage.block2, &mut ids);
        }
        ids.extend([self.main_head.0, self.main_head.1]);
        for (w, b) in &self.aux_heads {
            ids.extend([*w, *b]);
        }
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.data(id).len()).sum()
    }

    fn check_input(&self, tape: &Tape, input: NodeId) -> Result<()> {
        let s = tape.value(input).shape().to_vec();
        if s[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels, s[0]
            )));
        }
        let div = self.cfg.divisor();
        for (axis, name) in [(1usize, "depth"), (2, "height"), (3, "width")] {
            if !s[axis].is_multiple_of(div) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} extent {} is not divisible by {div} (levels = {})",
                    s[axis], self.cfg.levels
                )));
            }
        }
        Ok(())
    }

    fn run_block(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, b: &ConvBlock) -> Result<NodeId> {
        let x = tape.conv(store, x, b.w, b.b)?;
        let x = tape.instance_norm(store, x, b.gain, b.beta)?;
        Ok(tape.leaky_relu(x, LEAKY_SLOPE))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: NodeId) -> Result<StepOutput> {
        self.check_input(tape, input)?;
        let levels = self.cfg.levels;

        let mut skips = Vec::with_capacity(levels);
        let mut x = input;
        for (i, blocks) in self.enc.iter().enumerate() {
            x = self.run_block(tape, store, x, &blocks[0])?;
            x = self.run_block(tape, store, x, &blocks[1])?;
            skips.push(x);
            if i + 1 < levels {
                x = tape.max_pool2(x)?;
            }
        }
        let bottleneck = x;

        let mut dec_block1 = Vec::with_capacity(levels - 1);
        let mut dec_out = Vec::with_capacity(levels - 1);
        for (stage, s) in self.dec.iter().enumerate() {
            let level = levels - 2 - stage;
            x = tape.upsample(x, 2)?;
            x = self.run_block(tape, store, x, &s.up)?;
            x = tape.concat(x, skips[level])?;
            x = self.run_block(tape, store, x, &s.block1)?;
            dec_block1.push(x);
            x = self.run_block(tape, store, x, &s.block2)?;
            dec_out.push(x);
        }

        let main_logits = tape.conv(store, x, self.main_head.0, self.main_head.1)?;
        let main = tape.sigmoid(main_logits);

        let taps = aux_tap_points(levels);
        let mut aux = [main; AUX_OUTPUTS];
        for (slot, (&tap, &(w, b))) in aux.iter_mut().zip(taps.iter().zip(&self.aux_heads)) {
            let node = match tap {
                TapPoint::Bottleneck => bottleneck,
                TapPoint::DecBlock1 { stage } => dec_block1[stage],
                TapPoint::DecOut { stage } => dec_out[stage],
            };
            let logits = tape.conv(store, node, w, b)?;
            let factor = 1 << tap_level(levels, tap);
            let up = tape.upsample(logits, factor)?;
            *slot = tape.sigmoid(up);
        }

        Ok(StepOutput { main, aux })
    }
}
