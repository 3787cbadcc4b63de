//! Three chained step networks with modality selection and multiplicative
//! mask gating: step 1 segments the whole tumor from (flair, t1ce), step 2
//! the tumor core from t1ce masked by step 1, step 3 the enhancing tumor
//! from t1ce masked by step 2.
//!
//! Gating modes: `Soft` multiplies by the raw probability, keeping the whole
//! cascade differentiable end to end (training). `Hard` binarizes the gate at
//! 0.5 and blocks gradients through it (inference); in hard mode each later
//! step's reported probability is additionally multiplied by its gate, so
//! binarized step-k foreground is structurally confined to step-(k-1)
//! foreground even before label fusion clips anything.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NodeId, ParamId, ParamStore, Tape};
use crate::unet::{NormKind, StepOutput, UNet, UNetConfig};

/// Gate threshold used by hard gating.
pub const HARD_GATE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gating {
    /// Multiply by raw probabilities; gradients flow across steps.
    #[serde(rename = "soft")]
    Soft,
    /// Binarize the gate at 0.5; gradients are blocked.
    #[serde(rename = "hard")]
    Hard,
}

/// Shared architecture of the three step networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub norm: NormKind,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig { levels: 4, base_channels: 16, norm: NormKind::Instance }
    }
}

impl CascadeConfig {
    /// Step 1 consumes (flair, t1ce); steps 2 and 3 consume masked t1ce.
    pub fn step_configs(&self) -> [UNetConfig; 3] {
        let make = |in_channels| UNetConfig {
            in_channels,
            levels: self.levels,
            base_channels: self.base_channels,
            norm: self.norm,
            aux_outputs: crate::unet::AUX_OUTPUTS,
        };
        [make(2), make(1), make(1)]
    }

    pub fn validate(&self) -> Result<()> {
        for cfg in self.step_configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// The three step networks over one shared parameter store.
#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub cfg: CascadeConfig,
    pub step1: UNet,
    pub step2: UNet,
    pub step3: UNet,
}

/// Node handles from one cascade forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CascadeForward {
    /// Raw per-step network heads (training losses read these).
    pub steps: [StepOutput; 3],
    /// Reported foreground probabilities per step (WT, TC, ET). Equal to the
    /// raw mains under soft gating; output-masked under hard gating.
    pub probs: [NodeId; 3],
}

/// Multiplicative mask gating; elementwise product of equally shaped volumes.
pub fn apply_mask(tape: &mut Tape, volume: NodeId, gate: NodeId) -> Result<NodeId> {
    tape.mul(volume, gate)
}

impl CascadeModel {
    pub fn build(cfg: CascadeConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.step_configs();
        Ok(CascadeModel {
            cfg,
            step1: UNet::build(c1, store, rng)?,
            step2: UNet::build(c2, store, rng)?,
            step3: UNet::build(c3, store, rng)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.step1.param_ids();
        ids.extend(self.step2.param_ids());
        ids.extend(self.step3.param_ids());
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.data(id).len()).sum()
    }

    /// Runs the full cascade on single-channel flair and t1ce volumes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        flair: NodeId,
        t1ce: NodeId,
        gating: Gating,
    ) -> Result<CascadeForward> {
        let sf = tape.value(flair).shape().to_vec();
        let st = tape.value(t1ce).shape().to_vec();
        if sf != st {
            return Err(Error::shape(&sf, &st));
        }
        if sf[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "cascade inputs are single-channel volumes, got {} channels",
                sf[0]
            )));
        }

        let s1_in = tape.concat(flair, t1ce)?;
        let s1 = self.step1.forward(tape, store, s1_in)?;

        let gate1 = match gating {
            Gating::Soft => s1.main,
            Gating::Hard => tape.hard_gate(s1.main, HARD_GATE_THRESHOLD),
        };
        let s2_in = apply_mask(tape, t1ce, gate1)?;
        let s2 = self.step2.forward(tape, store, s2_in)?;

        // In hard mode the reported TC probability is confined to the WT
        // gate, and the next gate hardens that *confined* probability, so
        // containment is transitive down the chain.
        let p_tc = match gating {
            Gating::Soft => s2.main,
            Gating::Hard => apply_mask(tape, s2.main, gate1)?,
        };
        let gate2 = match gating {
            Gating::Soft => s2.main,
            Gating::Hard => tape.hard_gate(p_tc, HARD_GATE_THRESHOLD),
        };
        let s3_in = apply_mask(tape, t1ce, gate2)?;
        let s3 = self.step3.forward(tape, store, s3_in)?;

        let p_et = match gating {
            Gating::Soft => s3.main,
            Gating::Hard => apply_mask(tape, s3.main, gate2)?,
        };
        Ok(CascadeForward { steps: [s1, s2, s3], probs: [s1.main, p_tc, p_et] })
    }
}
