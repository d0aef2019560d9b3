//! Emitted samples and their binary wire format.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LDFR"
//! 4       4     u32 step
//! 8       4     f32 activation
//! 12      4     f32 discriminator score (NaN if absent)
//! 16      1     u8 burn-in flag
//! 17      1     u8 channels
//! 18      2     u16 height
//! 20      2     u16 width
//! 22      4·n   f32 raw pixels          (n = channels·height·width)
//! ..      n     u8 display pixels
//! ..      n     u8 averaged display pixels
//! ..      4     u32 parameter block length (0 = none)
//! ..      len   UTF-8 JSON parameter block
//! ```
//!
//! Readers that stop after the averaged display pixels remain compatible.

use serde::{Deserialize, Serialize};

use crate::error::{LdamError, Result};
use crate::model::NeuronRef;
use crate::regularizers::RegularizerSpec;
use crate::sampler::StepSchedule;

pub const FRAME_MAGIC: &[u8; 4] = b"LDFR";
pub const FRAME_HEADER_LEN: usize = 22;

/// Sampler parameters in force when a frame was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FrameParams {
    /// Increments on every accepted configuration edit.
    pub revision: u64,
    pub neuron: Option<NeuronRef>,
    pub activation_weight: f32,
    pub temperature: f32,
    pub sigma: f32,
    pub momentum: f32,
    pub schedule: Option<StepSchedule>,
    pub avg_window: usize,
    pub regularizers: Vec<RegularizerSpec>,
    /// `R_i(x)` for each entry of `regularizers`.
    pub regularizer_values: Vec<f64>,
    /// Set when the discriminator loop hit its step cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMessage {
    pub step: u32,
    pub activation: f32,
    pub disc_score: Option<f32>,
    pub burn_in_done: bool,
    pub channels: u8,
    pub height: u16,
    pub width: u16,
    pub raw: Vec<f32>,
    pub display: Vec<u8>,
    pub averaged_display: Vec<u8>,
    pub params: Option<FrameParams>,
}

impl FrameMessage {
    pub fn pixel_count(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.pixel_count();
        if self.raw.len() != n || self.display.len() != n || self.averaged_display.len() != n {
            return Err(LdamError::InvalidArgument(format!(
                "frame payloads ({}, {}, {}) do not match {}x{}x{}",
                self.raw.len(),
                self.display.len(),
                self.averaged_display.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        let params = match &self.params {
            Some(p) => serde_json::to_vec(p)?,
            None => Vec::new(),
        };
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 6 * n + 4 + params.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.activation.to_le_bytes());
        out.extend_from_slice(&self.disc_score.unwrap_or(f32::NAN).to_le_bytes());
        out.push(u8::from(self.burn_in_done));
        out.push(self.channels);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        for v in &self.raw {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.display);
        out.extend_from_slice(&self.averaged_display);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        out.extend_from_slice(&params);
        Ok(out)
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        let err = |reason: String| LdamError::InvalidArgument(format!("frame: {reason}"));
        if b.len() < FRAME_HEADER_LEN {
            return Err(err(format!("{} bytes is shorter than the header", b.len())));
        }
        if &b[..4] != FRAME_MAGIC {
            return Err(err("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().expect("2 bytes"));
        let step = u32_at(4);
        let activation = f32_at(8);
        let disc = f32_at(12);
        let burn_in_done = match b[16] {
            0 => false,
            1 => true,
            v => return Err(err(format!("burn-in flag {v}"))),
        };
        let channels = b[17];
        let height = u16_at(18);
        let width = u16_at(20);
        let n = channels as usize * height as usize * width as usize;
        let body_end = FRAME_HEADER_LEN + 6 * n;
        if b.len() < body_end {
            return Err(err(format!("payload truncated: need {body_end} bytes, have {}", b.len())));
        }
        let raw = b[FRAME_HEADER_LEN..FRAME_HEADER_LEN + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let disp_start = FRAME_HEADER_LEN + 4 * n;
        let display = b[disp_start..disp_start + n].to_vec();
        let averaged_display = b[disp_start + n..body_end].to_vec();
        let params = if b.len() == body_end {
            None
        } else {
            if b.len() < body_end + 4 {
                return Err(err("truncated parameter block length".into()));
            }
            let len = u32_at(body_end) as usize;
            let block = b
                .get(body_end + 4..body_end + 4 + len)
                .ok_or_else(|| err("truncated parameter block".into()))?;
            if body_end + 4 + len != b.len() {
                return Err(err("trailing bytes after parameter block".into()));
            }
            if len == 0 {
                None
            } else {
                Some(serde_json::from_slice(block)?)
            }
        };
        Ok(Self {
            step,
            activation,
            disc_score: (!disc.is_nan()).then_some(disc),
            burn_in_done,
            channels,
            height,
            width,
            raw,
            display,
            averaged_display,
            params,
        })
    }
}
