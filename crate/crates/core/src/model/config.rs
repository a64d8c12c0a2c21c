use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel, stride and padding of the patch-embedding convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Patch-embedding geometry for patch size `p` and overlap `overlap`.
///
/// With `overlap >= 2` the kernel spans `p·overlap` pixels so neighbouring
/// patches share pixels; otherwise patches tile the frame exactly.
pub fn encoder_geometry(p: usize, overlap: usize) -> EncoderGeometry {
    if overlap >= 2 {
        EncoderGeometry {
            kernel: p * overlap,
            stride: p,
            padding: (overlap - 1) * p / 2,
        }
    } else {
        EncoderGeometry {
            kernel: p,
            stride: p,
            padding: 0,
        }
    }
}

impl EncoderGeometry {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Hidden dims at or above this use overlapping patches by default.
pub const LARGE_MODEL_HIDDEN: usize = 1000;

pub fn default_overlap(hidden: usize) -> usize {
    if hidden >= LARGE_MODEL_HIDDEN {
        2
    } else {
        0
    }
}

/// Full hyperparameter tuple of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Past frames fed to the model.
    pub t_in: usize,
    /// Future frames predicted.
    pub t_out: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of the patch embedding.
    pub hidden: usize,
    /// Number of mixer blocks.
    pub depth: usize,
    pub patch: usize,
    pub overlap: usize,
    /// Kernel of the first (local) depthwise conv.
    pub kernel_local: usize,
    /// Kernel of the second (dilated) depthwise conv.
    pub kernel_global: usize,
    pub dilation: usize,
}

/// Named configurations; the `Mmnist*` family targets 10→10 frames of 64×64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    MmnistXs,
    MmnistS,
    MmnistM,
    MmnistL,
    TaxiBj,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::MmnistXs,
        Preset::MmnistS,
        Preset::MmnistM,
        Preset::MmnistL,
        Preset::TaxiBj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MmnistXs => "mmnist-xs",
            Preset::MmnistS => "mmnist-s",
            Preset::MmnistM => "mmnist-m",
            Preset::MmnistL => "mmnist-l",
            Preset::TaxiBj => "taxibj",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn config(self) -> ModelConfig {
        let mmnist = |hidden| ModelConfig {
            t_in: 10,
            t_out: 10,
            channels: 1,
            height: 64,
            width: 64,
            hidden,
            depth: 16,
            patch: 2,
            overlap: default_overlap(hidden),
            kernel_local: 3,
            kernel_global: 7,
            dilation: 3,
        };
        match self {
            Preset::MmnistXs => mmnist(800),
            Preset::MmnistS => mmnist(1000),
            Preset::MmnistM => mmnist(1200),
            Preset::MmnistL => mmnist(1400),
            Preset::TaxiBj => ModelConfig {
                t_in: 4,
                t_out: 4,
                channels: 2,
                height: 32,
                width: 32,
                patch: 1,
                ..mmnist(400)
            },
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Preset::MmnistL.config()
    }
}

impl ModelConfig {
    /// Field names in checkpoint serialization order.
    pub const FIELDS: [&'static str; 12] = [
        "t_in",
        "t_out",
        "channels",
        "height",
        "width",
        "hidden",
        "depth",
        "patch",
        "overlap",
        "kernel_local",
        "kernel_global",
        "dilation",
    ];

    pub fn to_fields(&self) -> [usize; 12] {
        [
            self.t_in,
            self.t_out,
            self.channels,
            self.height,
            self.width,
            self.hidden,
            self.depth,
            self.patch,
            self.overlap,
            self.kernel_local,
            self.kernel_global,
            self.dilation,
        ]
    }

    pub fn from_fields(f: [usize; 12]) -> Self {
        Self {
            t_in: f[0],
            t_out: f[1],
            channels: f[2],
            height: f[3],
            width: f[4],
            hidden: f[5],
            depth: f[6],
            patch: f[7],
            overlap: f[8],
            kernel_local: f[9],
            kernel_global: f[10],
            dilation: f[11],
        }
    }

    /// First field that differs from `other`, as (name, self, other).
    pub fn first_difference(&self, other: &Self) -> Option<(&'static str, usize, usize)> {
        Self::FIELDS
            .iter()
            .zip(self.to_fields().into_iter().zip(other.to_fields()))
            .find(|(_, (a, b))| a != b)
            .map(|(name, (a, b))| (*name, a, b))
    }

    pub fn encoder(&self) -> EncoderGeometry {
        encoder_geometry(self.patch, self.overlap)
    }

    pub fn in_channels(&self) -> usize {
        self.t_in * self.channels
    }

    pub fn out_channels(&self) -> usize {
        self.t_out * self.channels
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Channels entering the reassemble conv after the shuffle.
    pub fn shuffled_channels(&self) -> usize {
        self.hidden / (self.patch * self.patch)
    }

    /// Block indices (store, add) of the long skip, or `None` when it would degenerate.
    pub fn skip_schedule(&self) -> Option<(usize, usize)> {
        (self.depth >= 3).then(|| (self.depth / 3, 2 * self.depth / 3))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::FIELDS.iter().zip(self.to_fields()) {
            if v == 0 && *name != "overlap" {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        let p2 = self.patch * self.patch;
        if !self.hidden.is_multiple_of(p2) {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by patch² = {p2}",
                self.hidden
            )));
        }
        if self.kernel_local.is_multiple_of(2) || self.kernel_global.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "mixer kernels must be odd, got {} and {}",
                self.kernel_local, self.kernel_global
            )));
        }
        let enc = self.encoder();
        let (lh, lw) = self.latent_hw();
        let got = (enc.output_extent(self.height), enc.output_extent(self.width));
        if got != (Some(lh), Some(lw)) {
            return Err(Error::Config(format!(
                "encoder geometry {enc:?} maps {}x{} to {:?}, not the {lh}x{lw} patch grid",
                self.height, self.width, got
            )));
        }
        Ok(())
    }
}
