//! Variant hyper-parameters and derived sizes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named network width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Slim,
    Fit,
    Wide,
    Custom,
}

impl Variant {
    pub const NAMED: [Variant; 3] = [Variant::Slim, Variant::Fit, Variant::Wide];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Slim => "slim",
            Variant::Fit => "fit",
            Variant::Wide => "wide",
            Variant::Custom => "custom",
        }
    }

    /// Head count of the named variants.
    pub fn heads(self) -> Option<usize> {
        match self {
            Variant::Slim => Some(4),
            Variant::Fit => Some(8),
            Variant::Wide => Some(12),
            Variant::Custom => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slim" => Ok(Variant::Slim),
            "fit" => Ok(Variant::Fit),
            "wide" => Ok(Variant::Wide),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variant {s:?}, expected slim|fit|wide"
            ))),
        }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    /// H
    pub heads: usize,
    /// D, channels per head
    pub head_dim: usize,
    /// C
    pub channels: usize,
    /// E
    pub expanded: usize,
    /// F
    pub final_channels: usize,
    /// K
    pub num_classes: usize,
    /// T
    pub frames: usize,
    /// Side of the square input mesh.
    pub mesh: usize,
    pub spatial_kernel: usize,
    pub spatial_stride: usize,
    /// Temporal kernel lengths; every conv splits its outputs evenly over them.
    pub temporal_kernels: Vec<usize>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl VariantConfig {
    /// One of the three named variants on 32×32 meshes with an 8/4 spatial
    /// kernel/stride.
    pub fn named(variant: Variant, num_classes: usize, frames: usize) -> Result<Self> {
        let h = variant
            .heads()
            .ok_or_else(|| Error::InvalidArgument("custom variants need explicit sizes".into()))?;
        let head_dim = h / 2;
        let channels = h * head_dim;
        let cfg = Self {
            variant,
            heads: h,
            head_dim,
            channels,
            expanded: channels * h / 2,
            final_channels: 64 * h,
            num_classes,
            frames,
            mesh: 32,
            spatial_kernel: 8,
            spatial_stride: 4,
            temporal_kernels: vec![3, 5],
            hidden: vec![500, 100],
            dropout: 0.5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn slim(num_classes: usize) -> Self {
        Self::named(Variant::Slim, num_classes, 32).expect("slim is valid")
    }

    pub fn fit(num_classes: usize) -> Self {
        Self::named(Variant::Fit, num_classes, 32).expect("fit is valid")
    }

    pub fn wide(num_classes: usize) -> Self {
        Self::named(Variant::Wide, num_classes, 32).expect("wide is valid")
    }

    /// Small custom network on 12×12 meshes (P = 9) for gradient checks:
    /// C = 4, H = 2, D = 2, E = 4, F = 8, T = 8, K = 3 and a 16/8 classifier.
    pub fn miniature() -> Self {
        Self {
            variant: Variant::Custom,
            heads: 2,
            head_dim: 2,
            channels: 4,
            expanded: 4,
            final_channels: 8,
            num_classes: 3,
            frames: 8,
            mesh: 12,
            spatial_kernel: 6,
            spatial_stride: 3,
            temporal_kernels: vec![3, 5],
            hidden: vec![16, 8],
            dropout: 0.5,
        }
    }

    /// Changes the head count while keeping D, E and F, so C = H·D follows H.
    pub fn with_heads(&self, heads: usize) -> Result<Self> {
        let cfg = Self {
            variant: Variant::Custom,
            heads,
            channels: heads * self.head_dim,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn patch_side(&self) -> usize {
        (self.mesh - self.spatial_kernel) / self.spatial_stride + 1
    }

    /// P
    pub fn patches(&self) -> usize {
        self.patch_side() * self.patch_side()
    }

    /// Length of the flattened encoder output fed to the classifier.
    pub fn classifier_input(&self) -> usize {
        self.final_channels * self.frames
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.heads == 0 || self.head_dim == 0 || self.num_classes == 0 || self.frames == 0 {
            return bad("heads, head_dim, num_classes and frames must be positive".into());
        }
        if self.heads * self.head_dim != self.channels {
            return bad(format!(
                "C = {} is not H·D = {}·{}",
                self.channels, self.heads, self.head_dim
            ));
        }
        let splits = self.temporal_kernels.len();
        if splits == 0 || self.temporal_kernels.contains(&0) {
            return bad("temporal kernels must be non-empty and positive".into());
        }
        for (name, v) in [
            ("C", self.channels),
            ("E", self.expanded),
            ("F", self.final_channels),
        ] {
            if v == 0 || v % splits != 0 {
                return bad(format!(
                    "{name} = {v} does not split over {splits} temporal kernels"
                ));
            }
        }
        if self.spatial_stride == 0 || self.spatial_kernel == 0 || self.spatial_kernel > self.mesh {
            return bad(format!(
                "spatial kernel {} / stride {} invalid for mesh {}",
                self.spatial_kernel, self.spatial_stride, self.mesh
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if self.variant != Variant::Custom {
            let h = self.heads;
            if self.expanded != self.channels * h / 2 || self.final_channels != 64 * h {
                return bad(format!(
                    "{} sizes violate E = C·H/2, F = 64·H",
                    self.variant
                ));
            }
        }
        Ok(())
    }
}
