use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// One stage of residual blocks sharing a channel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub num_blocks: usize,
    pub out_channels: usize,
    pub first_block_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: StemSpec,
    pub groups: Vec<GroupSpec>,
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    3
}

/// Shape of one residual block: output width and stride of its first conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub out_channels: usize,
    pub stride: usize,
}

/// An early-exit branch attached after backbone group `attach_after_group`
/// (1-based). It carries one sampled block per deeper backbone group,
/// copying that group's width and first-block stride, followed by global
/// average pooling and a fully-connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub attach_after_group: usize,
    pub sampled_blocks: Vec<BlockShape>,
}

impl BranchSpec {
    /// Samples one block from each backbone group deeper than the attach point.
    pub fn sample(backbone: &BackboneSpec, attach_after_group: usize) -> Result<Self> {
        let g = backbone.groups.len();
        if attach_after_group == 0 || attach_after_group >= g {
            return Err(Error::Validation(format!(
                "attach point {attach_after_group} outside [1, {}]",
                g - 1
            )));
        }
        let sampled_blocks = backbone.groups[attach_after_group..]
            .iter()
            .map(|grp| BlockShape {
                out_channels: grp.out_channels,
                stride: grp.first_block_stride,
            })
            .collect();
        Ok(BranchSpec {
            attach_after_group,
            sampled_blocks,
        })
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.groups.len() < 2 {
            return fail(format!(
                "backbone needs at least 2 groups for an early exit to exist, got {}",
                self.groups.len()
            ));
        }
        if self.num_classes < 1 {
            return fail("num_classes must be positive".into());
        }
        if self.in_channels < 1 {
            return fail("in_channels must be positive".into());
        }
        let stem = &self.stem;
        if stem.channels == 0 || stem.kernel == 0 || stem.kernel % 2 == 0 || !(1..=2).contains(&stem.stride) {
            return fail(format!(
                "stem needs positive channels, an odd kernel and stride 1 or 2, got {stem:?}"
            ));
        }
        let mut prev = stem.channels;
        for (i, grp) in self.groups.iter().enumerate() {
            if grp.num_blocks == 0 || grp.out_channels == 0 {
                return fail(format!("group {} must have positive num_blocks and out_channels", i + 1));
            }
            if !(1..=2).contains(&grp.first_block_stride) {
                return fail(format!("group {} first_block_stride must be 1 or 2", i + 1));
            }
            if i > 0 && grp.out_channels < prev {
                return fail(format!(
                    "out_channels must be nondecreasing across groups: group {} has {} after {prev}",
                    i + 1,
                    grp.out_channels
                ));
            }
            prev = grp.out_channels;
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.groups.last().map(|g| g.out_channels).unwrap_or(self.stem.channels)
    }

    /// One exit after every group except the last.
    pub fn default_attach_points(&self) -> Vec<usize> {
        (1..self.groups.len()).collect()
    }

    /// Four groups of two blocks, widths 64..512, strides (1, 2, 2, 2).
    pub fn resnet18(num_classes: usize) -> Self {
        let widths = [64, 128, 256, 512];
        BackboneSpec {
            in_channels: 3,
            stem: StemSpec { channels: 64, kernel: 3, stride: 1 },
            groups: widths
                .iter()
                .enumerate()
                .map(|(i, &w)| GroupSpec {
                    num_blocks: 2,
                    out_channels: w,
                    first_block_stride: if i == 0 { 1 } else { 2 },
                })
                .collect(),
            num_classes,
        }
    }
}

pub fn validate_attach_points(backbone: &BackboneSpec, points: &[usize]) -> Result<()> {
    let g = backbone.groups.len();
    for (i, &p) in points.iter().enumerate() {
        if p == 0 || p >= g {
            return Err(Error::Validation(format!("attach point {p} outside [1, {}]", g - 1)));
        }
        if i > 0 && p <= points[i - 1] {
            return Err(Error::Validation(format!(
                "attach points must be strictly increasing, got {points:?}"
            )));
        }
    }
    Ok(())
}

/// JSON architecture document: backbone plus the branch attach points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: StemSpec,
    pub groups: Vec<GroupSpec>,
    pub num_classes: usize,
    /// Absent means one exit after every group but the last.
    #[serde(default)]
    pub attach_points: Option<Vec<usize>>,
}

impl ArchConfig {
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            in_channels: self.in_channels,
            stem: self.stem,
            groups: self.groups.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn resolved_attach_points(&self) -> Vec<usize> {
        self.attach_points
            .clone()
            .unwrap_or_else(|| self.backbone().default_attach_points())
    }

    pub fn from_parts(backbone: &BackboneSpec, attach_points: &[usize]) -> Self {
        ArchConfig {
            in_channels: backbone.in_channels,
            stem: backbone.stem,
            groups: backbone.groups.clone(),
            num_classes: backbone.num_classes,
            attach_points: Some(attach_points.to_vec()),
        }
    }

    /// Same architecture with the attach points written out explicitly.
    pub fn resolved(&self) -> Self {
        ArchConfig {
            attach_points: Some(self.resolved_attach_points()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let backbone = self.backbone();
        backbone.validate()?;
        validate_attach_points(&backbone, &self.resolved_attach_points())
    }

    /// Short hex digest identifying the resolved architecture.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.resolved()).expect("architecture serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: ArchConfig = serde_json::from_str(text)?;
        arch.validate()?;
        Ok(arch)
    }
}
