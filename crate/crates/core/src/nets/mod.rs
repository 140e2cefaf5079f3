//! Bi-Real-style binary network specifications and the model builder.

mod model;
pub mod sweep;

pub use model::{LayerDesc, LayerKind, LayerTrace, Mode, Model, Param, ParamRole, Pass};

use crate::binarize::{BinarizerChoice, BinarizerKind};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Shape4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StemKind {
    /// `kernel × kernel` real conv and batchnorm, optionally followed by a
    /// 3×3 stride-2 max pool.
    Plain { kernel: usize, stride: usize, maxpool: bool },
    /// Stride-2 3×3 conv to half the width, batchnorm and PReLU, then a
    /// stride-2 3×3 depthwise conv with multiplier 2 and batchnorm.
    QuickNet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    /// 1-based stage index.
    pub stage: usize,
    pub layers: usize,
    pub channels: usize,
    /// Stride of the first layer of the stage.
    pub stride: usize,
    pub binarizer: BinarizerChoice,
    pub use_prelu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    /// Per-image input shape; `n` is ignored.
    pub input: Shape4,
    pub stem: StemKind,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
    /// PReLU after the shortcut add (otherwise between batchnorm and add).
    pub prelu_after_add: bool,
    /// Keep every conv real-valued (reference network for op counting).
    pub full_precision: bool,
    pub binary_padding: Padding,
    pub lab_kernel: usize,
    pub lab_padding: Padding,
    pub niblack_k: Real,
    pub sauvola_k: Real,
    pub sauvola_r: Option<Real>,
    pub threshold_window: usize,
}

impl ModelSpec {
    /// Four stages with `layers` binary convs each, widths doubling from
    /// `base`, plain 3×3 stride-1 stem.
    pub fn staged(input: Shape4, classes: usize, base: usize, layers: usize) -> Self {
        let blocks = (1..=4)
            .map(|stage| BlockSpec {
                stage,
                layers,
                channels: base << (stage - 1),
                stride: if stage == 1 { 1 } else { 2 },
                binarizer: BinarizerChoice::Sign,
                use_prelu: true,
            })
            .collect();
        ModelSpec {
            input: Shape4 { n: 1, ..input },
            stem: StemKind::Plain {
                kernel: 3,
                stride: 1,
                maxpool: false,
            },
            blocks,
            classes,
            prelu_after_add: true,
            full_precision: false,
            binary_padding: Padding::SAME_MINUS_ONE,
            lab_kernel: 3,
            lab_padding: Padding::SAME_ZERO,
            niblack_k: BinarizerKind::NIBLACK_K,
            sauvola_k: BinarizerKind::SAUVOLA_K,
            sauvola_r: None,
            threshold_window: BinarizerKind::WINDOW,
        }
    }

    /// Desk-scale default: 4 stages × 2 layers, widths 32/64/128/256.
    pub fn desk(input: Shape4, classes: usize) -> Self {
        Self::staged(input, classes, 32, 2)
    }

    pub fn cifar10() -> Self {
        Self::desk(Shape4 { n: 1, c: 3, h: 32, w: 32 }, 10)
    }

    pub fn mnist() -> Self {
        Self::desk(Shape4 { n: 1, c: 1, h: 28, w: 28 }, 10)
    }

    /// ResNet-18 / Bi-RealNet-18 topology on 224×224 ImageNet inputs.
    pub fn resnet18_imagenet(full_precision: bool) -> Self {
        let mut s = Self::staged(Shape4 { n: 1, c: 3, h: 224, w: 224 }, 1000, 64, 4);
        s.stem = StemKind::Plain {
            kernel: 7,
            stride: 2,
            maxpool: true,
        };
        s.full_precision = full_precision;
        for b in &mut s.blocks {
            b.use_prelu = false;
        }
        s
    }

    pub fn with_binarizer(mut self, choice: BinarizerChoice) -> Self {
        for b in &mut self.blocks {
            b.binarizer = choice;
        }
        self
    }

    /// LAB in every stage whose bit is set (bit 0 = first stage), sign
    /// elsewhere.
    pub fn with_lab_mask(mut self, mask: u32) -> Self {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.binarizer = if mask & (1 << i) != 0 {
                BinarizerChoice::Lab
            } else {
                BinarizerChoice::Sign
            };
        }
        self
    }

    pub fn binary_layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layers).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        self.input.validate()?;
        if self.blocks.is_empty() {
            return bad("a model needs at least one stage".into());
        }
        if self.classes == 0 {
            return bad("classifier width must be positive".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.stage != i + 1 {
                return bad(format!("stage {} listed in position {}", b.stage, i + 1));
            }
            if b.channels == 0 || b.layers == 0 {
                return bad(format!("stage {} needs positive channels and layers", b.stage));
            }
            if b.stride != 1 && b.stride != 2 {
                return bad(format!("stage {} stride must be 1 or 2, got {}", b.stage, b.stride));
            }
            if i > 0 && b.channels != 2 * self.blocks[i - 1].channels {
                return bad(format!(
                    "stage {} has {} channels; widths must double per stage",
                    b.stage, b.channels
                ));
            }
        }
        match self.stem {
            StemKind::Plain { kernel, stride, .. } => {
                if kernel == 0 || stride == 0 {
                    return bad("stem kernel and stride must be positive".into());
                }
            }
            StemKind::QuickNet => {
                if !self.blocks[0].channels.is_multiple_of(2) {
                    return bad("quicknet stem needs an even first-stage width".into());
                }
            }
        }
        if self.lab_kernel.is_multiple_of(2) {
            return bad(format!("LAB kernel must be odd, got {}", self.lab_kernel));
        }
        if let Padding::Same(v) = self.binary_padding {
            if v != -1.0 && v != 0.0 && v != 1.0 {
                return bad(format!("binary pad value must be −1, 0 or +1, got {v}"));
            }
        }
        BinarizerKind::Niblack {
            k: self.niblack_k,
            window: self.threshold_window,
        }
        .validate()?;
        BinarizerKind::Sauvola {
            k: self.sauvola_k,
            window: self.threshold_window,
            r: self.sauvola_r,
        }
        .validate()
    }

    /// Extra trainable scalars one LAB site on `c` channels adds.
    pub fn lab_site_params(&self, c: usize) -> usize {
        2 * c * self.lab_kernel * self.lab_kernel + 2 * c + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_spec_is_valid() {
        let s = ModelSpec::cifar10();
        s.validate().unwrap();
        assert_eq!(s.binary_layer_count(), 8);
        assert_eq!(s.blocks.iter().map(|b| b.channels).collect::<Vec<_>>(), vec![32, 64, 128, 256]);
        ModelSpec::resnet18_imagenet(true).validate().unwrap();
    }

    #[test]
    fn lab_mask_selects_stages() {
        let s = ModelSpec::cifar10().with_lab_mask(0b1010);
        let kinds: Vec<_> = s.blocks.iter().map(|b| b.binarizer).collect();
        assert_eq!(
            kinds,
            vec![BinarizerChoice::Sign, BinarizerChoice::Lab, BinarizerChoice::Sign, BinarizerChoice::Lab]
        );
        assert_eq!(ModelSpec::cifar10().with_lab_mask(0b1111), ModelSpec::cifar10().with_binarizer(BinarizerChoice::Lab));
        assert_eq!(ModelSpec::cifar10().with_lab_mask(0), ModelSpec::cifar10());
    }

    #[test]
    fn rejects_widths_that_do_not_double() {
        let mut s = ModelSpec::cifar10();
        s.blocks[2].channels = 100;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::cifar10();
        s.blocks[0].stride = 3;
        assert!(s.validate().is_err());
    }
}
