use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Domain;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid architecture: {0}")]
pub struct ArchError(pub String);

/// Shape settings for all eight networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Height and width of images in both domains.
    pub image_size: usize,
    pub x_channels: usize,
    pub y_channels: usize,
    /// Channels of the domain-invariant code.
    pub code_channels: usize,
    /// Length of the domain-specific code.
    pub code_dim: usize,
    pub base_filters: usize,
    pub encoder_res_blocks: usize,
    pub generator_res_blocks: usize,
    /// Stride-2 convolutions of the domain-specific encoder after the shared stem.
    pub specific_downsamples: usize,
    pub disc_base_filters: usize,
    pub disc_downsamples: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            x_channels: 1,
            y_channels: 3,
            code_channels: 64,
            code_dim: 8,
            base_filters: 32,
            encoder_res_blocks: 3,
            generator_res_blocks: 3,
            specific_downsamples: 3,
            disc_base_filters: 32,
            disc_downsamples: 3,
        }
    }
}

impl ArchConfig {
    /// 8x8 images with two-channel features, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            x_channels: 1,
            y_channels: 3,
            code_channels: 2,
            code_dim: 2,
            base_filters: 2,
            encoder_res_blocks: 1,
            generator_res_blocks: 1,
            specific_downsamples: 1,
            disc_base_filters: 2,
            disc_downsamples: 2,
        }
    }

    pub fn channels(&self, domain: Domain) -> usize {
        match domain {
            Domain::X => self.x_channels,
            Domain::Y => self.y_channels,
        }
    }

    /// Spatial size of the domain-invariant code (two stride-2 halvings).
    pub fn code_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn image_shape(&self, domain: Domain) -> [usize; 3] {
        [self.channels(domain), self.image_size, self.image_size]
    }

    /// Side of the discriminator's patch logit map.
    pub fn patch_size(&self) -> usize {
        self.image_size >> self.disc_downsamples
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let positive = [
            ("image_size", self.image_size),
            ("x_channels", self.x_channels),
            ("y_channels", self.y_channels),
            ("code_channels", self.code_channels),
            ("code_dim", self.code_dim),
            ("base_filters", self.base_filters),
            ("encoder_res_blocks", self.encoder_res_blocks),
            ("generator_res_blocks", self.generator_res_blocks),
            ("specific_downsamples", self.specific_downsamples),
            ("disc_base_filters", self.disc_base_filters),
            ("disc_downsamples", self.disc_downsamples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ArchError(format!("{name} must be positive")));
        }
        if self.image_size % 4 != 0 {
            return Err(ArchError(format!(
                "image_size {} must be divisible by 4",
                self.image_size
            )));
        }
        if self.specific_downsamples >= usize::BITS as usize
            || self.code_size() % (1 << self.specific_downsamples) != 0
        {
            return Err(ArchError(format!(
                "code size {} cannot be halved {} times without odd sizes",
                self.code_size(),
                self.specific_downsamples
            )));
        }
        if self.disc_downsamples >= usize::BITS as usize
            || self.image_size % (1 << self.disc_downsamples) != 0
        {
            return Err(ArchError(format!(
                "image_size {} cannot be halved {} times by the discriminator",
                self.image_size, self.disc_downsamples
            )));
        }
        Ok(())
    }

    /// Compact identifier of every shape-determining setting.
    pub fn fingerprint(&self) -> String {
        format!(
            "img{}-x{}-y{}-cc{}-dim{}-f{}-er{}-gr{}-sd{}-df{}-dd{}",
            self.image_size,
            self.x_channels,
            self.y_channels,
            self.code_channels,
            self.code_dim,
            self.base_filters,
            self.encoder_res_blocks,
            self.generator_res_blocks,
            self.specific_downsamples,
            self.disc_base_filters,
            self.disc_downsamples
        )
    }
}
