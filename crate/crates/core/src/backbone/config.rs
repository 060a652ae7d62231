use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the two-branch restoration network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub opt_channels: usize,
    pub sar_channels: usize,
    /// Feature width at each resolution level.
    pub widths: Vec<usize>,
    /// NAF blocks per encoder level (both branches).
    pub enc_blocks: Vec<usize>,
    /// NAF blocks per decoder level of the optical branch.
    pub dec_blocks: Vec<usize>,
    /// Attention heads of the fusion block at each level.
    pub fusion_heads: Vec<usize>,
    pub time_embed_dim: usize,
}

impl BackboneConfig {
    /// Full-size configuration: 13 optical bands, 2 SAR polarizations,
    /// four levels of widths 22..176 with 28 blocks at the deepest level.
    pub fn full_scale() -> Self {
        Self {
            opt_channels: 13,
            sar_channels: 2,
            widths: vec![22, 44, 88, 176],
            enc_blocks: vec![1, 1, 1, 28],
            dec_blocks: vec![1, 1, 1, 1],
            fusion_heads: vec![1, 1, 2, 4],
            time_embed_dim: 88,
        }
    }

    /// Default for CPU training on 64×64 synthetic scenes.
    pub fn desk() -> Self {
        Self {
            opt_channels: 13,
            sar_channels: 2,
            widths: vec![16, 32, 64],
            enc_blocks: vec![1, 1, 2],
            dec_blocks: vec![1, 1, 1],
            fusion_heads: vec![1, 1, 2],
            time_embed_dim: 32,
        }
    }

    /// A few-thousand-parameter network for unit tests and gradient checks.
    pub fn tiny(opt_channels: usize) -> Self {
        Self {
            opt_channels,
            sar_channels: 2,
            widths: vec![8, 16],
            enc_blocks: vec![1, 1],
            dec_blocks: vec![1, 1],
            fusion_heads: vec![1, 2],
            time_embed_dim: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.widths.len();
        if l == 0 {
            return Err(Error::Config("backbone needs at least one level".into()));
        }
        if self.enc_blocks.len() != l || self.dec_blocks.len() != l || self.fusion_heads.len() != l
        {
            return Err(Error::Config(format!(
                "widths, enc_blocks, dec_blocks and fusion_heads must all have length {l}"
            )));
        }
        if self.opt_channels == 0 || self.sar_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (i, (&w, &h)) in self.widths.iter().zip(&self.fusion_heads).enumerate() {
            if w == 0 || w % 2 != 0 {
                return Err(Error::Config(format!("width {w} at level {i} must be even and positive")));
            }
            if h == 0 || w % h != 0 {
                return Err(Error::Config(format!(
                    "{h} fusion heads do not divide width {w} at level {i}"
                )));
            }
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// Stable textual form used for hashing.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "opt_channels={};sar_channels={};widths={};enc_blocks={};dec_blocks={};fusion_heads={};time_embed_dim={}",
            self.opt_channels,
            self.sar_channels,
            list(&self.widths),
            list(&self.enc_blocks),
            list(&self.dec_blocks),
            list(&self.fusion_heads),
            self.time_embed_dim
        )
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        BackboneConfig::full_scale().validate().unwrap();
        BackboneConfig::desk().validate().unwrap();
        BackboneConfig::tiny(4).validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = BackboneConfig::tiny(4);
        c.widths = vec![8, 15];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny(4);
        c.fusion_heads = vec![3, 2];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny(4);
        c.enc_blocks = vec![1];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny(4);
        c.time_embed_dim = 7;
        assert!(c.validate().is_err());
    }
}
