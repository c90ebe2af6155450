use crate::data::Geometry;
use crate::error::{Error, Result};

/// Sizes of the detector stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub geom: Geometry,
    /// Width of the feature embedding: channels of the final feature map and
    /// length of each detector row.
    pub feat_dim: usize,
    /// Hidden width of the detector-weight predictor.
    pub predictor_hidden: usize,
    /// Output channels of each 3x3 conv layer, in order. Downsampling (2x2
    /// average pool) follows each of the first `geom.pool_stages()` layers.
    pub conv_channels: Vec<usize>,
}

impl ModelConfig {
    pub fn standard() -> ModelConfig {
        ModelConfig {
            geom: Geometry::standard(),
            feat_dim: 32,
            predictor_hidden: 64,
            conv_channels: vec![16, 16, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geom.validate()?;
        let stages = self.geom.pool_stages()?;
        if self.conv_channels.is_empty() {
            return Err(Error::data("conv_channels must not be empty"));
        }
        if self.conv_channels.len() < stages {
            return Err(Error::data(format!(
                "{} conv layers cannot host {stages} pooling stages",
                self.conv_channels.len()
            )));
        }
        if self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::data("conv channel counts must be positive"));
        }
        if *self.conv_channels.last().unwrap() != self.feat_dim {
            return Err(Error::data(format!(
                "last conv layer has {} channels but feat_dim is {}",
                self.conv_channels.last().unwrap(),
                self.feat_dim
            )));
        }
        if self.feat_dim == 0 || self.predictor_hidden == 0 {
            return Err(Error::data("feat_dim and predictor_hidden must be positive"));
        }
        Ok(())
    }

    /// Grid cells available to landmarks; a category fits if its landmark
    /// count is at most this.
    pub fn grid_cells(&self) -> usize {
        self.geom.feat_h * self.geom.feat_w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_is_valid() {
        ModelConfig::standard().validate().unwrap();
    }

    #[test]
    fn last_channel_must_match_feat_dim() {
        let mut cfg = ModelConfig::standard();
        cfg.feat_dim = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn too_few_layers_for_pooling_is_rejected() {
        let mut cfg = ModelConfig::standard();
        cfg.conv_channels = vec![32];
        assert!(cfg.validate().is_err());
    }
}
