//! Detector architecture configuration and parameter accounting.

use serde::{Deserialize, Serialize};

use crate::cubes::BandSubset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 2x2 max pool after the activation.
    pub pool: bool,
}

/// Conv stack + dense head. The mitigation knobs (`width_multiplier`,
/// `extra_conv_layers`, wider `input_bands`) reshape the network without any
/// code changes: effective layer lists are derived on build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_bands: BandSubset,
    /// Expected input spatial size (rows, cols); weight shapes depend on it.
    pub input_size: [usize; 2],
    pub conv_specs: Vec<ConvSpec>,
    /// Dense widths; the last must be 1 (scalar cloud confidence).
    pub dense_specs: Vec<usize>,
    #[serde(default = "default_width_multiplier")]
    pub width_multiplier: f64,
    #[serde(default)]
    pub extra_conv_layers: usize,
}

fn default_width_multiplier() -> f64 {
    1.0
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::reference()
    }
}

impl ArchConfig {
    /// The full-scale detector: four pooled 3x3 conv layers and a two-layer
    /// dense head, sized to land on the published 1,292,546-weight footprint
    /// (this configuration gives 1,290,701 at 512x512x3, within 0.15%).
    pub fn reference() -> Self {
        let conv = |out_channels: usize| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: true,
        };
        ArchConfig {
            input_bands: BandSubset::cloud_sensitive(),
            input_size: [512, 512],
            conv_specs: vec![conv(32), conv(52), conv(48), conv(16)],
            dense_specs: vec![76, 1],
            width_multiplier: 1.0,
            extra_conv_layers: 0,
        }
    }

    /// Desk-scale variant for 128x128 scenes: same shape, narrower layers.
    pub fn compact() -> Self {
        let conv = |out_channels: usize| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: true,
        };
        ArchConfig {
            input_bands: BandSubset::cloud_sensitive(),
            input_size: [128, 128],
            conv_specs: vec![conv(12), conv(16), conv(16), conv(12)],
            dense_specs: vec![32, 1],
            width_multiplier: 1.0,
            extra_conv_layers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_specs.is_empty() {
            return Err(Error::invalid("arch needs at least one conv layer".to_string()));
        }
        if self.dense_specs.last() != Some(&1) {
            return Err(Error::invalid(format!(
                "final dense width must be 1, got {:?}",
                self.dense_specs
            )));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(Error::invalid(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.input_size[0] == 0 || self.input_size[1] == 0 {
            return Err(Error::invalid("input size must be positive".to_string()));
        }
        for (i, c) in self.conv_specs.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::invalid(format!("conv layer {i} has a zero field")));
            }
        }
        self.feature_dims()?;
        Ok(())
    }

    /// Conv stack after applying the width multiplier and appending the
    /// extra (unpooled) layers.
    pub fn effective_convs(&self) -> Vec<ConvSpec> {
        let scale = |c: usize| ((c as f64 * self.width_multiplier).round() as usize).max(1);
        let mut convs: Vec<ConvSpec> = self
            .conv_specs
            .iter()
            .map(|c| ConvSpec {
                out_channels: scale(c.out_channels),
                ..*c
            })
            .collect();
        if let Some(last) = convs.last().copied() {
            for _ in 0..self.extra_conv_layers {
                convs.push(ConvSpec {
                    pool: false,
                    stride: 1,
                    padding: last.kernel / 2,
                    ..last
                });
            }
        }
        convs
    }

    /// Dense widths after the width multiplier (the final width stays 1).
    pub fn effective_denses(&self) -> Vec<usize> {
        let n = self.dense_specs.len();
        self.dense_specs
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i + 1 == n {
                    w
                } else {
                    ((w as f64 * self.width_multiplier).round() as usize).max(1)
                }
            })
            .collect()
    }

    /// Spatial/channel dims of the last feature map, validating that no
    /// layer collapses below 1x1.
    pub fn feature_dims(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input_size[0], self.input_size[1]);
        let mut channels = self.input_bands.len();
        for (i, c) in self.effective_convs().iter().enumerate() {
            if h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel {
                return Err(Error::invalid(format!(
                    "conv layer {i} kernel {} exceeds padded input {}x{}",
                    c.kernel,
                    h + 2 * c.padding,
                    w + 2 * c.padding
                )));
            }
            h = (h + 2 * c.padding - c.kernel) / c.stride + 1;
            w = (w + 2 * c.padding - c.kernel) / c.stride + 1;
            if c.pool {
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(Error::invalid(format!(
                    "feature map collapses to {h}x{w} after conv layer {i}"
                )));
            }
            channels = c.out_channels;
        }
        Ok((h, w, channels))
    }

    /// Total trainable weight count at the configured input size.
    pub fn param_count(&self) -> Result<usize> {
        let mut total = 0usize;
        let mut cin = self.input_bands.len();
        for c in self.effective_convs() {
            total += c.kernel * c.kernel * cin * c.out_channels + c.out_channels;
            cin = c.out_channels;
        }
        let (h, w, ch) = self.feature_dims()?;
        let mut fan_in = h * w * ch;
        for width in self.effective_denses() {
            total += fan_in * width + width;
            fan_in = width;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The published full-scale weight count this config is tuned against.
    const TARGET_PARAMS: f64 = 1_292_546.0;

    #[test]
    fn reference_param_count_within_five_percent() {
        let count = ArchConfig::reference().param_count().unwrap() as f64;
        let deviation = (count - TARGET_PARAMS).abs() / TARGET_PARAMS;
        assert!(
            deviation < 0.05,
            "param count {count} deviates {:.2}% from target",
            deviation * 100.0
        );
    }

    #[test]
    fn sqrt2_multiplier_roughly_doubles_params() {
        let base = ArchConfig::reference().param_count().unwrap() as f64;
        let mut wide = ArchConfig::reference();
        wide.width_multiplier = std::f64::consts::SQRT_2;
        let scaled = wide.param_count().unwrap() as f64;
        let ratio = scaled / base;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn extra_conv_layers_extend_the_stack() {
        let mut deep = ArchConfig::reference();
        deep.extra_conv_layers = 2;
        let convs = deep.effective_convs();
        assert_eq!(convs.len(), 6);
        assert!(!convs[4].pool && !convs[5].pool);
        assert_eq!(convs[5].out_channels, convs[3].out_channels);
        assert!(deep.param_count().unwrap() > ArchConfig::reference().param_count().unwrap());
    }

    #[test]
    fn thirteen_band_variant_validates() {
        let mut wide = ArchConfig::compact();
        wide.input_bands = crate::cubes::BandSubset::all();
        wide.validate().unwrap();
        assert!(wide.param_count().unwrap() > ArchConfig::compact().param_count().unwrap());
    }

    #[test]
    fn over_pooled_arch_is_rejected() {
        let mut tiny = ArchConfig::compact();
        tiny.input_size = [8, 8];
        // Four pools on an 8x8 input collapse below 1x1.
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let arch = ArchConfig::reference();
        let text = serde_json::to_string_pretty(&arch).unwrap();
        let back: ArchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, arch);
    }
}
