use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv_macs, linear_macs};

pub const INPUT_CHANNELS: usize = 3;
/// Point counts the codec family is trained for.
pub const POINT_COUNTS: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigName {
    Full,
    Lite,
    Micro,
}

impl ConfigName {
    pub const ALL: [ConfigName; 3] = [ConfigName::Full, ConfigName::Lite, ConfigName::Micro];

    /// Identifier stored in bitstream and checkpoint headers.
    pub fn id(self) -> u8 {
        match self {
            ConfigName::Full => 0,
            ConfigName::Lite => 1,
            ConfigName::Micro => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown configuration id {id}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::Full => "full",
            ConfigName::Lite => "lite",
            ConfigName::Micro => "micro",
        }
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown configuration `{s}` (expected full, lite or micro)")))
    }
}

/// One encoder block: kernel-size-1 convolution, batch norm, ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayer {
    pub out_channels: usize,
    pub groups: usize,
    /// Channel shuffle (with this many groups) applied to the block input.
    pub shuffle_before: Option<usize>,
}

const fn layer(out_channels: usize, groups: usize, shuffle_before: Option<usize>) -> EncoderLayer {
    EncoderLayer {
        out_channels,
        groups,
        shuffle_before,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub name: ConfigName,
    /// Number of input points the model is trained for.
    pub points: usize,
    pub encoder: Vec<EncoderLayer>,
    /// Decoder fully-connected output sizes; the last is the class count.
    pub decoder: Vec<usize>,
    pub dropout: f64,
}

impl CodecConfig {
    /// Layer tables of the three codec sizes.
    ///
    /// The lite encoder shuffles channels twice, around its grouped layers:
    ///
    /// ```text
    /// 3 ─▶ 8 ─▶ 8 ─▶ 16 ─shuffle(2)─▶ 16/2 ─shuffle(2)─▶ 32/4 ─▶ max
    /// ```
    pub fn new(name: ConfigName, points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::Config("point count must be positive".into()));
        }
        let encoder = match name {
            ConfigName::Full => vec![
                layer(64, 1, None),
                layer(64, 1, None),
                layer(64, 1, None),
                layer(128, 1, None),
                layer(1024, 1, None),
            ],
            ConfigName::Lite => vec![
                layer(8, 1, None),
                layer(8, 1, None),
                layer(16, 1, None),
                layer(16, 2, Some(2)),
                layer(32, 4, Some(2)),
            ],
            ConfigName::Micro => vec![layer(16, 1, None)],
        };
        let config = CodecConfig {
            name,
            points,
            encoder,
            decoder: vec![512, 256, 40],
            dropout: 0.3,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn latent(&self) -> usize {
        self.encoder.last().map_or(INPUT_CHANNELS, |l| l.out_channels)
    }

    pub fn classes(&self) -> usize {
        *self.decoder.last().expect("decoder has layers")
    }

    pub fn validate(&self) -> Result<()> {
        let mut c_in = INPUT_CHANNELS;
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        for (i, l) in self.encoder.iter().enumerate() {
            if l.groups == 0 || c_in % l.groups != 0 || l.out_channels % l.groups != 0 {
                return Err(Error::Config(format!(
                    "encoder layer {i}: {c_in}→{} not divisible into {} groups",
                    l.out_channels, l.groups
                )));
            }
            if let Some(g) = l.shuffle_before {
                if g == 0 || c_in % g != 0 {
                    return Err(Error::Config(format!("encoder layer {i}: cannot shuffle {c_in} channels in {g} groups")));
                }
            }
            c_in = l.out_channels;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Analytic multiply-accumulate counts. Batch norm and the gain are
    /// folded into the convolutions at inference time and cost nothing.
    pub fn mac_count(&self) -> MacCount {
        let mut c_in = INPUT_CHANNELS;
        let mut encoder = 0;
        for l in &self.encoder {
            encoder += conv_macs(c_in, l.out_channels, l.groups);
            c_in = l.out_channels;
        }
        let mut decoder = 0;
        for &out in &self.decoder {
            decoder += linear_macs(c_in, out);
            c_in = out;
        }
        MacCount {
            encoder_per_point: encoder,
            decoder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacCount {
    pub encoder_per_point: usize,
    pub decoder: usize,
}

impl MacCount {
    pub fn encoder_total(&self, points: usize) -> usize {
        self.encoder_per_point * points
    }
}

/// Formats a MAC count in thousands, rounded to two significant figures
/// (`147648 → "150k"`, `472 → "0.47k"`, `48 → "0.048k"`).
pub fn format_kilo_2sf(count: usize) -> String {
    if count == 0 {
        return "0k".into();
    }
    let k = count as f64 / 1000.0;
    let magnitude = k.log10().floor() as i32;
    let decimals = (1 - magnitude).max(0) as usize;
    let step = 10f64.powi(magnitude - 1);
    let rounded = (k / step).round() * step;
    format!("{rounded:.decimals$}k")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_sizes() {
        let n = |c| CodecConfig::new(c, 1024).unwrap().latent();
        assert_eq!(n(ConfigName::Full), 1024);
        assert_eq!(n(ConfigName::Lite), 32);
        assert_eq!(n(ConfigName::Micro), 16);
        assert_eq!(CodecConfig::new(ConfigName::Micro, 8).unwrap().classes(), 40);
        assert!(CodecConfig::new(ConfigName::Micro, 0).is_err());
    }

    #[test]
    fn mac_counts() {
        let m = |c| CodecConfig::new(c, 1024).unwrap().mac_count();
        assert_eq!(m(ConfigName::Full).encoder_per_point, 147_648);
        assert_eq!(m(ConfigName::Full).decoder, 665_600);
        assert_eq!(m(ConfigName::Lite).encoder_per_point, 472);
        assert_eq!(m(ConfigName::Lite).decoder, 157_696);
        assert_eq!(m(ConfigName::Micro).encoder_per_point, 48);
        assert_eq!(m(ConfigName::Micro).decoder, 149_504);
        let lite = m(ConfigName::Lite);
        assert!(lite.encoder_total(256) < lite.decoder);
    }

    #[test]
    fn kilo_formatting() {
        assert_eq!(format_kilo_2sf(147_648), "150k");
        assert_eq!(format_kilo_2sf(665_600), "670k");
        assert_eq!(format_kilo_2sf(472), "0.47k");
        assert_eq!(format_kilo_2sf(157_696), "160k");
        assert_eq!(format_kilo_2sf(48), "0.048k");
        assert_eq!(format_kilo_2sf(149_504), "150k");
        assert_eq!(format_kilo_2sf(1_234_000), "1200k");
    }

    #[test]
    fn names_round_trip() {
        for c in ConfigName::ALL {
            assert_eq!(c.as_str().parse::<ConfigName>().unwrap(), c);
            assert_eq!(ConfigName::from_id(c.id()).unwrap(), c);
        }
        assert!("huge".parse::<ConfigName>().is_err());
        assert!(ConfigName::from_id(9).is_err());
    }
}
