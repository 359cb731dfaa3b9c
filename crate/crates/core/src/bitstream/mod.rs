//! Entropy coding of quantized latents, the stream container and the
//! checkpoint format.
//!
//! Stream layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PCCC"
//!      4     1  format version (1)
//!      5     1  configuration id (full 0, lite 1, micro 2)
//!      6     2  latent length N
//!      8     4  point count P of the coded cloud
//!     12     4  payload length in bytes
//!     16     …  range-coded payload
//! ```
//!
//! Coding uses integer tables only, so streams are byte-identical across
//! platforms for the same checkpoint and latent.

mod checkpoint;
mod container;
mod range;

pub use checkpoint::{Model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use container::{Bitstream, Header, HEADER_LEN, STREAM_MAGIC, STREAM_VERSION};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};

use crate::entropy::quantize;
use crate::error::{Error, Result};
use crate::nn::Tensor;

impl Model {
    /// Quantized latent `ŷ` of one `3 × P` cloud.
    pub fn quantized_latent(&self, cloud: &Tensor<f32>) -> Result<Vec<i32>> {
        Ok(quantize(&self.codec.analyze(cloud)?.latent))
    }

    pub fn encode_latent(&self, latent: &[i32], points: usize) -> Result<Bitstream> {
        let n = self.codec.latent_size();
        if latent.len() != n {
            return Err(Error::Length {
                expected: n,
                got: latent.len(),
            });
        }
        let payload = range_encode(latent, &self.tables)?;
        Bitstream::new(self.codec.config().name, n, points, payload)
    }

    pub fn compress(&self, cloud: &Tensor<f32>) -> Result<Bitstream> {
        let q = self.quantized_latent(cloud)?;
        self.encode_latent(&q, cloud.cols())
    }

    /// Recovers `ŷ`, refusing streams written for another configuration.
    pub fn decode_latent(&self, stream: &Bitstream) -> Result<Vec<i32>> {
        let h = &stream.header;
        let config = self.codec.config();
        if h.config != config.name {
            return Err(Error::Config(format!(
                "stream was written by a `{}` model, checkpoint is `{}`",
                h.config, config.name
            )));
        }
        if usize::from(h.latent) != self.codec.latent_size() {
            return Err(Error::Config(format!(
                "stream latent length {} does not match the checkpoint's {}",
                h.latent,
                self.codec.latent_size()
            )));
        }
        range_decode(&stream.payload, self.codec.latent_size(), &self.tables)
    }

    /// Class logits of a stream.
    pub fn decompress(&self, stream: &Bitstream) -> Result<Vec<f32>> {
        let q: Vec<f32> = self.decode_latent(stream)?.into_iter().map(|v| v as f32).collect();
        self.codec.synthesize(&q)
    }

    /// Ideal code length of `ŷ` under the tables, in bits.
    pub fn table_bits(&self, latent: &[i32]) -> f64 {
        latent.iter().zip(&self.tables).map(|(&v, t)| t.cost_bits(v)).sum()
    }
}
