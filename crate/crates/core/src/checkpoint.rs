//! Binary checkpoints for encoders, feature maps and trained heads.
//!
//! Layout, all integers and floats little-endian, matrices row-major:
//!
//! ```text
//! "UQRT"  u32 version  u8 kind (1 encoder, 2 head, 3 head + covariance)
//! encoder:  u32 input_dim, u32 n_hidden, u32 x n_hidden widths, u32 hidden_dim_out,
//!           f64 spectral_bound, u32 power_iterations, u8 activation, u64 seed,
//!           per layer: f64[out*in] weight, f64[out] bias
//! features: u32 D_r, u32 D_h, f64 sigma_k, u64 seed, f64[D_r*D_h] W, f64[D_r] b
//! head:     u32 len + JSON head config, f64 tau, f64 lambda, f64[D_r] beta
//! cov:      u64 n_samples, f64[D_r*D_r] Sigma, f64[D_r*D_r] precision Cholesky factor
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rff::{Activation, Encoder, EncoderConfig, RandomFeatureMap};
use crate::sngp::{GpHead, GpHeadConfig, PosteriorCovariance};

pub const MAGIC: &[u8; 4] = b"UQRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Encoder = 1,
    Head = 2,
    HeadWithCovariance = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Kind> {
        match b {
            1 => Ok(Kind::Encoder),
            2 => Ok(Kind::Head),
            3 => Ok(Kind::HeadWithCovariance),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
    fn vector(&mut self, v: &DVector<f64>) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Checkpoint(format!("matrix {rows}x{cols} exceeds the checkpoint size")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(self.matrix(n, 1)?.as_slice()))
    }
}

fn write_header(w: &mut Writer, kind: Kind) {
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u8(kind as u8);
}

fn write_encoder(w: &mut Writer, encoder: &Encoder, features: &RandomFeatureMap) {
    let c = &encoder.config;
    w.u32(c.input_dim);
    w.u32(c.hidden_dims.len());
    c.hidden_dims.iter().for_each(|&d| w.u32(d));
    w.u32(c.hidden_dim_out);
    w.f64(c.spectral_bound);
    w.u32(c.power_iterations);
    w.u8(match c.activation {
        Activation::Tanh => 0,
        Activation::Relu => 1,
    });
    w.u64(c.seed);
    for layer in &encoder.layers {
        w.matrix(&layer.weight);
        w.vector(&layer.bias);
    }
    w.u32(features.num_features());
    w.u32(features.hidden_dim());
    w.f64(features.sigma_k());
    w.u64(features.seed());
    w.matrix(features.projection());
    w.vector(features.phases());
}

fn read_encoder(r: &mut Reader<'_>) -> Result<(Encoder, RandomFeatureMap)> {
    let input_dim = r.u32()?;
    let n_hidden = r.u32()?;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden_dims = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let hidden_dim_out = r.u32()?;
    let spectral_bound = r.f64()?;
    let power_iterations = r.u32()?;
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => return Err(Error::Checkpoint(format!("unknown activation code {other}"))),
    };
    let seed = r.u64()?;
    let config = EncoderConfig {
        input_dim,
        hidden_dims,
        hidden_dim_out,
        spectral_bound,
        power_iterations,
        activation,
        seed,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let weights = config
        .layer_shapes()
        .into_iter()
        .map(|(out, inp)| Ok((r.matrix(out, inp)?, r.vector(out)?)))
        .collect::<Result<Vec<_>>>()?;
    let encoder = Encoder::from_weights(config, weights).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let d_r = r.u32()?;
    let d_h = r.u32()?;
    if d_h != encoder.output_dim() {
        return Err(Error::Checkpoint(format!(
            "feature map expects hidden size {d_h}, encoder produces {}",
            encoder.output_dim()
        )));
    }
    let sigma_k = r.f64()?;
    let fseed = r.u64()?;
    let w = r.matrix(d_r, d_h)?;
    let b = r.vector(d_r)?;
    let features = RandomFeatureMap::from_parts(w, b, sigma_k, fseed).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((encoder, features))
}

pub fn encode_encoder(encoder: &Encoder, features: &RandomFeatureMap) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, Kind::Encoder);
    write_encoder(&mut w, encoder, features);
    w.0
}

pub fn encode_head(head: &GpHead) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let kind = if head.covariance.is_some() {
        Kind::HeadWithCovariance
    } else {
        Kind::Head
    };
    write_header(&mut w, kind);
    write_encoder(&mut w, &head.encoder, &head.feature_map);
    let json = serde_json::to_vec(&head.config).expect("head config serializes");
    w.u32(json.len());
    w.0.extend_from_slice(&json);
    w.f64(head.config.tau);
    w.f64(head.config.lambda);
    w.vector(&head.beta);
    if let Some(cov) = &head.covariance {
        w.u64(cov.n_samples() as u64);
        w.matrix(cov.sigma());
        w.matrix(cov.precision_chol());
    }
    w.0
}

fn read_header(r: &mut Reader<'_>) -> Result<Kind> {
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    Kind::from_byte(r.u8()?)
}

fn finish(r: &Reader<'_>) -> Result<()> {
    if r.pos != r.buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(())
}

pub fn kind_of(bytes: &[u8]) -> Result<Kind> {
    read_header(&mut Reader { buf: bytes, pos: 0 })
}

/// Encoder and feature map from any checkpoint kind.
pub fn decode_encoder(bytes: &[u8]) -> Result<(Encoder, RandomFeatureMap)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let kind = read_header(&mut r)?;
    let out = read_encoder(&mut r)?;
    if kind == Kind::Encoder {
        finish(&r)?;
    }
    Ok(out)
}

pub fn decode_head(bytes: &[u8]) -> Result<GpHead> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let kind = read_header(&mut r)?;
    if kind == Kind::Encoder {
        return Err(Error::Checkpoint("checkpoint holds only an encoder, not a trained head".into()));
    }
    let (encoder, features) = read_encoder(&mut r)?;
    let len = r.u32()?;
    let mut config: GpHeadConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad head config: {e}")))?;
    config.tau = r.f64()?;
    config.lambda = r.f64()?;
    let beta = r.vector(features.num_features())?;
    let d_r = features.num_features();
    let covariance = if kind == Kind::HeadWithCovariance {
        let n_samples = r.u64()? as usize;
        let sigma = r.matrix(d_r, d_r)?;
        let chol = r.matrix(d_r, d_r)?;
        Some(PosteriorCovariance::from_parts(sigma, chol, n_samples).map_err(|e| Error::Checkpoint(e.to_string()))?)
    } else {
        None
    };
    finish(&r)?;
    let mut head = GpHead::new(encoder, features, config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Checkpoint("non-finite output weights".into()));
    }
    head.beta = beta;
    head.covariance = covariance;
    Ok(head)
}

pub fn save_head(path: &Path, head: &GpHead) -> Result<()> {
    std::fs::write(path, encode_head(head))?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<GpHead> {
    decode_head(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};

    fn trained(with_cov: bool) -> GpHead {
        let (ds, _) = generate(&GenConfig {
            n_prompts: 20,
            responses_per_prompt: 3,
            seed: 4,
            ..GenConfig::default()
        })
        .unwrap();
        let enc = Encoder::new(EncoderConfig {
            input_dim: ds.layout().pair_dim(),
            hidden_dims: vec![12, 10],
            hidden_dim_out: 6,
            seed: 3,
            ..EncoderConfig::default()
        })
        .unwrap();
        let fm = RandomFeatureMap::new(6, 32, 1.3, 9).unwrap();
        let mut head = GpHead::new(
            enc,
            fm,
            GpHeadConfig {
                epochs: 1,
                ..GpHeadConfig::default()
            },
        )
        .unwrap();
        head.train(&ds.records).unwrap();
        if with_cov {
            head.compute_covariance(&ds.records).unwrap();
        }
        head
    }

    #[test]
    fn head_round_trip_is_bit_exact() {
        for with_cov in [false, true] {
            let head = trained(with_cov);
            let bytes = encode_head(&head);
            assert_eq!(&bytes[..4], b"UQRT");
            let back = decode_head(&bytes).unwrap();
            assert_eq!(back.beta, head.beta);
            assert_eq!(back.feature_map, head.feature_map);
            assert_eq!(back.config, head.config);
            assert_eq!(back.covariance, head.covariance);
            for (a, b) in back.encoder.layers.iter().zip(&head.encoder.layers) {
                assert_eq!(a.weight, b.weight);
                assert_eq!(a.bias, b.bias);
            }
            assert_eq!(encode_head(&back), bytes);
        }
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let head = trained(false);
        let bytes = encode_encoder(&head.encoder, &head.feature_map);
        assert_eq!(kind_of(&bytes).unwrap(), Kind::Encoder);
        let (enc, fm) = decode_encoder(&bytes).unwrap();
        assert_eq!(fm, head.feature_map);
        assert_eq!(enc.layers[1].weight, head.encoder.layers[1].weight);
        assert!(decode_head(&bytes).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = encode_head(&trained(true));
        assert!(matches!(decode_head(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_head(&bad), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_head(&extra), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode_head(&version), Err(Error::Checkpoint(_))));
    }
}
