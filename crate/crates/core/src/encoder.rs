//! Frozen toy dual encoder.
//!
//! The image path is split after the stem ("layer 1") so steered feature maps
//! can be injected there. The tail maps a layer-1 map to the joint embedding
//! space: stride-2 conv, ReLU, global average pool, linear projection and L2
//! normalisation. The text path hashes whitespace tokens into a bag of
//! buckets and projects it into the same space.

use crate::conv::{relu, relu_backward, Conv2d};
use crate::error::{Error, Result};
use crate::tensor::{normalize_slice, rng_fill_from, Fill, SeededRng, Tensor};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const IMAGE_CHANNELS: usize = 3;
pub const LAYER1_CHANNELS: usize = 8;
pub const TAIL_CHANNELS: usize = 16;
pub const EMBED_DIM: usize = 32;
pub const TEXT_BUCKETS: usize = 64;

/// Seed-derived, immutable encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    seed: u64,
    stem: Conv2d,
    tail: Conv2d,
    /// `[EMBED_DIM, TAIL_CHANNELS]`, row-major.
    proj: Vec<f64>,
    /// `[EMBED_DIM, TEXT_BUCKETS]`, row-major.
    text_proj: Vec<f64>,
}

impl EncoderWeights {
    pub fn from_seed(seed: u64) -> Self {
        Self::with_layer1_channels(seed, LAYER1_CHANNELS)
    }

    /// Encoder with a non-default layer-1 width; used by small fixtures.
    pub fn with_layer1_channels(seed: u64, channels: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut draw = |n: usize, fan_in: usize| {
            rng_fill_from(&[n], &mut rng, Fill::Normal { std: 1.0 / (fan_in as f64).sqrt() })
                .expect("non-empty parameter block")
                .into_data()
        };
        let stem_fan = IMAGE_CHANNELS * 9;
        let tail_fan = channels * 9;
        let mut stem = Conv2d::zeros(IMAGE_CHANNELS, channels, 3, 2, 1);
        let mut tail = Conv2d::zeros(channels, TAIL_CHANNELS, 3, 2, 1);
        stem.weight = draw(stem.weight.len(), stem_fan);
        stem.bias = draw(channels, stem_fan);
        tail.weight = draw(tail.weight.len(), tail_fan);
        tail.bias = draw(TAIL_CHANNELS, tail_fan);
        let proj = draw(EMBED_DIM * TAIL_CHANNELS, TAIL_CHANNELS);
        let text_proj = draw(EMBED_DIM * TEXT_BUCKETS, TEXT_BUCKETS);
        Self {
            seed,
            stem,
            tail,
            proj,
            text_proj,
        }
    }

    /// Copy with every bias zeroed (positive-homogeneity test configuration).
    pub fn without_bias(&self) -> Self {
        let mut w = self.clone();
        w.stem.bias.fill(0.0);
        w.tail.bias.fill(0.0);
        w
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer1_channels(&self) -> usize {
        self.stem.c_out
    }

    pub fn stem(&self) -> &Conv2d {
        &self.stem
    }

    pub fn tail(&self) -> &Conv2d {
        &self.tail
    }

    pub fn proj(&self) -> &[f64] {
        &self.proj
    }

    pub fn text_proj(&self) -> &[f64] {
        &self.text_proj
    }

    /// SHA-256 over every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for block in [
            &self.stem.weight,
            &self.stem.bias,
            &self.tail.weight,
            &self.tail.bias,
            &self.proj,
            &self.text_proj,
        ] {
            for v in block.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"P2AW";

/// Writes a `P2AW` file: the magic followed by the little-endian `u64` seed.
/// Parameters are never serialised; readers re-derive them.
pub fn write_weights<W: Write>(mut out: W, weights: &EncoderWeights) -> std::io::Result<()> {
    out.write_all(WEIGHTS_MAGIC)?;
    out.write_all(&weights.seed.to_le_bytes())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<EncoderWeights> {
    let mut buf = [0u8; 12];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated P2AW file: {e}")))?;
    if &buf[..4] != WEIGHTS_MAGIC {
        return Err(Error::Format("bad P2AW magic".into()));
    }
    let seed = u64::from_le_bytes(buf[4..].try_into().expect("8 bytes"));
    Ok(EncoderWeights::from_seed(seed))
}

pub fn write_weights_file(path: impl AsRef<Path>, weights: &EncoderWeights) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights(&mut file, weights).map_err(|e| Error::io(path, e))
}

pub fn read_weights_file(path: impl AsRef<Path>) -> Result<EncoderWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&bytes[..])
}

/// A unit-norm vector in the joint embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vec: Vec<f64>,
}

impl Embedding {
    /// Normalises `raw`; fails on a zero vector.
    pub fn new(raw: &[f64]) -> Result<Self> {
        Ok(Self {
            vec: normalize_slice(raw)?,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.vec.iter().zip(&other.vec).map(|(a, b)| a * b).sum()
    }
}

/// Lowercased, single-spaced, non-empty prompt text.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptString(String);

impl PromptString {
    pub fn new(text: &str) -> Result<Self> {
        let norm = text
            .split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ");
        if norm.is_empty() {
            return Err(Error::Degenerate("empty prompt".into()));
        }
        Ok(Self(norm))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ')
    }
}

impl std::fmt::Display for PromptString {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_image(img: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = img.dims3()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::shape(format!("image needs 3 channels, got {c}")));
    }
    if h % 2 != 0 || w % 2 != 0 || h < 8 || w < 8 {
        return Err(Error::shape(format!("image size {h}x{w} must be even and >= 8")));
    }
    Ok((h, w))
}

/// Stem convolution (3x3, stride 2, same padding) followed by ReLU.
pub fn encode_image_layer1(img: &Tensor, w: &EncoderWeights) -> Result<Tensor> {
    check_image(img)?;
    Ok(relu(&w.stem.forward(img)?))
}

/// Intermediate values of one tail pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct TailPass {
    pre: Tensor,
    raw: Vec<f64>,
    embedding: Embedding,
}

impl TailPass {
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Projected vector before normalisation.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }
}

fn check_layer1(f: &Tensor, w: &EncoderWeights) -> Result<()> {
    let (c, _, _) = f.dims3()?;
    if c != w.layer1_channels() {
        return Err(Error::shape(format!(
            "layer-1 map needs {} channels, got {c}",
            w.layer1_channels()
        )));
    }
    Ok(())
}

pub fn tail_forward(f: &Tensor, w: &EncoderWeights) -> Result<TailPass> {
    check_layer1(f, w)?;
    let pre = w.tail.forward(f)?;
    let plane = pre.shape()[1] * pre.shape()[2];
    let pooled: Vec<f64> = (0..TAIL_CHANNELS)
        .map(|k| pre.channel(k).iter().map(|v| v.max(0.0)).sum::<f64>() / plane as f64)
        .collect();
    let raw: Vec<f64> = w
        .proj
        .chunks_exact(TAIL_CHANNELS)
        .map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum())
        .collect();
    let embedding = Embedding::new(&raw)?;
    Ok(TailPass {
        pre,
        raw,
        embedding,
    })
}

/// Gradient with respect to the layer-1 input, given the gradient of a loss
/// with respect to the unnormalised projection `pass.raw()`.
pub fn tail_backward(
    pass: &TailPass,
    f: &Tensor,
    w: &EncoderWeights,
    grad_raw: &[f64],
) -> Result<Tensor> {
    let plane = pass.pre.shape()[1] * pass.pre.shape()[2];
    let mut grad_pooled = [0.0; TAIL_CHANNELS];
    for (row, g) in w.proj.chunks_exact(TAIL_CHANNELS).zip(grad_raw) {
        for (acc, p) in grad_pooled.iter_mut().zip(row) {
            *acc += g * p;
        }
    }
    let mut grad_pre = Tensor::zeros(pass.pre.shape());
    for k in 0..TAIL_CHANNELS {
        grad_pre
            .channel_mut(k)
            .fill(grad_pooled[k] / plane as f64);
    }
    relu_backward(&pass.pre, &mut grad_pre);
    let (gin, _) = w.tail.backward(f, &grad_pre, true)?;
    Ok(gin.expect("input gradient requested"))
}

/// Embedding of a layer-1 feature map.
pub fn embed_from_layer1(f: &Tensor, w: &EncoderWeights) -> Result<Embedding> {
    Ok(tail_forward(f, w)?.embedding)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Bag-of-buckets counts of a prompt's tokens.
pub fn text_buckets(p: &PromptString) -> [f64; TEXT_BUCKETS] {
    let mut counts = [0.0; TEXT_BUCKETS];
    for tok in p.tokens() {
        counts[(fnv1a64(tok.as_bytes()) % TEXT_BUCKETS as u64) as usize] += 1.0;
    }
    counts
}

pub fn encode_text(p: &PromptString, w: &EncoderWeights) -> Result<Embedding> {
    let counts = text_buckets(p);
    let raw: Vec<f64> = w
        .text_proj
        .chunks_exact(TEXT_BUCKETS)
        .map(|row| row.iter().zip(&counts).map(|(a, b)| a * b).sum())
        .collect();
    Embedding::new(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_fill;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        rng_fill(&[3, h, w], seed, Fill::Uniform { half_width: 1.0 })
            .unwrap()
            .map(|v| 0.5 * (v + 1.0))
            .unwrap()
    }

    /// Direct nested-loop stride-2 "same" convolution + ReLU.
    fn layer1_oracle(img: &Tensor, w: &EncoderWeights) -> Vec<f64> {
        let (_, h, wd) = img.dims3().unwrap();
        let stem = w.stem();
        let (oh, ow) = (h / 2, wd / 2);
        let mut out = vec![0.0; stem.c_out * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..stem.c_out {
                    let mut s = stem.bias[o];
                    for kx in 0..3 {
                        for ky in 0..3 {
                            for i in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += stem.weight[((o * 3 + i) * 3 + ky) * 3 + kx]
                                        * img.at3(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = s.max(0.0);
                }
            }
        }
        out
    }

    /// Full image -> embedding path written independently of the split API.
    fn monolithic_embedding(img: &Tensor, w: &EncoderWeights) -> Vec<f64> {
        let (_, h, wd) = img.dims3().unwrap();
        let l1 = layer1_oracle(img, w);
        let c1 = w.layer1_channels();
        let (h1, w1) = (h / 2, wd / 2);
        let (h2, w2) = (h1.div_ceil(2), w1.div_ceil(2));
        let tail = w.tail();
        let mut pooled = vec![0.0; TAIL_CHANNELS];
        for (o, slot) in pooled.iter_mut().enumerate() {
            let mut total = 0.0;
            for oy in (0..h2).rev() {
                for ox in (0..w2).rev() {
                    let mut s = tail.bias[o];
                    for i in (0..c1).rev() {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h1 && (ix as usize) < w1 {
                                    s += tail.weight[((o * c1 + i) * 3 + ky) * 3 + kx]
                                        * l1[(i * h1 + iy as usize) * w1 + ix as usize];
                                }
                            }
                        }
                    }
                    total += s.max(0.0);
                }
            }
            *slot = total / (h2 * w2) as f64;
        }
        let raw: Vec<f64> = (0..EMBED_DIM)
            .map(|r| {
                (0..TAIL_CHANNELS)
                    .rev()
                    .map(|k| w.proj()[r * TAIL_CHANNELS + k] * pooled[k])
                    .sum()
            })
            .collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| v / n).collect()
    }

    #[test]
    fn zero_image_gives_relu_bias() {
        let w = EncoderWeights::from_seed(42);
        let f = encode_image_layer1(&Tensor::zeros(&[3, 16, 16]), &w).unwrap();
        for k in 0..LAYER1_CHANNELS {
            let want = w.stem().bias[k].max(0.0);
            assert!(f.channel(k).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn layer1_shape_and_errors() {
        let w = EncoderWeights::from_seed(42);
        let f = encode_image_layer1(&image(1, 64, 64), &w).unwrap();
        assert_eq!(f.shape(), &[8, 32, 32]);
        assert!(encode_image_layer1(&Tensor::zeros(&[3, 9, 8]), &w).is_err());
        assert!(encode_image_layer1(&Tensor::zeros(&[3, 6, 6]), &w).is_err());
        assert!(encode_image_layer1(&Tensor::zeros(&[1, 8, 8]), &w).is_err());
    }

    #[test]
    fn layer1_golden_fixture_matches_oracle() {
        let w = EncoderWeights::from_seed(42);
        let img = image(42, 64, 64);
        let f = encode_image_layer1(&img, &w).unwrap();
        let oracle = layer1_oracle(&img, &w);
        for (a, b) in f.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let checksum: f64 = f.data().iter().sum();
        assert!((checksum - LAYER1_GOLDEN_SUM).abs() < 1e-9, "checksum {checksum:.12}");
    }

    const LAYER1_GOLDEN_SUM: f64 = 1896.665093277878;

    #[test]
    fn embedding_is_unit_and_matches_monolithic_path() {
        let w = EncoderWeights::from_seed(42);
        for seed in 0..5 {
            let img = image(seed, 16, 24);
            let e = embed_from_layer1(&encode_image_layer1(&img, &w).unwrap(), &w).unwrap();
            let n: f64 = e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            let reference = monolithic_embedding(&img, &w);
            for (a, b) in e.as_slice().iter().zip(&reference) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer1_is_positively_homogeneous_without_bias() {
        let w = EncoderWeights::from_seed(42).without_bias();
        let img = image(3, 16, 16);
        let base = encode_image_layer1(&img, &w).unwrap();
        for alpha in [0.5, 2.0, 7.25] {
            let scaled = encode_image_layer1(&img.scale(alpha).unwrap(), &w).unwrap();
            for (a, b) in scaled.data().iter().zip(base.data()) {
                assert!((a - alpha * b).abs() < 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn text_encoder_contract() {
        let w = EncoderWeights::from_seed(42);
        let fog = PromptString::new("fog").unwrap();
        let a = encode_text(&fog, &w).unwrap();
        assert_eq!(a, encode_text(&fog, &w).unwrap());
        assert_eq!(
            encode_text(&PromptString::new("heavy fog").unwrap(), &w).unwrap(),
            encode_text(&PromptString::new("fog heavy").unwrap(), &w).unwrap()
        );
        let clear = encode_text(&PromptString::new("clear sky").unwrap(), &w).unwrap();
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
        assert!(a.dot(&clear) < 1.0 - 1e-6);
        assert!(PromptString::new("   ").is_err());
    }

    #[test]
    fn prompt_string_normalises() {
        let p = PromptString::new("  Heavy   FOG\tover desert ").unwrap();
        assert_eq!(p.as_str(), "heavy fog over desert");
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn weights_file_round_trip() {
        let w = EncoderWeights::from_seed(1234);
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        assert_eq!(&buf[..4], b"P2AW");
        assert_eq!(buf.len(), 12);
        let back = read_weights(&buf[..]).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.fingerprint(), w.fingerprint());
        assert!(read_weights(&b"P2AX\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
