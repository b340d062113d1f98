//! Fixture families shared by the integration tests.
#![allow(dead_code)]

use p2a_core::encoder::{encode_image_layer1, encode_text, Embedding, EncoderWeights, PromptString};
use p2a_core::steering::StyleStats;
use p2a_core::tensor::{channel_stats, rng_fill, Fill, SeededRng, Tensor};
use std::path::PathBuf;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn weights() -> EncoderWeights {
    EncoderWeights::from_seed(42)
}

const PLACES: [&str; 4] = ["parking lot", "highway", "harbor", "rooftop"];
const TIMES: [&str; 3] = ["midday", "dusk", "night"];
const WEATHER: [&str; 5] = ["fog", "dust", "rain", "snow", "clear"];

pub fn prompt(seed: u64) -> PromptString {
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9);
    let text = format!(
        "an aerial view of {} {} in {}",
        PLACES[rng.index(PLACES.len())],
        TIMES[rng.index(TIMES.len())],
        WEATHER[rng.index(WEATHER.len())]
    );
    PromptString::new(&text).unwrap()
}

/// Random `[8, 6, 6]` map with per-channel offset and scale; every channel
/// has population sigma >= 0.01.
pub fn random_map(seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    loop {
        let mut data = Vec::with_capacity(8 * 36);
        for _ in 0..8 {
            let offset = rng.normal(0.0, 3.0);
            let scale = rng.uniform(0.02, 4.0);
            data.extend((0..36).map(|_| offset + scale * rng.normal(0.0, 1.0)));
        }
        let f = Tensor::new(vec![8, 6, 6], data).unwrap();
        if channel_stats(&f).unwrap().sigma.iter().all(|&s| s >= 0.01) {
            return f;
        }
    }
}

pub fn random_style(seed: u64, channels: usize) -> StyleStats {
    let mut rng = SeededRng::new(seed.wrapping_add(1_000_003));
    StyleStats {
        mu: (0..channels).map(|_| rng.normal(0.0, 2.0)).collect(),
        sigma: (0..channels).map(|_| rng.uniform(0.05, 3.0)).collect(),
    }
}

/// Layer-1 map of a random 16x16 image under the seed-42 encoder.
pub fn layer1_map(seed: u64) -> Tensor {
    let img = rng_fill(&[3, 16, 16], seed, Fill::Uniform { half_width: 0.5 })
        .unwrap()
        .map(|v| v + 0.5)
        .unwrap();
    encode_image_layer1(&img, &weights()).unwrap()
}

/// `(f, s, trg)` steering fixture: image-derived map, a style perturbed from
/// its own statistics, and a random prompt embedding.
pub fn steer_fixture(seed: u64) -> (Tensor, StyleStats, Embedding) {
    let f = layer1_map(seed);
    let st = channel_stats(&f).unwrap();
    let mut rng = SeededRng::new(seed.wrapping_mul(31).wrapping_add(7));
    let s = StyleStats {
        mu: st.mu.iter().map(|m| m + rng.normal(0.0, 0.3)).collect(),
        sigma: st.sigma.iter().map(|v| (v * rng.uniform(0.5, 1.5)).max(0.05)).collect(),
    };
    let trg = encode_text(&prompt(seed), &weights()).unwrap();
    (f, s, trg)
}

/// Two-channel 2x2 map, its encoder and target for the grid oracle.
pub fn tiny_fixture() -> (Tensor, EncoderWeights, Embedding) {
    let f = rng_fill(&[2, 2, 2], 7, Fill::Normal { std: 1.0 }).unwrap();
    let w = EncoderWeights::with_layer1_channels(42, 2);
    let trg = encode_text(&PromptString::new("fog").unwrap(), &w).unwrap();
    (f, w, trg)
}

pub const GRID_MU: (f64, f64, usize) = (-2.0, 0.05, 81);
pub const GRID_SIGMA: (f64, f64, usize) = (0.05, 0.05, 60);

pub fn grid_value((start, step, _): (f64, f64, usize), i: usize) -> f64 {
    start + step * i as f64
}
