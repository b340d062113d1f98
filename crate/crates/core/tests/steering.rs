mod common;

use common::*;
use p2a_core::encoder::embed_from_layer1;
use p2a_core::steering::{pin, steer, steer_one, style_grad, style_loss, SteeringConfig, StyleStats};
use p2a_core::tensor::channel_stats;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct GridOracle {
    pub min_loss: f64,
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub evaluated: u64,
    pub degenerate: u64,
}

fn grid_path() -> std::path::PathBuf {
    fixtures_dir().join("steer_grid.json")
}

/// Exhaustive search over the tiny fixture grid. Slow; rewrites the cached
/// oracle file. Run with `cargo test --test steering -- --ignored`.
#[test]
#[ignore]
fn regenerate_grid_oracle() {
    let (f, w, trg) = tiny_fixture();
    let (nm, ns) = (GRID_MU.2, GRID_SIGMA.2);
    let mut best = GridOracle {
        min_loss: f64::INFINITY,
        mu: [0.0; 2],
        sigma: [0.0; 2],
        evaluated: 0,
        degenerate: 0,
    };
    let mut s = StyleStats {
        mu: vec![0.0; 2],
        sigma: vec![0.0; 2],
    };
    for a in 0..nm {
        for b in 0..nm {
            for c in 0..ns {
                for d in 0..ns {
                    s.mu[0] = grid_value(GRID_MU, a);
                    s.mu[1] = grid_value(GRID_MU, b);
                    s.sigma[0] = grid_value(GRID_SIGMA, c);
                    s.sigma[1] = grid_value(GRID_SIGMA, d);
                    match style_loss(&f, &s, &trg, &w) {
                        Ok(l) => {
                            best.evaluated += 1;
                            if l < best.min_loss {
                                best.min_loss = l;
                                best.mu = [s.mu[0], s.mu[1]];
                                best.sigma = [s.sigma[0], s.sigma[1]];
                            }
                        }
                        Err(_) => best.degenerate += 1,
                    }
                }
            }
        }
    }
    let text = serde_json::to_string_pretty(&best).unwrap() + "\n";
    std::fs::write(grid_path(), text).unwrap();
}

#[test]
fn grid_oracle_cache_is_consistent() {
    let o: GridOracle = serde_json::from_str(&std::fs::read_to_string(grid_path()).unwrap()).unwrap();
    assert_eq!(o.evaluated + o.degenerate, (GRID_MU.2 * GRID_MU.2 * GRID_SIGMA.2 * GRID_SIGMA.2) as u64);
    let (f, w, trg) = tiny_fixture();
    let s = StyleStats {
        mu: o.mu.to_vec(),
        sigma: o.sigma.to_vec(),
    };
    assert_eq!(style_loss(&f, &s, &trg, &w).unwrap(), o.min_loss);
}

#[test]
fn zero_steps_and_zero_lr_keep_channel_stats() {
    let w = weights();
    let feats: Vec<_> = (0..3).map(layer1_map).collect();
    let trg = steer_fixture(1).2;
    let zero = SteeringConfig {
        steps: 0,
        ..SteeringConfig::default()
    };
    let frozen = SteeringConfig {
        lr: 0.0,
        ..SteeringConfig::default()
    };
    let a = steer(&feats, &trg, &zero, &w).unwrap();
    let b = steer(&feats, &trg, &frozen, &w).unwrap();
    for ((ea, eb), f) in a.entries.iter().zip(&b.entries).zip(&feats) {
        let st = channel_stats(f).unwrap();
        assert_eq!(ea.mu, st.mu);
        assert_eq!(ea.sigma, st.sigma);
        assert_eq!(ea.mu, eb.mu);
        assert_eq!(ea.sigma, eb.sigma);
    }
}

#[test]
fn descent_on_fixtures() {
    let cfg = SteeringConfig::default();
    for seed in 0..20 {
        let (f, _, trg) = steer_fixture(seed);
        let e = steer_one(&f, &trg, &cfg, &weights()).unwrap();
        assert!(e.loss_final <= e.loss_init, "seed {seed}");
    }
}

#[test]
fn steer_is_deterministic() {
    let feats: Vec<_> = (0..4).map(layer1_map).collect();
    let trg = steer_fixture(3).2;
    let cfg = SteeringConfig {
        momentum: 0.5,
        ..SteeringConfig::default()
    };
    let a = steer(&feats, &trg, &cfg, &weights()).unwrap();
    let b = steer(&feats, &trg, &cfg, &weights()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradient_vanishes_at_exact_target() {
    let (f, s, _) = steer_fixture(9);
    let w = weights();
    let trg = embed_from_layer1(&pin(&f, &s).unwrap(), &w).unwrap();
    let g = style_grad(&f, &s, &trg, &w).unwrap();
    assert!(g.loss.abs() < 1e-9);
    assert!(g.mu.iter().chain(&g.sigma).all(|v| v.abs() < 1e-9));
}
