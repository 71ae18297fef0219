#![allow(dead_code)]

use steervec::extract::steering_loss_and_grad_ids;
use steervec::model::{InjectionSite, InjectionSpec, ModelConfig, ModelWeights, Timesteps};
use steervec::rng::SeededRng;

/// Elementwise relative error with a floor so that near-zero components are
/// compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Weights with O(1) random gains and offsets so every nonlinearity is
/// exercised away from its linear regime.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> ModelWeights<f64> {
    let mut w = ModelWeights::<f64>::init(cfg).unwrap();
    let mut rng = SeededRng::new(seed ^ 0xABCD);
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.normal() * 0.35;
        }
    }
    w
}

pub struct GradCase {
    pub label: String,
    pub max_rel_err: f64,
}

/// Autodiff vs central differences (h = 1e-4, f64) for the extraction loss
/// with respect to the injected vector on one random configuration.
pub fn extraction_gradcheck(seed: u64) -> GradCase {
    let mut rng = SeededRng::new(seed);
    let heads = [1, 2, 4][rng.below(3)];
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: heads,
        d_ff: 32,
        vocab_size: 32,
        max_positions: 16,
        seed,
    };
    let w = random_weights(&cfg, seed);
    let sites = [
        InjectionSite::Embedding,
        InjectionSite::AfterSelfAttn(0),
        InjectionSite::AfterSelfAttn(1),
        InjectionSite::AfterFeedForward(0),
        InjectionSite::AfterFeedForward(1),
        InjectionSite::EveryLayerAttn,
        InjectionSite::EveryLayerFF,
        InjectionSite::LmHead,
    ];
    let site = sites[rng.below(sites.len())];
    let ts = if rng.below(2) == 0 {
        Timesteps::All
    } else {
        Timesteps::First
    };
    let steer_dim = [4, 8, 16][rng.below(3)];
    let spec = InjectionSpec {
        projection_seed: seed,
        ..InjectionSpec::single(site, ts, steer_dim)
    };
    let len = 3 + rng.below(8);
    let ids: Vec<usize> = (0..len).map(|_| rng.below(32)).collect();
    let z: Vec<f64> = (0..steer_dim).map(|_| rng.normal()).collect();

    let (_, grad) = steering_loss_and_grad_ids(&w, &ids, &spec, &z).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..steer_dim {
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let lp = steering_loss_and_grad_ids(&w, &ids, &spec, &zp).unwrap().0;
        let lm = steering_loss_and_grad_ids(&w, &ids, &spec, &zm).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel_err(fd, grad[i]));
    }
    GradCase {
        label: format!("site={site} timesteps={ts} d'={steer_dim} heads={heads} len={len}"),
        max_rel_err: worst,
    }
}
