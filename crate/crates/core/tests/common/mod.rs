#![allow(dead_code)]

use anteversion::model::{AttentionHeadSpec, BackboneSpec, Network, NetworkSpec};
use anteversion::nn::{FeatureMap, ParamKind};
use anteversion::preprocess::ModelInput;
use anteversion::training::mse_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec(seed: u64) -> NetworkSpec {
    NetworkSpec {
        input_side: 64,
        backbone: BackboneSpec::custom(&[(1, 4), (2, 8)]),
        head: AttentionHeadSpec {
            attn_widths: vec![6, 4],
            dense_width: 8,
            dropout: 0.25,
            bn_momentum: 0.99,
        },
        init_seed: seed,
    }
}

pub fn tiny_network(seed: u64) -> Network {
    anteversion::model::build(tiny_spec(seed)).unwrap()
}

pub fn random_input(rng: &mut ChaCha8Rng, side: usize) -> ModelInput {
    let plane: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
    let mut data = Vec::with_capacity(3 * side * side);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    ModelInput {
        image: FeatureMap::new(3, side, side, data),
        aux_age: rng.random(),
        aux_gender: if rng.random::<bool>() { 1.0 } else { 0.0 },
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failed: Vec<(String, usize, f64, f64, f64)>,
    /// Draws rejected because the stencil crossed a ReLU/max-pool switch.
    pub kink_rejections: usize,
    pub worst_rel: f64,
}

/// Central differences with step `h` on `samples` randomly chosen trainable
/// scalars (every trainable tensor gets at least one), train mode, batch of 2.
pub fn gradient_check(seed: u64, samples: usize, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = tiny_network(seed);
    let batch: Vec<ModelInput> = (0..2).map(|_| random_input(&mut rng, 64)).collect();
    let target = [[0.3, 0.5], [0.6, 0.2]];
    let dropout_seed = 11;

    let pass = net.forward_train(&batch, dropout_seed).unwrap();
    let (_, d_out) = mse_loss(&pass.outputs, &target).unwrap();
    let grads = net.backward(&pass, &d_out);
    let signature = pass.branch_signature();

    let trainable: Vec<usize> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(i, _)| i)
        .collect();
    let mut out = GradCheck {
        checked: 0,
        failed: Vec::new(),
        kink_rejections: 0,
        worst_rel: 0.0,
    };
    let mut draw = 0usize;
    while out.checked < samples {
        let pi = if draw < trainable.len() {
            trainable[draw]
        } else {
            trainable[rng.random_range(0..trainable.len())]
        };
        draw += 1;
        let len = net.params().iter().nth(pi).unwrap().data.len();
        let k = rng.random_range(0..len);
        let eval = |delta: f64, net: &mut Network| {
            let param = net.params_mut().iter_mut().nth(pi).unwrap();
            let orig = param.data[k];
            param.data[k] = orig + delta;
            let pass = net.forward_train(&batch, dropout_seed).unwrap();
            let loss = mse_loss(&pass.outputs, &target).unwrap().0;
            let sig = pass.branch_signature();
            net.params_mut().iter_mut().nth(pi).unwrap().data[k] = orig;
            (loss, sig)
        };
        let (plus, s_plus) = eval(h, &mut net);
        let (minus, s_minus) = eval(-h, &mut net);
        if s_plus != signature || s_minus != signature {
            out.kink_rejections += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.by_index(pi)[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        out.worst_rel = out.worst_rel.max(rel);
        if rel >= 1e-4 {
            let name = net.params().iter().nth(pi).unwrap().name.clone();
            out.failed.push((name, k, analytic, numeric, rel));
        }
        out.checked += 1;
    }
    out
}
