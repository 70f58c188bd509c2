//! Inputs for the torchvision backbone oracle: a seeded backbone whose
//! batch-norm statistics and affine parameters are perturbed away from their
//! identity initialisation, and a fixed input image.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tajweed_core::model::{BackboneInit, ModelConfig, TajweedNet};

pub const WEIGHTS_SEED: u64 = 11;
pub const WEIGHTS_FILE: &str = "backbone.safetensors";
pub const INPUT_FILE: &str = "input.safetensors";

pub fn perturbed_backbone() -> TajweedNet {
    let net = TajweedNet::build(&ModelConfig::default(), &BackboneInit::Random, WEIGHTS_SEED).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(WEIGHTS_SEED + 1);
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let var = net.params().var(&name).unwrap();
        let n = var.as_tensor().elem_count();
        let fresh: Option<Vec<f32>> = if name.ends_with("running_mean") || name.ends_with(".1.bias") {
            Some((0..n).map(|_| rng.random_range(-0.1..0.1)).collect())
        } else if name.ends_with("running_var") {
            Some((0..n).map(|_| rng.random_range(0.5..2.0)).collect())
        } else if name.ends_with(".1.weight") {
            Some((0..n).map(|_| rng.random_range(0.8..1.2)).collect())
        } else {
            None
        };
        if let Some(v) = fresh {
            let t = Tensor::from_vec(v, var.as_tensor().shape(), &Device::Cpu).unwrap();
            var.set(&t).unwrap();
        }
    }
    net
}

pub fn input_image() -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(WEIGHTS_SEED + 2);
    let v: Vec<f32> = (0..3 * 224 * 224).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(v, (1, 3, 224, 224), &Device::Cpu).unwrap()
}

/// Writes the `features.*` state dict and the `input` image as two
/// safetensors files; returns the weights path.
pub fn write_inputs(dir: &Path) -> std::path::PathBuf {
    let net = perturbed_backbone();
    let map: HashMap<String, Tensor> = net
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("features."))
        .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
        .collect();
    let path = dir.join(WEIGHTS_FILE);
    candle_core::safetensors::save(&map, &path).unwrap();
    let input = HashMap::from([("input".to_string(), input_image())]);
    candle_core::safetensors::save(&input, dir.join(INPUT_FILE)).unwrap();
    path
}
