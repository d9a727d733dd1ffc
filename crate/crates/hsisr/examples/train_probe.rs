use hsisr::data::{extract_patches, make_pair, split_dataset, synth_generate, SynthSpec};
use hsisr::model::ModelConfig;
use hsisr::tensor::ActivationKind;
use hsisr::train::{train, TrainConfig, TrainData};

fn main() {
    let smoothness: f32 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let lr: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let mut pairs = Vec::new();
    for i in 0..8u64 {
        let cube = synth_generate(&SynthSpec {
            height: 96, width: 96, bands: 16, num_endmembers: 4,
            noise_sigma: 0.01, smoothness, seed: 700 + i,
        }).unwrap();
        let full = hsisr::data::Cube::new(cube.data, cube.meta).unwrap();
        for patch in extract_patches(&full, 32).unwrap() {
            pairs.push(make_pair(&patch, 2).unwrap());
        }
    }
    let (train_pairs, val) = split_dataset(pairs, 1.0 / 6.0, 77).unwrap();
    let data = TrainData { train: train_pairs, val };
    let model = ModelConfig {
        bands: 16, feature_width: 16, num_residual_blocks: 2,
        global_residual: true, activation: ActivationKind::ReLU, seed: 7,
    };
    let tcfg = TrainConfig {
        batch_size: 4, learning_rate: lr, max_epochs: 20,
        early_stop_patience: 100, checkpoint_cadence: 0, seed: 7,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &tcfg, &data, None).unwrap();
    println!("smoothness={smoothness} lr={lr}");
    for r in &outcome.history {
        println!(
            "epoch {:2}  train total {:.6} (mse {:.6} sp {:.6} spec {:.6})  val {:.6}  mpsnr {:.3}",
            r.epoch, r.train.total, r.train.mse, r.train.spatial, r.train.spectral,
            r.val.total, r.val_mpsnr
        );
    }
}
