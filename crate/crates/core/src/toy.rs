//! Synthetic tile images and the matching small autoencoder configuration.

use rand::Rng as _;

use crate::rng;
use crate::tensor::{Activation, Shape3, Tensor};
use crate::train::{ArchConfig, LossWeights, RegObjective, TrainConfig};

pub const TOY_SHAPE: Shape3 = Shape3 { c: 3, h: 16, w: 16 };
pub const TILE: usize = 4;

/// Corners of the RGB cube.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

/// `count` images of `TILE x TILE` constant-colour tiles drawn from the first
/// `colours` palette entries.
pub fn synth_dataset(count: usize, colours: usize, seed: u64) -> Vec<Tensor> {
    let colours = colours.clamp(1, PALETTE.len());
    let mut r = rng::seeded(seed);
    let (th, tw) = (TOY_SHAPE.h / TILE, TOY_SHAPE.w / TILE);
    (0..count)
        .map(|_| {
            let tiles: Vec<usize> = (0..th * tw).map(|_| r.random_range(0..colours)).collect();
            Tensor::from_fn(TOY_SHAPE, |c, i, j| PALETTE[tiles[(i / TILE) * tw + j / TILE]][c])
        })
        .collect()
}

/// Two stride-2 convs down to a 4x4 grid of `c = 4` latents, `N = 8` anchors.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        input: TOY_SHAPE,
        activation: Activation::LeakyRelu(0.1),
        encoder_hidden: 8,
        decoder_hidden: 16,
        latent_dim: 4,
        codebook_size: 8,
        downsample_steps: 2,
    }
}

pub fn toy_config(objective: RegObjective, theta: f64, reg_weight: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        arch: toy_arch(),
        weights: LossWeights {
            recon: 0.02,
            vq: 1.0,
            reg: reg_weight,
            theta,
            objective,
        },
        learning_rate: 0.001,
        epochs: 1000,
        batch_size: 4,
        seed,
    }
}
