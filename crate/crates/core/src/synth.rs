//! Seeded synthetic images for smoke tests and the toy training run:
//! smooth gradients with a few hard-edged shapes and mild texture, so both
//! low- and high-frequency content is present.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::Image;

pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let grad: [(f32, f32); 3] =
        std::array::from_fn(|_| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)));
    let shapes: Vec<(f32, f32, f32, [f32; 3], bool)> = (0..rng.random_range(2..5))
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                rng.random_bool(0.5),
            )
        })
        .collect();
    let freq = rng.random_range(4.0..14.0f32);
    let amp = rng.random_range(0.0..0.08f32);
    #[allow(clippy::approx_constant)] // part of the pinned data set
    let phase = rng.random_range(0.0..6.28f32);
    Image::from_fn(width, height, |c, y, x| {
        let (u, v) = (x as f32 / width as f32, y as f32 / height as f32);
        let mut val = base[c] + grad[c].0 * (u - 0.5) + grad[c].1 * (v - 0.5);
        for &(cx, cy, r, col, square) in &shapes {
            let inside = if square {
                (u - cx).abs() < r && (v - cy).abs() < r
            } else {
                (u - cx).powi(2) + (v - cy).powi(2) < r * r
            };
            if inside {
                val = col[c];
            }
        }
        val += amp * (freq * (u + 0.7 * v) * std::f32::consts::TAU / 2.0 + phase).sin();
        (val.clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}

/// `count` images seeded `seed, seed + 1, ...`.
pub fn synthetic_set(count: usize, width: usize, height: usize, seed: u64) -> Vec<Image> {
    (0..count as u64)
        .map(|i| synthetic_image(width, height, seed + i))
        .collect()
}
