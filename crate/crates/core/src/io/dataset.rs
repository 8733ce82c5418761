use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{read_ppm, Image};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Training images held in memory, in file-name order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub paths: Vec<PathBuf>,
}

/// One batch of crops, `[B, 3, crop, crop]`.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub epoch: usize,
    pub images: Tensor<F>,
    /// Crops taken from images smaller than the crop size.
    pub padded: usize,
}

impl Dataset {
    pub fn from_images(images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        Ok(Self {
            paths: vec![PathBuf::new(); images.len()],
            images,
        })
    }

    /// Every `.ppm` file directly inside `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Invalid(format!(
                "no .ppm images in {}",
                dir.display()
            )));
        }
        let images = paths
            .iter()
            .map(|p| read_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { images, paths })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Endless batches: each epoch visits every image once in a seeded
    /// shuffled order, taking one uniformly placed `crop×crop` window per
    /// image. The last batch of an epoch may be short.
    pub fn batches<F: Real>(
        &self,
        crop: usize,
        batch_size: usize,
        seed: u64,
    ) -> impl Iterator<Item = Batch<F>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut epoch = 0;
        let mut order: Vec<usize> = Vec::new();
        let mut at = 0;
        std::iter::from_fn(move || {
            if at >= order.len() {
                if !order.is_empty() {
                    epoch += 1;
                }
                order = (0..self.len()).collect();
                order.shuffle(&mut rng);
                at = 0;
            }
            let take = batch_size.min(order.len() - at);
            let mut data = Vec::with_capacity(take * 3 * crop * crop);
            let mut padded = 0;
            for &i in &order[at..at + take] {
                let mut img = &self.images[i];
                let grown;
                if img.width < crop || img.height < crop {
                    grown = img.pad_to(crop, crop);
                    img = &grown;
                    padded += 1;
                }
                let x0 = rng.random_range(0..=img.width - crop);
                let y0 = rng.random_range(0..=img.height - crop);
                data.extend(
                    img.crop(x0, y0, crop, crop)
                        .data
                        .iter()
                        .map(|&v| F::c(v as f64)),
                );
            }
            at += take;
            Some(Batch {
                epoch,
                images: Tensor::new(&[take, 3, crop, crop], data).expect("batch shape"),
                padded,
            })
        })
    }
}
