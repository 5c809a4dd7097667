//! Training images: procedural textures and PPM folders.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, TrainError};
use crate::image::Rgb8;
use crate::tensor::kernels::pad_replicate;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
}

/// One synthetic RGB texture: a blend of oriented gratings, a smooth
/// gradient, a checkerboard and soft blobs with random colors.
pub fn texture<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let mut t = Tensor::<f32>::zeros([1, 3, h, w]);
    let mut color = || [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let base = color();
    let (ga, gb) = (color(), color());
    let stripe = color();
    let checker = color();
    let freq = rng.random_range(0.02..0.25);
    let angle = rng.random_range(0.0..TAU);
    let cell = rng.random_range(4..24);
    let (wg, ws, wc) = (rng.random_range(0.2..0.6), rng.random_range(0.0..0.5), rng.random_range(0.0..0.3));
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..5))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(3.0..(h.min(w) as f64 / 2.0).max(4.0)),
                [rng.random(), rng.random(), rng.random()],
            )
        })
        .collect();
    let (s, c) = angle.sin_cos();
    for i in 0..h {
        for j in 0..w {
            let (fi, fj) = (i as f64, j as f64);
            let g = (fi / h as f64 + fj / w as f64) / 2.0;
            let wave = 0.5 + 0.5 * ((fi * s + fj * c) * freq * TAU).sin();
            let chk = (((i / cell) + (j / cell)) % 2) as f64;
            for ch in 0..3 {
                let mut v = base[ch] * (1.0 - wg) + wg * (ga[ch] * (1.0 - g) + gb[ch] * g);
                v = v * (1.0 - ws) + ws * wave * stripe[ch];
                v = v * (1.0 - wc) + wc * chk * checker[ch];
                for (bi, bj, r, col) in &blobs {
                    let d2 = ((fi - bi).powi(2) + (fj - bj).powi(2)) / (r * r);
                    let a = 0.6 * (-d2).exp();
                    v = v * (1.0 - a) + a * col[ch];
                }
                t.set(0, ch, i, j, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    t
}

impl Dataset {
    pub fn procedural(count: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            images: (0..count).map(|_| texture(size, size, &mut rng)).collect(),
        }
    }

    pub fn single(img: Tensor<f32>) -> Self {
        Self { images: vec![img] }
    }

    /// Every `.ppm` file in `dir`, in filename order.
    pub fn from_folder(dir: &Path) -> Result<Self, Error> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        let images = paths
            .iter()
            .map(|p| Ok(Rgb8::read(p)?.to_tensor()))
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(Self { images })
    }

    pub fn extend(&mut self, other: Dataset) {
        self.images.extend(other.images);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `batch` random `patch × patch` crops stacked along the batch axis;
    /// smaller images are replicate-padded first. With `roll`, each crop is
    /// cyclically translated by a random offset.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        patch: usize,
        roll: bool,
        rng: &mut R,
    ) -> Result<Tensor<f32>, Error> {
        if self.images.is_empty() {
            return Err(TrainError::EmptyDataset.into());
        }
        let mut data = Vec::with_capacity(batch * 3 * patch * patch);
        for _ in 0..batch {
            let img = &self.images[rng.random_range(0..self.images.len())];
            let [_, _, h, w] = img.shape();
            let img = if h < patch || w < patch {
                pad_replicate(img, h.max(patch), w.max(patch))?
            } else {
                img.clone()
            };
            let [_, _, h, w] = img.shape();
            let i0 = rng.random_range(0..=h - patch);
            let j0 = rng.random_range(0..=w - patch);
            let (di, dj) = if roll {
                (rng.random_range(0..patch), rng.random_range(0..patch))
            } else {
                (0, 0)
            };
            for c in 0..3 {
                let plane = img.plane(0, c);
                for i in 0..patch {
                    let row = i0 + (i + di) % patch;
                    let src = &plane[row * w + j0..row * w + j0 + patch];
                    data.extend_from_slice(&src[dj..]);
                    data.extend_from_slice(&src[..dj]);
                }
            }
        }
        Ok(Tensor::from_vec([batch, 3, patch, patch], data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_in_range() {
        let a = Dataset::procedural(3, 32, 5);
        let b = Dataset::procedural(3, 32, 5);
        assert_eq!(a.images, b.images);
        for t in &a.images {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a.images[0], a.images[1]);
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let d = Dataset::procedural(1, 16, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = d.sample(2, 16, false, &mut rng).unwrap();
        assert_eq!(p.shape(), [2, 3, 16, 16]);
        assert_eq!(&p.data()[..3 * 256], d.images[0].data());
    }

    #[test]
    fn rolled_patch_is_a_cyclic_translate() {
        let d = Dataset::procedural(1, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = d.sample(1, 8, true, &mut rng).unwrap();
        let img = &d.images[0];
        let found = (0..8).any(|di| {
            (0..8).any(|dj| (0..8).all(|i| (0..8).all(|j| p.at(0, 1, i, j) == img.at(0, 1, (i + di) % 8, (j + dj) % 8))))
        });
        assert!(found);
        let mut a = p.data().to_vec();
        let mut b = img.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Dataset::default().sample(1, 8, false, &mut rng).is_err());
    }
}
