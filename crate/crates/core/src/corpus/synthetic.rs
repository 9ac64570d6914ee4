//! Seeded synthetic corpus standing in for frozen text and image encoders.
//!
//! Draw order, all from one [`SplitMix64`] stream seeded with `spec.seed`
//! (matrices row-major, platforms in sat, drone, ground order):
//!
//! 1. Shared Gaussian bases `B_0` (`d_t x d_z`) and `A_0` (`d_v x d_z`).
//! 2. For each platform: text map `B_p`, the columns of
//!    `(1 - s) B_0 + s G` orthonormalized by Gram-Schmidt with a fresh
//!    Gaussian `G` and `s = map_spread`; image map `A_p` built the same way
//!    from `A_0`; then text offset `mu_p` and image offset `nu_p` (Gaussian
//!    vectors rescaled to length `platform_offset`).
//! 3. For each platform, for each location: center `c ~ N(0, I_dz)`, then
//!    the image `A_p c + nu_p + sigma * n`, then `queries_per_location`
//!    texts `B_p c + mu_p + sigma * n`.
//!
//! `d_z = min(d_t, d_v)`. Gallery ids run `0..3L` in platform order and
//! query ids `0..3LQ` in generation order. Captions come from a separate
//! stream seeded with `derive_seed(seed, "captions")` and do not affect
//! any embedding.
//!
//! Because `A_p B_p^T` differs per platform, no single linear text-to-image
//! alignment fits all three platforms at once.

use serde::{Deserialize, Serialize};

use super::{Corpus, Embedding, GalleryItem, PerPlatform, Platform, QueryRecord};
use crate::error::{PemoeError, Result};
use crate::rng::{derive_seed, SplitMix64};

/// Default length of the per-platform offset added to every embedding of
/// that platform.
pub const PLATFORM_OFFSET: f64 = 3.0;

/// Default mixing weight of the platform-specific part of each map.
pub const MAP_SPREAD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub locations_per_platform: usize,
    pub queries_per_location: usize,
    pub d_t: usize,
    pub d_v: usize,
    pub noise_sigma: f64,
    /// Length of the per-platform embedding offsets. Larger values make the
    /// platform easier to read off an embedding.
    pub platform_offset: f64,
    /// In `[0, 1]`: 0 gives every platform the same maps, 1 gives fully
    /// independent maps.
    pub map_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            locations_per_platform: 30,
            queries_per_location: 4,
            d_t: 16,
            d_v: 16,
            noise_sigma: 0.5,
            platform_offset: PLATFORM_OFFSET,
            map_spread: MAP_SPREAD,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("locations_per_platform", self.locations_per_platform),
            ("queries_per_location", self.queries_per_location),
            ("d_t", self.d_t),
            ("d_v", self.d_v),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PemoeError::invalid(name, "must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PemoeError::invalid(
                "noise_sigma",
                format!("{} must be finite and non-negative", self.noise_sigma),
            ));
        }
        if !(self.platform_offset >= 0.0 && self.platform_offset.is_finite()) {
            return Err(PemoeError::invalid(
                "platform_offset",
                format!("{} must be finite and non-negative", self.platform_offset),
            ));
        }
        if !(0.0..=1.0).contains(&self.map_spread) {
            return Err(PemoeError::invalid(
                "map_spread",
                format!("{} must lie in [0, 1]", self.map_spread),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.d_t.min(self.d_v)
    }
}

/// Generating parameters behind a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub latent_dim: usize,
    /// `d_t x d_z`, row-major, orthonormal columns.
    pub text_maps: PerPlatform<Vec<f64>>,
    /// `d_v x d_z`, row-major, orthonormal columns.
    pub image_maps: PerPlatform<Vec<f64>>,
    pub text_offsets: PerPlatform<Vec<f64>>,
    pub image_offsets: PerPlatform<Vec<f64>>,
    /// Latent center of each gallery item, in gallery order.
    pub centers: Vec<Vec<f64>>,
}

impl SyntheticTruth {
    /// Latent coordinates of a text embedding under platform `p`'s map,
    /// `B_p^T (t - mu_p)`.
    pub fn text_latent(&self, p: Platform, t: &[f64]) -> Vec<f64> {
        project_back(&self.text_maps[p], &self.text_offsets[p], t, self.latent_dim)
    }

    /// Latent coordinates of an image embedding, `A_p^T (v - nu_p)`.
    pub fn image_latent(&self, p: Platform, v: &[f64]) -> Vec<f64> {
        project_back(&self.image_maps[p], &self.image_offsets[p], v, self.latent_dim)
    }
}

fn project_back(map: &[f64], offset: &[f64], x: &[f64], d_z: usize) -> Vec<f64> {
    let mut z = vec![0.0; d_z];
    for (r, (&xi, &oi)) in x.iter().zip(offset).enumerate() {
        let row = &map[r * d_z..(r + 1) * d_z];
        for (zj, &m) in z.iter_mut().zip(row) {
            *zj += m * (xi - oi);
        }
    }
    z
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    generate_synthetic_with_truth(spec).map(|(c, _)| c)
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<(Corpus, SyntheticTruth)> {
    spec.validate()?;
    let d_z = spec.latent_dim();
    let mut rng = SplitMix64::new(spec.seed);

    let mut text_maps = PerPlatform::<Vec<f64>>::default();
    let mut image_maps = PerPlatform::<Vec<f64>>::default();
    let mut text_offsets = PerPlatform::<Vec<f64>>::default();
    let mut image_offsets = PerPlatform::<Vec<f64>>::default();
    let base_text = gaussian_matrix(&mut rng, spec.d_t, d_z);
    let base_image = gaussian_matrix(&mut rng, spec.d_v, d_z);
    for p in Platform::ALL {
        text_maps[p] = mixed_map(&mut rng, &base_text, spec.d_t, d_z, spec.map_spread);
        image_maps[p] = mixed_map(&mut rng, &base_image, spec.d_v, d_z, spec.map_spread);
        text_offsets[p] = scaled_direction(&mut rng, spec.d_t, spec.platform_offset);
        image_offsets[p] = scaled_direction(&mut rng, spec.d_v, spec.platform_offset);
    }

    let mut captions = SplitMix64::new(derive_seed(spec.seed, "captions"));
    let mut gallery = Vec::new();
    let mut queries = Vec::new();
    let mut centers = Vec::new();
    for p in Platform::ALL {
        for _ in 0..spec.locations_per_platform {
            let center: Vec<f64> = (0..d_z).map(|_| rng.gaussian()).collect();
            let image = embed(&mut rng, &image_maps[p], &image_offsets[p], &center, spec.noise_sigma);
            let id = gallery.len() as u64;
            gallery.push(GalleryItem {
                id,
                platform: p,
                caption: synthetic_caption(&mut captions, p),
                image_embedding: Embedding::new(image)?,
            });
            for _ in 0..spec.queries_per_location {
                let text = embed(&mut rng, &text_maps[p], &text_offsets[p], &center, spec.noise_sigma);
                queries.push(QueryRecord {
                    id: queries.len() as u64,
                    text_embedding: Embedding::new(text)?,
                    positive_item_id: id,
                    platform: p,
                });
            }
            centers.push(center);
        }
    }

    let corpus = Corpus::new(spec.d_t, spec.d_v, gallery, queries)?;
    let truth = SyntheticTruth {
        latent_dim: d_z,
        text_maps,
        image_maps,
        text_offsets,
        image_offsets,
        centers,
    };
    Ok((corpus, truth))
}

fn embed(rng: &mut SplitMix64, map: &[f64], offset: &[f64], center: &[f64], sigma: f64) -> Vec<f64> {
    let d_z = center.len();
    offset
        .iter()
        .enumerate()
        .map(|(r, &o)| {
            let row = &map[r * d_z..(r + 1) * d_z];
            let mapped: f64 = row.iter().zip(center).map(|(m, c)| m * c).sum();
            mapped + o + sigma * rng.gaussian()
        })
        .collect()
}

fn gaussian_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gaussian()).collect()
}

/// `(1 - spread) * base + spread * G` with Gaussian `G`, then orthonormalized.
fn mixed_map(rng: &mut SplitMix64, base: &[f64], rows: usize, cols: usize, spread: f64) -> Vec<f64> {
    let own = gaussian_matrix(rng, rows, cols);
    let m = base
        .iter()
        .zip(&own)
        .map(|(b, g)| (1.0 - spread) * b + spread * g)
        .collect();
    orthonormalize_columns(m, rows, cols)
}

fn orthonormalize_columns(mut m: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|r| m[r * cols + j] * m[r * cols + k]).sum();
            for r in 0..rows {
                m[r * cols + j] -= dot * m[r * cols + k];
            }
        }
        let norm = (0..rows).map(|r| m[r * cols + j].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            m[r * cols + j] /= norm;
        }
    }
    m
}

fn scaled_direction(rng: &mut SplitMix64, dim: usize, length: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x * length / norm).collect()
}

const SUBJECTS: [&str; 6] = [
    "A teaching building",
    "A sports field",
    "A parking lot",
    "A library",
    "A dormitory block",
    "A clock tower",
];
const DETAILS: [&str; 6] = [
    "It has a red tiled roof.",
    "Trees line the main path.",
    "Several cars are parked nearby.",
    "The facade is made of grey stone.",
    "A small fountain stands at the entrance.",
    "Solar panels cover part of the roof.",
];
const DIRECTIONAL: [&str; 6] = [
    "A river runs to the north of the site.",
    "The main road is on the left side.",
    "A lake lies to the east.",
    "The gate faces southwest.",
    "A tall chimney stands to the right of the hall.",
    "The lower-left corner shows a tennis court.",
];

fn synthetic_caption(rng: &mut SplitMix64, platform: Platform) -> String {
    let mut sentences = vec![format!("{} seen from a {} view.", SUBJECTS[rng.below(6)], match platform {
        Platform::Satellite => "satellite",
        Platform::Drone => "drone",
        Platform::Ground => "ground",
    })];
    sentences.push(DETAILS[rng.below(6)].to_string());
    if rng.uniform() < 0.5 {
        let at = 1 + rng.below(sentences.len());
        sentences.insert(at, DIRECTIONAL[rng.below(6)].to_string());
    }
    sentences.join(" ")
}
