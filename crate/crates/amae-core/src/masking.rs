//! Random token masks: each mask hides exactly round(ratio * T) of the T
//! patch tokens, and the masks within one set are pairwise distinct.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// round() with ties going up, e.g. 2.5 -> 3. Stated so tests are exact.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// A set of boolean token masks (true = masked out), all with the same
/// masked count, pairwise distinct.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub masks: Vec<Vec<bool>>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSet {
    pub fn tokens(&self) -> usize {
        self.masks.first().map_or(0, |m| m.len())
    }

    pub fn masked_count(&self) -> usize {
        self.masks
            .first()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }
}

/// Binomial coefficient, saturating at u128::MAX.
fn choose(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Draw `count` distinct masks over `tokens` positions. Each mask is a
/// shuffle of [0..T) with the first round(ratio*T) positions masked;
/// a draw colliding with an earlier mask in the set is resampled.
pub fn generate_masks(tokens: usize, ratio: f64, count: usize, rng: &mut Rng) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    assert!(count >= 1, "mask count must be >= 1");
    let masked = round_half_up(ratio * tokens as f64);
    let available = choose(tokens, masked);
    if available < count as u128 {
        return Err(Error::InfeasibleSet {
            requested: count,
            available,
        });
    }
    let seed = rng.seed();
    let mut order: Vec<usize> = (0..tokens).collect();
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(count);
    while masks.len() < count {
        rng.shuffle(&mut order);
        let mut mask = vec![false; tokens];
        for &t in &order[..masked] {
            mask[t] = true;
        }
        if masks.iter().any(|m| *m == mask) {
            continue;
        }
        masks.push(mask);
    }
    Ok(MaskSet { masks, ratio, seed })
}

/// Ascending positions where the mask is false (tokens the encoder sees).
pub fn visible_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| (!m).then_some(i))
        .collect()
}

/// Expand a token mask to pixel resolution: each masked token marks its
/// whole p x p patch in an image laid out as `grid_cols` patches per row.
pub fn masked_pixel_mask(mask: &[bool], patch: usize, grid_cols: usize) -> Vec<bool> {
    assert_eq!(mask.len() % grid_cols, 0, "mask length not a grid multiple");
    let grid_rows = mask.len() / grid_cols;
    let width = grid_cols * patch;
    let mut out = vec![false; grid_rows * patch * width];
    for (t, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let gy = t / grid_cols;
        let gx = t % grid_cols;
        for dy in 0..patch {
            let row = (gy * patch + dy) * width + gx * patch;
            for dx in 0..patch {
                out[row + dx] = true;
            }
        }
    }
    out
}

/// Expand a token mask to patch-row layout: entry t*p^2 + j is true when
/// token t is masked. This is the element mask for losses computed on
/// [T x p^2] patch tensors; it selects the same elements as
/// [`masked_pixel_mask`] does in image layout.
pub fn patch_space_mask(mask: &[bool], patch_dim: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len() * patch_dim];
    for (t, &m) in mask.iter().enumerate() {
        if m {
            out[t * patch_dim..(t + 1) * patch_dim].fill(true);
        }
    }
    out
}
