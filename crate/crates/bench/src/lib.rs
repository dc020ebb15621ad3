//! Input fixtures shared by the benchmarks.

use radiomae::datamodel::Image;
use radiomae::errormap::{pass_record, PassRecord};
use radiomae::mae::sample_mask_with;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn noise_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).expect("sized buffer")
}

/// `n` passes over one `size×size` image with random reconstructions and
/// masks at ratio 0.75.
pub fn error_passes(size: usize, patch: usize, n: usize, seed: u64) -> Vec<PassRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = noise_image(size, size, 1, seed);
    let grid = (size / patch) * (size / patch);
    (0..n)
        .map(|k| {
            let mask = sample_mask_with(grid, 0.75, &mut rng).expect("valid ratio");
            pass_record(&x, noise_image(size, size, 1, seed + 1 + k as u64), mask, patch).expect("matching shapes")
        })
        .collect()
}

/// Scores on 64 levels (plenty of ties) with roughly balanced labels.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y = rng.gen_bool(0.5);
            let s = (rng.gen_range(0..48) + if y { 16 } else { 0 }) as f64 / 64.0;
            (s, y)
        })
        .unzip()
}
