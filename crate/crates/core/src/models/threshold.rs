//! Parameter-free Otsu segmenter used as a weight-free reference path.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Otsu thresholding on a fixed-bin histogram of `[0, 1]` intensities.
///
/// When the two Otsu classes differ in mean intensity by less than
/// `min_separation` the patch is treated as pure background; this keeps
/// noise-only cells from being split in half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtsuThreshold {
    pub bins: usize,
    pub min_separation: f32,
}

impl Default for OtsuThreshold {
    fn default() -> Self {
        Self {
            bins: 256,
            min_separation: 0.2,
        }
    }
}

/// Result of an Otsu split: class 0 holds bins `0..=split_bin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub split_bin: usize,
    pub background_mean: f64,
    pub foreground_mean: f64,
}

/// Logit magnitude per histogram bin of distance from the split.
const LOGIT_GAIN: f32 = 64.0;

impl OtsuThreshold {
    #[inline]
    pub fn bin_of(&self, v: f32) -> usize {
        ((v.clamp(0.0, 1.0) * self.bins as f32) as usize).min(self.bins - 1)
    }

    pub fn histogram(&self, image: &Array2<f32>) -> Vec<u64> {
        let mut hist = vec![0u64; self.bins];
        for &v in image {
            hist[self.bin_of(v)] += 1;
        }
        hist
    }

    /// Split maximising between-class variance. Ties over a run of empty bins
    /// resolve to the middle of the run. `None` when one class would be empty.
    pub fn split(&self, hist: &[u64]) -> Option<OtsuSplit> {
        let total: u64 = hist.iter().sum();
        let total_sum: f64 = hist
            .iter()
            .enumerate()
            .map(|(b, &n)| b as f64 * n as f64)
            .sum();
        let mut n0 = 0u64;
        let mut sum0 = 0.0f64;
        let mut best = f64::NEG_INFINITY;
        let mut first = None;
        let mut last = 0;
        for (k, &n) in hist.iter().enumerate().take(hist.len() - 1) {
            n0 += n;
            sum0 += k as f64 * n as f64;
            let n1 = total - n0;
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let mu0 = sum0 / n0 as f64;
            let mu1 = (total_sum - sum0) / n1 as f64;
            let between = n0 as f64 * n1 as f64 * (mu0 - mu1).powi(2);
            if between > best {
                best = between;
                first = Some(k);
                last = k;
            } else if between == best && last + 1 == k {
                last = k;
            }
        }
        let k = (first? + last) / 2;
        let (n0, s0) = hist[..=k]
            .iter()
            .enumerate()
            .fold((0u64, 0.0f64), |(n, s), (b, &c)| {
                (n + c, s + b as f64 * c as f64)
            });
        let n1 = total - n0;
        let to_intensity = |mean_bin: f64| (mean_bin + 0.5) / self.bins as f64;
        Some(OtsuSplit {
            split_bin: k,
            background_mean: to_intensity(s0 / n0 as f64),
            foreground_mean: to_intensity((total_sum - s0) / n1 as f64),
        })
    }

    /// Logits that are positive exactly on foreground pixels.
    pub fn logits(&self, image: &Array2<f32>) -> Array2<f32> {
        let split = self
            .split(&self.histogram(image))
            .filter(|s| s.foreground_mean - s.background_mean >= self.min_separation as f64);
        match split {
            Some(s) => image.mapv(|v| {
                LOGIT_GAIN * (self.bin_of(v) as f32 - s.split_bin as f32 - 0.5) / self.bins as f32
            }),
            None => Array2::from_elem(image.dim(), -0.5 * LOGIT_GAIN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Between-class variance of splitting at bin `k`, evaluated straight
    /// from the pixel list.
    fn between_class(pixels: &[f32], otsu: &OtsuThreshold, k: usize) -> Option<f64> {
        let (lo, hi): (Vec<f64>, Vec<f64>) = (
            pixels
                .iter()
                .filter(|&&v| otsu.bin_of(v) <= k)
                .map(|&v| otsu.bin_of(v) as f64)
                .collect(),
            pixels
                .iter()
                .filter(|&&v| otsu.bin_of(v) > k)
                .map(|&v| otsu.bin_of(v) as f64)
                .collect(),
        );
        if lo.is_empty() || hi.is_empty() {
            return None;
        }
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        Some(lo.len() as f64 * hi.len() as f64 * (m0 - m1).powi(2))
    }

    #[test]
    fn two_level_patch_splits_between_levels() {
        let otsu = OtsuThreshold::default();
        let image =
            Array2::from_shape_fn(
                (16, 16),
                |(r, c)| if (r / 4 + c / 4) % 2 == 0 { 0.2 } else { 0.8 },
            );
        let pixels: Vec<f32> = image.iter().copied().collect();
        let best = (0..255)
            .filter_map(|k| between_class(&pixels, &otsu, k))
            .fold(f64::MIN, f64::max);
        let split = otsu.split(&otsu.histogram(&image)).unwrap();
        assert_eq!(between_class(&pixels, &otsu, split.split_bin), Some(best));
        let logits = otsu.logits(&image);
        for (l, v) in logits.iter().zip(image.iter()) {
            assert_eq!(*l > 0.0, *v == 0.8);
        }
    }

    #[test]
    fn brute_force_agrees_on_random_histograms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let otsu = OtsuThreshold::default();
        for _ in 0..30 {
            let pixels: Vec<f32> = (0..200).map(|_| rng.random::<f32>().powi(2)).collect();
            let image = Array2::from_shape_vec((10, 20), pixels.clone()).unwrap();
            let split = otsu.split(&otsu.histogram(&image)).unwrap();
            let best = (0..255)
                .filter_map(|k| between_class(&pixels, &otsu, k))
                .fold(f64::MIN, f64::max);
            let got = between_class(&pixels, &otsu, split.split_bin).unwrap();
            assert!((got - best).abs() <= 1e-9 * best);
        }
    }

    #[test]
    fn constant_and_flat_patches_are_background() {
        let otsu = OtsuThreshold::default();
        assert!(otsu.logits(&Array2::zeros((8, 8))).iter().all(|&l| l < 0.0));
        let faint = Array2::from_shape_fn((8, 8), |(r, _)| if r < 4 { 0.50 } else { 0.55 });
        assert!(otsu.logits(&faint).iter().all(|&l| l < 0.0));
    }
}
