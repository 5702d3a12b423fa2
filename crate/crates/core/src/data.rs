//! Procedural toy datasets small enough to train against on one CPU core.
//! Every sample carries a class label; generation is a pure function of the
//! seed. Images are stored normalized (per-channel zero mean, unit variance)
//! with the statistics kept alongside for later denormalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{RngStreams, StreamKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{reconstruct, WaveletStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// One of four fixed patterns (blob, horizontal, vertical, diagonal)
    /// plus pixel noise; the pattern index is the class.
    GaussianMixture,
    /// Checkerboards with a random sign flip; the flip is the class.
    Checkerboard,
    /// Images whose energy sits in one chosen level-1 wavelet subband;
    /// the subband index is the class.
    FrequencyBars,
}

impl DataKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "gaussian_mixture" => Ok(DataKind::GaussianMixture),
            "checkerboard" => Ok(DataKind::Checkerboard),
            "frequency_bars" => Ok(DataKind::FrequencyBars),
            other => Err(Error::config(format!(
                "unknown data_kind {other:?}; expected gaussian_mixture, \
                 checkerboard, or frequency_bars"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataKind::GaussianMixture => "gaussian_mixture",
            DataKind::Checkerboard => "checkerboard",
            DataKind::FrequencyBars => "frequency_bars",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataKind::GaussianMixture => 4,
            DataKind::Checkerboard => 2,
            DataKind::FrequencyBars => 4,
        }
    }
}

pub struct ToyDataset<T: Scalar> {
    pub kind: DataKind,
    /// [count, channels, height, width], normalized per channel.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Per-channel statistics of the raw (pre-normalization) pixels.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const NOISE_STD: f64 = 0.1;

/// Noise-free class pattern for the mixture dataset, in [-1, 1].
pub fn mixture_template(class: usize, c: usize, h: usize, w: usize, row: usize, col: usize) -> f64 {
    let _ = c;
    let (fr, fc) = (row as f64, col as f64);
    let (fh, fw) = (h as f64, w as f64);
    match class {
        0 => {
            let dr = fr - (fh - 1.0) / 2.0;
            let dc = fc - (fw - 1.0) / 2.0;
            let s = fh / 6.0;
            2.0 * (-(dr * dr + dc * dc) / (2.0 * s * s)).exp() - 1.0
        }
        1 => (std::f64::consts::TAU * 2.0 * fr / fh).sin(),
        2 => (std::f64::consts::TAU * 2.0 * fc / fw).sin(),
        _ => (std::f64::consts::TAU * 2.0 * (fr + fc) / (fh + fw)).sin(),
    }
}

fn checker_value(flip: usize, row: usize, col: usize) -> f64 {
    let cell = 4;
    let base = if ((row / cell) + (col / cell)) % 2 == 0 {
        1.0
    } else {
        -1.0
    };
    if flip == 0 {
        base
    } else {
        -base
    }
}

impl<T: Scalar> ToyDataset<T> {
    pub fn generate(
        kind: DataKind,
        count: usize,
        channels: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument {
                op: "toy_dataset",
                detail: "extent must be positive".into(),
            });
        }
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::InvalidArgument {
                op: "toy_dataset",
                detail: format!("extents {height}x{width} must be even"),
            });
        }
        let mut rng = RngStreams::new(seed).stream(StreamKind::Data);
        let per = channels * height * width;
        let mut raw = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let label = rng.gen_range(0..kind.num_classes());
            labels.push(label);
            match kind {
                DataKind::GaussianMixture => {
                    for c in 0..channels {
                        for r in 0..height {
                            for col in 0..width {
                                let v = mixture_template(label, c, height, width, r, col)
                                    + NOISE_STD * f64::standard_normal(&mut rng);
                                raw.push(v);
                            }
                        }
                    }
                }
                DataKind::Checkerboard => {
                    for _c in 0..channels {
                        for r in 0..height {
                            for col in 0..width {
                                let v = checker_value(label, r, col)
                                    + NOISE_STD * f64::standard_normal(&mut rng);
                                raw.push(v);
                            }
                        }
                    }
                }
                DataKind::FrequencyBars => {
                    raw.extend(frequency_image(label, channels, height, width, &mut rng)?);
                }
            }
        }

        let (mean, std) = channel_stats(&raw, count, channels, per / channels);
        let data: Vec<T> = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i % per) / (height * width);
                T::from_f64((v - mean[c]) / std[c])
            })
            .collect();
        Ok(ToyDataset {
            kind,
            images: Tensor::from_vec(data, &[count, channels, height, width])?,
            labels,
            channels,
            height,
            width,
            seed,
            mean,
            std,
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    /// Rows `idx` of the normalized image tensor with their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        for &i in idx {
            if i >= self.count() {
                return Err(Error::IndexOutOfBounds {
                    op: "toy_batch",
                    index: i,
                    extent: self.count(),
                });
            }
        }
        let images = self.images.gather(0, idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// The noise-free mixture pattern for `class`, normalized with this
    /// dataset's statistics. Useful as a nearest-template classifier.
    pub fn normalized_template(&self, class: usize) -> Result<Vec<f64>> {
        if self.kind != DataKind::GaussianMixture {
            return Err(Error::InvalidArgument {
                op: "normalized_template",
                detail: format!("no templates for {}", self.kind.name()),
            });
        }
        let mut out = Vec::with_capacity(self.channels * self.height * self.width);
        for c in 0..self.channels {
            for r in 0..self.height {
                for col in 0..self.width {
                    let v = mixture_template(class, c, self.height, self.width, r, col);
                    out.push((v - self.mean[c]) / self.std[c]);
                }
            }
        }
        Ok(out)
    }
}

/// Raw pixels for one frequency-bar image: standard-normal coefficients in
/// the designated level-1 subband, zeros elsewhere, plus small pixel noise.
fn frequency_image(
    subband: usize,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (hh, hw) = (height / 2, width / 2);
    let bands: Vec<Tensor<f64>> = (0..4)
        .map(|b| {
            if b == subband {
                Tensor::randn(&[channels, hh, hw], 0.0, 1.0, rng)
            } else {
                Tensor::zeros(&[channels, hh, hw])
            }
        })
        .collect();
    let img = reconstruct(&WaveletStack::from_subbands(1, bands)?)?;
    Ok(img
        .to_vec()
        .into_iter()
        .map(|v| v + NOISE_STD * f64::standard_normal(rng))
        .collect())
}

fn channel_stats(raw: &[f64], count: usize, channels: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; channels];
    let mut std = vec![1.0; channels];
    if count == 0 {
        return (mean, std);
    }
    let n = (count * hw) as f64;
    for c in 0..channels {
        let mut sum = 0.0;
        for s in 0..count {
            let off = (s * channels + c) * hw;
            sum += raw[off..off + hw].iter().sum::<f64>();
        }
        mean[c] = sum / n;
        let mut sq = 0.0;
        for s in 0..count {
            let off = (s * channels + c) * hw;
            sq += raw[off..off + hw].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
        std[c] = (sq / n).sqrt().max(1e-6);
    }
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::decompose;

    #[test]
    fn empty_request_yields_an_empty_set() {
        let ds = ToyDataset::<f32>::generate(DataKind::GaussianMixture, 0, 3, 8, 8, 1).unwrap();
        assert_eq!(ds.count(), 0);
        assert_eq!(ds.images.shape(), &[0, 3, 8, 8]);
    }

    #[test]
    fn same_seed_regenerates_identical_bytes() {
        for kind in [
            DataKind::GaussianMixture,
            DataKind::Checkerboard,
            DataKind::FrequencyBars,
        ] {
            let a = ToyDataset::<f32>::generate(kind, 6, 2, 8, 8, 42).unwrap();
            let b = ToyDataset::<f32>::generate(kind, 6, 2, 8, 8, 42).unwrap();
            let bytes_a: Vec<u8> =
                a.images.to_vec().into_iter().flat_map(f32::to_le_bytes_vec).collect();
            let bytes_b: Vec<u8> =
                b.images.to_vec().into_iter().flat_map(f32::to_le_bytes_vec).collect();
            assert_eq!(bytes_a, bytes_b, "{}", kind.name());
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = ToyDataset::<f32>::generate(DataKind::Checkerboard, 6, 1, 8, 8, 1).unwrap();
        let b = ToyDataset::<f32>::generate(DataKind::Checkerboard, 6, 1, 8, 8, 2).unwrap();
        assert_ne!(a.images.to_vec(), b.images.to_vec());
    }

    #[test]
    fn normalization_centers_each_channel() {
        let ds = ToyDataset::<f64>::generate(DataKind::GaussianMixture, 64, 3, 8, 8, 7).unwrap();
        let v = ds.images.to_vec();
        let hw = 64;
        for c in 0..3 {
            let vals: Vec<f64> = (0..64)
                .flat_map(|s| {
                    let off = (s * 3 + c) * hw;
                    v[off..off + hw].to_vec()
                })
                .collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-10, "channel {c} mean {m}");
            assert!((sd - 1.0).abs() < 1e-10, "channel {c} std {sd}");
        }
    }

    #[test]
    fn frequency_bars_concentrate_energy_in_the_designated_subband() {
        let ds = ToyDataset::<f64>::generate(DataKind::FrequencyBars, 12, 1, 16, 16, 3).unwrap();
        // energy fractions are scale-invariant, so measuring on the
        // normalized pixels is fine
        for s in 0..12 {
            let img = ds.images.gather(0, &[s]).unwrap().reshape(&[1, 16, 16]).unwrap();
            let stack = decompose(&img, 1).unwrap();
            let energies: Vec<f64> = stack
                .subbands()
                .iter()
                .map(|sb| sb.to_vec().iter().map(|v| v * v).sum::<f64>())
                .collect();
            let total: f64 = energies.iter().sum();
            let frac = energies[ds.labels[s]] / total;
            assert!(frac >= 0.8, "sample {s}: fraction {frac} in band {}", ds.labels[s]);
        }
    }

    #[test]
    fn batch_gathers_requested_rows() {
        let ds = ToyDataset::<f32>::generate(DataKind::GaussianMixture, 8, 1, 8, 8, 5).unwrap();
        let (imgs, labels) = ds.batch(&[3, 1, 3]).unwrap();
        assert_eq!(imgs.shape(), &[3, 1, 8, 8]);
        assert_eq!(labels, vec![ds.labels[3], ds.labels[1], ds.labels[3]]);
        let full = ds.images.to_vec();
        let got = imgs.to_vec();
        let per = 64;
        assert_eq!(&got[..per], &full[3 * per..4 * per]);
        assert!(ds.batch(&[8]).is_err());
    }

    #[test]
    fn mixture_samples_sit_nearest_their_own_template() {
        let ds = ToyDataset::<f64>::generate(DataKind::GaussianMixture, 32, 3, 16, 16, 9).unwrap();
        let templates: Vec<Vec<f64>> =
            (0..4).map(|k| ds.normalized_template(k).unwrap()).collect();
        let v = ds.images.to_vec();
        let per = 3 * 16 * 16;
        for s in 0..32 {
            let img = &v[s * per..(s + 1) * per];
            let mut best = (f64::INFINITY, 0);
            for (k, t) in templates.iter().enumerate() {
                let d: f64 = img.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(best.1, ds.labels[s], "sample {s}");
        }
    }
}
