//! Waveform front end: log-mel extraction, autocorrelation F0 tracking,
//! Griffin-Lim inversion and WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use cyclevc_autograd::par;

use crate::corpus::MelSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop_length: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    /// F0 search band and voicing threshold on the normalized autocorrelation.
    pub f0_min: f64,
    pub f0_max: f64,
    pub voicing_threshold: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            sample_rate: 16000,
            frame_length: 1024,
            hop_length: 160,
            mel_bins: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-5,
            f0_min: 60.0,
            f0_max: 500.0,
            voicing_threshold: 0.3,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("audio config: {m}")));
        if self.sample_rate == 0 || self.mel_bins == 0 || self.hop_length == 0 {
            return bad("sample_rate, mel_bins and hop_length must be positive");
        }
        if self.hop_length > self.frame_length || self.frame_length < 2 {
            return bad("need 2 <= frame_length and hop_length <= frame_length");
        }
        if self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max) {
            return bad("need 0 < f0_min < f0_max");
        }
        Ok(())
    }

    pub fn min_log(&self) -> f64 {
        self.log_floor.ln()
    }

    /// Mel frames produced for a waveform of `samples` samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop_length)
    }

    fn fft_bins(&self) -> usize {
        self.frame_length / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK filterbank, `mel_bins` rows over `frame_length / 2 + 1`
/// FFT bins.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
    pub fft_bins: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &AudioConfig) -> Self {
        let nb = cfg.fft_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let pts: Vec<f64> =
            (0..cfg.mel_bins + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64)).collect();
        let mut weights = vec![0.0; cfg.mel_bins * nb];
        for m in 0..cfg.mel_bins {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            for k in 0..nb {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.frame_length as f64;
                let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                weights[m * nb + k] = w.max(0.0);
            }
        }
        MelFilterbank { weights, centers_hz: pts[1..=cfg.mel_bins].to_vec(), fft_bins: nb }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.fft_bins..(m + 1) * self.fft_bins]
    }

    fn apply(&self, mag: &[f64]) -> Vec<f64> {
        self.weights.chunks(self.fft_bins).map(|row| row.iter().zip(mag).map(|(w, x)| w * x).sum()).collect()
    }

    /// Least-effort inverse: each FFT bin takes the filter-weighted average of
    /// the mel energies that cover it.
    fn pseudo_inverse(&self, mel: &[f64]) -> Vec<f64> {
        (0..self.fft_bins)
            .map(|k| {
                let (mut num, mut den) = (0.0, 0.0);
                for (m, e) in mel.iter().enumerate() {
                    let w = self.weights[m * self.fft_bins + k];
                    num += w * e;
                    den += w;
                }
                if den > 1e-12 {
                    num / den
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Zero-pads `frame_length / 2` on both sides and slices frame `i` starting at
/// `i * hop` of the padded signal.
fn centered_frames(wave: &[f32], cfg: &AudioConfig) -> Vec<Vec<f64>> {
    let half = cfg.frame_length / 2;
    let frames = cfg.frame_count(wave.len());
    (0..frames)
        .map(|i| {
            (0..cfg.frame_length)
                .map(|j| {
                    let pos = (i * cfg.hop_length + j) as isize - half as isize;
                    if pos >= 0 && (pos as usize) < wave.len() {
                        wave[pos as usize] as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

fn stft(wave: &[f32], cfg: &AudioConfig, window: &[f64]) -> Vec<Vec<Complex64>> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.frame_length);
    centered_frames(wave, cfg)
        .into_iter()
        .map(|frame| {
            let mut buf: Vec<Complex64> = frame.iter().zip(window).map(|(x, w)| Complex64::new(x * w, 0.0)).collect();
            fft.process(&mut buf);
            buf.truncate(cfg.fft_bins());
            buf
        })
        .collect()
}

/// Weighted overlap-add inverse of [`stft`]; returns `frames * hop` samples.
fn istft(spec: &[Vec<Complex64>], cfg: &AudioConfig, window: &[f64]) -> Vec<f32> {
    let n = cfg.frame_length;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let half = n / 2;
    let total = spec.len() * cfg.hop_length + n;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    for (i, frame) in spec.iter().enumerate() {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..frame.len()].copy_from_slice(frame);
        for k in 1..n - frame.len() + 1 {
            buf[n - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        for j in 0..n {
            let pos = i * cfg.hop_length + j;
            acc[pos] += buf[j].re / n as f64 * window[j];
            norm[pos] += window[j] * window[j];
        }
    }
    (0..spec.len() * cfg.hop_length)
        .map(|s| {
            let p = s + half;
            if norm[p] > 1e-8 {
                (acc[p] / norm[p]) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Log-mel spectrogram with `ceil(len / hop)` frames, every value at least
/// `ln(log_floor)`.
pub fn extract_mel(wave: &[f32], cfg: &AudioConfig) -> Result<MelSpec> {
    if wave.is_empty() {
        return Err(Error::Invalid("extract_mel: empty waveform".into()));
    }
    cfg.validate()?;
    let bank = MelFilterbank::new(cfg);
    let window = hann(cfg.frame_length);
    let spec = stft(wave, cfg, &window);
    let floor = cfg.log_floor;
    let rows = par::map_slice(&spec, |frame| {
        let mag: Vec<f64> = frame.iter().map(|c| c.norm()).collect();
        bank.apply(&mag).into_iter().map(|e| e.max(floor).ln() as f32).collect::<Vec<f32>>()
    });
    MelSpec::new(rows.len(), cfg.mel_bins, rows.concat())
}

/// Normalized autocorrelation of one frame at each lag in `lags`.
fn nacf(x: &[f64], lags: std::ops::RangeInclusive<usize>) -> Vec<f64> {
    lags.map(|tau| {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for n in 0..x.len() - tau {
            xy += x[n] * x[n + tau];
            xx += x[n] * x[n];
            yy += x[n + tau] * x[n + tau];
        }
        let d = (xx * yy).sqrt();
        if d > 1e-12 {
            xy / d
        } else {
            0.0
        }
    })
    .collect()
}

/// Per-mel-frame F0 in Hz (0 = unvoiced) from the normalized autocorrelation
/// over the same centred frames as [`extract_mel`].
pub fn estimate_f0(wave: &[f32], cfg: &AudioConfig) -> Result<Vec<f32>> {
    if wave.is_empty() {
        return Err(Error::Invalid("estimate_f0: empty waveform".into()));
    }
    cfg.validate()?;
    let sr = cfg.sample_rate as f64;
    let min_lag = ((sr / cfg.f0_max).floor() as usize).max(2);
    let max_lag = ((sr / cfg.f0_min).ceil() as usize).min(cfg.frame_length / 2);
    let frames = centered_frames(wave, cfg);
    Ok(par::map_slice(&frames, |frame| {
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        if energy < 1e-10 * x.len() as f64 {
            return 0.0;
        }
        // one extra lag on each side so interior peaks can be interpolated
        let lo = min_lag - 1;
        let r = nacf(&x, lo..=max_lag + 1);
        let best = r[1..r.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if best < cfg.voicing_threshold {
            return 0.0;
        }
        // earliest strong local peak, which avoids locking onto sub-harmonics
        let i = (1..r.len() - 1).find(|&i| r[i] >= 0.9 * best && r[i] >= r[i - 1] && r[i] >= r[i + 1]).unwrap_or(1);
        let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
        let den = a - 2.0 * b + c;
        let delta = if den.abs() > 1e-12 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
        let f0 = sr / ((lo + i) as f64 + delta);
        if f0 >= cfg.f0_min && f0 <= cfg.f0_max {
            f0 as f32
        } else {
            0.0
        }
    }))
}

/// Griffin-Lim reconstruction from a log-mel spectrogram. Returns
/// `frames * hop` samples.
pub fn griffin_lim(mel: &MelSpec, cfg: &AudioConfig, iterations: usize, seed: u64) -> Result<Vec<f32>> {
    cfg.validate()?;
    if mel.bins() != cfg.mel_bins {
        return Err(Error::Shape(format!("mel has {} bins, config expects {}", mel.bins(), cfg.mel_bins)));
    }
    let bank = MelFilterbank::new(cfg);
    let window = hann(cfg.frame_length);
    let mags: Vec<Vec<f64>> = (0..mel.frames())
        .map(|t| bank.pseudo_inverse(&mel.row(t).iter().map(|&v| (v as f64).exp()).collect::<Vec<_>>()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<Vec<Complex64>> = mags
        .iter()
        .map(|m| m.iter().map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI))).collect())
        .collect();
    let combine = |phase: &[Vec<Complex64>]| -> Vec<Vec<Complex64>> {
        mags.iter().zip(phase).map(|(m, p)| m.iter().zip(p).map(|(a, ph)| ph * *a).collect()).collect()
    };
    for _ in 0..iterations {
        let wave = istft(&combine(&phase), cfg, &window);
        let spec = stft(&wave, cfg, &window);
        for (p, s) in phase.iter_mut().zip(&spec) {
            for (pk, sk) in p.iter_mut().zip(s) {
                let n = sk.norm();
                *pk = if n > 1e-12 { sk / n } else { Complex64::new(1.0, 0.0) };
            }
        }
    }
    Ok(istft(&combine(&phase), cfg, &window))
}

/// Reads a mono WAV (first channel of multi-channel files), checking the
/// sample rate.
pub fn read_wav(path: &Path, cfg: &AudioConfig) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != cfg.sample_rate {
        return Err(Error::Invalid(format!(
            "{}: sample rate {} Hz, expected {} Hz",
            path.display(),
            spec.sample_rate,
            cfg.sample_rate
        )));
    }
    let ch = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 / scale)).collect::<std::result::Result<_, _>>()?
        }
    };
    Ok(samples.into_iter().step_by(ch).collect())
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn sine(hz: f64, n: usize, sr: f64) -> Vec<f32> {
        (0..n).map(|i| (0.5 * (2.0 * PI * hz * i as f64 / sr).sin()) as f32).collect()
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = AudioConfig::default();
        let mel = extract_mel(&vec![0.0; 1600], &cfg).unwrap();
        assert_eq!(mel.frames(), 10);
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_is_100_frames() {
        let cfg = AudioConfig::default();
        assert_eq!(extract_mel(&sine(300.0, 16000, 16000.0), &cfg).unwrap().frames(), 100);
    }

    #[test]
    fn empty_waveform_rejected() {
        let cfg = AudioConfig::default();
        assert!(extract_mel(&[], &cfg).is_err());
        assert!(estimate_f0(&[], &cfg).is_err());
    }

    #[test]
    fn sinusoid_peaks_in_filter_nearest_its_frequency() {
        let cfg = AudioConfig::default();
        let mel = extract_mel(&sine(440.0, 16000, 16000.0), &cfg).unwrap();
        // centres recomputed from the HTK formula: 81 equal steps in mel up to 8 kHz
        let top = 2595.0 * (1.0 + 8000.0 / 700.0f64).log10();
        let nearest = (0..80)
            .min_by(|&a, &b| {
                let c = |m: usize| 700.0 * (10f64.powf(top * (m + 1) as f64 / 81.0 / 2595.0) - 1.0);
                (c(a) - 440.0).abs().total_cmp(&(c(b) - 440.0).abs())
            })
            .unwrap();
        for t in 0..mel.frames() {
            let row = mel.row(t);
            let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest, "frame {t}");
        }
    }

    #[test]
    fn f0_of_220_hz_sinusoid() {
        let cfg = AudioConfig::default();
        let f0 = estimate_f0(&sine(220.0, 16000, 16000.0), &cfg).unwrap();
        assert_eq!(f0.len(), 100);
        let voiced: Vec<f32> = f0.iter().cloned().filter(|&f| f > 0.0).collect();
        assert!(voiced.len() > 90);
        assert!(voiced.iter().all(|f| (f - 220.0).abs() <= 5.0), "{voiced:?}");
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let cfg = AudioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..16000).map(|_| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng) as f32).collect();
        let f0 = estimate_f0(&noise, &cfg).unwrap();
        let unvoiced = f0.iter().filter(|&&f| f == 0.0).count();
        assert!(unvoiced as f64 >= 0.9 * f0.len() as f64, "{unvoiced}/{}", f0.len());
    }

    #[test]
    fn silence_is_unvoiced() {
        let cfg = AudioConfig::default();
        assert!(estimate_f0(&vec![0.0; 4000], &cfg).unwrap().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn griffin_lim_keeps_frame_count_and_pitch() {
        let cfg = AudioConfig::default();
        let mel = extract_mel(&sine(300.0, 8000, 16000.0), &cfg).unwrap();
        let wave = griffin_lim(&mel, &cfg, 20, 1).unwrap();
        assert_eq!(wave.len(), mel.frames() * cfg.hop_length);
        let again = extract_mel(&wave, &cfg).unwrap();
        assert_eq!(again.frames(), mel.frames());
        let mid = mel.frames() / 2;
        let am = |m: &MelSpec| (0..80).max_by(|&a, &b| m.row(mid)[a].total_cmp(&m.row(mid)[b])).unwrap();
        assert!((am(&mel) as i64 - am(&again) as i64).abs() <= 1);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s = sine(200.0, 1000, 16000.0);
        write_wav(&p, &s, 16000).unwrap();
        let back = read_wav(&p, &AudioConfig::default()).unwrap();
        assert_eq!(back.len(), s.len());
        assert!(back.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-3));
        let other = AudioConfig { sample_rate: 22050, ..AudioConfig::default() };
        assert!(read_wav(&p, &other).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn frame_count_is_ceil(len in 1usize..5000) {
            let cfg = AudioConfig::default();
            let wave = vec![0.01f32; len];
            prop_assert_eq!(extract_mel(&wave, &cfg).unwrap().frames(), len.div_ceil(160));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn f0_length_matches_mel(len in 1usize..6000, seed in 0u64..100) {
            let cfg = AudioConfig { frame_length: 640, hop_length: 160, mel_bins: 16, ..AudioConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wave: Vec<f32> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mel = extract_mel(&wave, &cfg).unwrap();
            prop_assert_eq!(estimate_f0(&wave, &cfg).unwrap().len(), mel.frames());
        }
    }
}
