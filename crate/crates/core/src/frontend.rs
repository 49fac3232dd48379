//! Mel-filterbank frontend: framing, log-amplitude mel spectra and
//! first-order delta features.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("utterance too short: {samples} samples, one frame needs {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("invalid frame spec: {0}")]
    InvalidSpec(String),
}

/// Analysis framing parameters shared by every stage of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_hop_ms: f64,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_hop_ms: 10.0,
            n_mels: 40,
            log_floor: -20.0,
        }
    }
}

impl FrameSpec {
    pub fn frame_len_samples(&self) -> usize {
        (self.frame_length_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.frame_hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of whole analysis frames for a signal of `n_samples`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        let flen = self.frame_len_samples();
        if n_samples < flen {
            0
        } else {
            1 + (n_samples - flen) / self.hop_samples()
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        if self.sample_rate == 0 {
            return Err(FrontendError::InvalidSpec("sample_rate = 0".into()));
        }
        if self.frame_length_ms <= 0.0 || self.frame_hop_ms <= 0.0 {
            return Err(FrontendError::InvalidSpec(
                "frame length and hop must be positive".into(),
            ));
        }
        if self.n_mels == 0 {
            return Err(FrontendError::InvalidSpec("n_mels = 0".into()));
        }
        Ok(())
    }
}

/// C x T matrix of log mel-filterbank amplitudes.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub frame_spec: FrameSpec,
}

impl MelSpectrogram {
    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins, rows = channels.
pub fn mel_filterbank(spec: &FrameSpec, n_fft: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let f_min = 20.0;
    let f_max = spec.sample_rate as f64 / 2.0;
    let mel_lo = hz_to_mel(f_min);
    let mel_hi = hz_to_mel(f_max);
    let n = spec.n_mels;
    // n + 2 edge points, filter c spans [edge[c], edge[c+2]] peaking at edge[c+1]
    let edges: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n, n_bins));
    let bin_hz = spec.sample_rate as f64 / n_fft as f64;
    for c in 0..n {
        let (lo, mid, hi) = (edges[c], edges[c + 1], edges[c + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f >= lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[c, b]] = w;
        }
    }
    fb
}

/// Center frequency (Hz) of mel channel `c`; used by the synthesizer to place
/// tones on specific bands.
pub fn mel_band_center(spec: &FrameSpec, c: usize) -> f64 {
    let f_min = 20.0;
    let f_max = spec.sample_rate as f64 / 2.0;
    let mel_lo = hz_to_mel(f_min);
    let mel_hi = hz_to_mel(f_max);
    mel_to_hz(mel_lo + (mel_hi - mel_lo) * (c + 1) as f64 / (spec.n_mels + 1) as f64)
}

fn fft_size_for(frame_len: usize) -> usize {
    let mut n = 1;
    while n < frame_len {
        n <<= 1;
    }
    n
}

/// Log mel-filterbank amplitude spectrogram, C x T.
///
/// Frames are Hann-windowed; amplitudes are floored at `log_floor` so silence
/// maps to a well-defined constant.
pub fn mel_spectrogram(samples: &[f64], spec: &FrameSpec) -> Result<MelSpectrogram, FrontendError> {
    spec.validate()?;
    let flen = spec.frame_len_samples();
    if samples.len() < flen {
        return Err(FrontendError::TooShort {
            samples: samples.len(),
            needed: flen,
        });
    }
    let hop = spec.hop_samples();
    let n_frames = spec.frame_count(samples.len());
    let n_fft = fft_size_for(flen);
    let n_bins = n_fft / 2 + 1;
    let fb = mel_filterbank(spec, n_fft);

    let hann: Vec<f64> = (0..flen)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / flen as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut out = Array2::zeros((spec.n_mels, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < flen { samples[start + i] * hann[i] } else { 0.0 };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        // magnitude spectrum -> mel amplitudes -> log with floor
        for c in 0..spec.n_mels {
            let mut amp = 0.0;
            for b in 0..n_bins {
                let w = fb[[c, b]];
                if w > 0.0 {
                    amp += w * buf[b].norm();
                }
            }
            out[[c, t]] = if amp > 0.0 {
                amp.ln().max(spec.log_floor)
            } else {
                spec.log_floor
            };
        }
    }
    Ok(MelSpectrogram {
        values: out,
        frame_spec: spec.clone(),
    })
}

/// Per-frame acoustic-model inputs: FBK concatenated with first-order deltas
/// (regression over +-2 frames, edges clamped), T x 2C.
pub fn am_input_features(samples: &[f64], spec: &FrameSpec) -> Result<Array2<f64>, FrontendError> {
    let mel = mel_spectrogram(samples, spec)?;
    Ok(am_input_from_mel(&mel))
}

/// Same as [`am_input_features`] but starting from an existing spectrogram.
pub fn am_input_from_mel(mel: &MelSpectrogram) -> Array2<f64> {
    let c = mel.n_channels();
    let t_n = mel.n_frames();
    let v = &mel.values;
    let mut out = Array2::zeros((t_n, 2 * c));
    // standard regression weights: sum_n n*(x[t+n]-x[t-n]) / (2*sum n^2), n in 1..=2
    let denom = 2.0 * (1.0 + 4.0);
    let clamp = |i: i64| -> usize { i.clamp(0, t_n as i64 - 1) as usize };
    for t in 0..t_n {
        for ch in 0..c {
            out[[t, ch]] = v[[ch, t]];
            let mut acc = 0.0;
            for n in 1..=2i64 {
                acc += n as f64
                    * (v[[ch, clamp(t as i64 + n)]] - v[[ch, clamp(t as i64 - n)]]);
            }
            out[[t, c + ch]] = acc / denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, secs: f64, rate: u32) -> Vec<f64> {
        let n = (secs * rate as f64) as usize;
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        let spec = FrameSpec::default();
        // 1 + floor((T - 400)/160)
        assert_eq!(spec.frame_count(400), 1);
        assert_eq!(spec.frame_count(399), 0);
        assert_eq!(spec.frame_count(560), 2);
        assert_eq!(spec.frame_count(16_000), 98);
    }

    #[test]
    fn default_has_forty_channels() {
        let spec = FrameSpec::default();
        let mel = mel_spectrogram(&sine(440.0, 0.1, 16_000), &spec).unwrap();
        assert_eq!(mel.n_channels(), 40);
        assert_eq!(mel.n_frames(), spec.frame_count(1600));
    }

    #[test]
    fn all_zero_samples_hit_log_floor() {
        let spec = FrameSpec::default();
        let mel = mel_spectrogram(&vec![0.0; 800], &spec).unwrap();
        for v in mel.values.iter() {
            assert_eq!(*v, spec.log_floor);
        }
    }

    #[test]
    fn too_short_is_an_error() {
        let spec = FrameSpec::default();
        match mel_spectrogram(&[0.0; 100], &spec) {
            Err(FrontendError::TooShort { samples: 100, needed: 400 }) => {}
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    /// Oracle: evaluate the filterbank directly on the sinusoid's spectral
    /// line to find which band should dominate.
    #[test]
    fn sinusoid_at_band_center_dominates_that_band() {
        let spec = FrameSpec::default();
        for band in [5usize, 15, 25] {
            let freq = mel_band_center(&spec, band);
            let mel = mel_spectrogram(&sine(freq, 0.2, 16_000), &spec).unwrap();
            let n_fft = fft_size_for(spec.frame_len_samples());
            let fb = mel_filterbank(&spec, n_fft);
            // direct filterbank evaluation at the tone frequency
            let bin = freq * n_fft as f64 / spec.sample_rate as f64;
            let (b0, frac) = (bin.floor() as usize, bin.fract());
            let expected = (0..spec.n_mels)
                .max_by(|&a, &b| {
                    let ra = fb[[a, b0]] * (1.0 - frac) + fb[[a, b0 + 1]] * frac;
                    let rb = fb[[b, b0]] * (1.0 - frac) + fb[[b, b0 + 1]] * frac;
                    ra.partial_cmp(&rb).unwrap()
                })
                .unwrap();
            assert_eq!(expected, band, "oracle places the tone on the seeded band");
            for t in 0..mel.n_frames() {
                let col = mel.values.column(t);
                let argmax = (0..spec.n_mels)
                    .max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap())
                    .unwrap();
                assert_eq!(argmax, band, "frame {t}");
            }
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let spec = FrameSpec::default();
        let s = sine(700.0, 0.3, 16_000);
        let a = mel_spectrogram(&s, &spec).unwrap();
        let b = mel_spectrogram(&s, &spec).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn energy_monotone_under_gain() {
        let spec = FrameSpec::default();
        let s = sine(500.0, 0.1, 16_000);
        let scaled: Vec<f64> = s.iter().map(|x| x * 3.0).collect();
        let a = mel_spectrogram(&s, &spec).unwrap();
        let b = mel_spectrogram(&scaled, &spec).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn am_features_are_2c_dim() {
        let spec = FrameSpec::default();
        let feats = am_input_features(&sine(440.0, 0.1, 16_000), &spec).unwrap();
        assert_eq!(feats.ncols(), 80);
    }

    #[test]
    fn constant_spectrogram_has_zero_deltas() {
        let spec = FrameSpec::default();
        let mel = MelSpectrogram {
            values: Array2::from_elem((40, 12), 1.25),
            frame_spec: spec,
        };
        let feats = am_input_from_mel(&mel);
        for t in 0..12 {
            for ch in 40..80 {
                assert_eq!(feats[[t, ch]], 0.0);
            }
        }
    }

    /// Oracle: closed-form regression on a hand-built ramp. With x_t = a*t the
    /// interior delta is (1*(2a) + 2*(4a)) / 10 = a.
    #[test]
    fn linear_ramp_delta_equals_slope() {
        let spec = FrameSpec::default();
        let slope = 0.37;
        let mut values = Array2::from_elem((40, 20), -3.0);
        for t in 0..20 {
            values[[7, t]] = slope * t as f64;
        }
        let mel = MelSpectrogram { values, frame_spec: spec };
        let feats = am_input_from_mel(&mel);
        for t in 2..18 {
            assert!((feats[[t, 47]] - slope).abs() < 1e-9, "frame {t}");
        }
    }
}
