//! Deterministic synthetic multi-speaker corpus.
//!
//! Speakers are parameterized tone-plus-noise sources. Frame classes are
//! (frequency, level) pairs: half the classes reuse the other half's
//! frequencies at a quieter level, so telling them apart benefits from
//! knowing the speaker's overall volume and tilt. Severity tiers are a
//! deterministic bucketing of (volume_gain, spectral_tilt).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::frontend::{mel_band_center, FrameSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad waveform file {path}: {reason}")]
    BadWaveform { path: PathBuf, reason: String },
    #[error("bad manifest: {0}")]
    BadManifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Inclusive trait range.
#[derive(Debug, Clone, Copy)]
pub struct TraitRange {
    pub lo: f64,
    pub hi: f64,
}

impl TraitRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        TraitRange { lo, hi }
    }
    fn lerp(&self, t: f64) -> f64 {
        self.lo + (self.hi - self.lo) * t
    }
    fn span(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub n_classes: usize,
    pub n_groups: usize,
    pub volume_gain: TraitRange,
    pub spectral_tilt: TraitRange,
    pub rate_factor: TraitRange,
    pub noise_floor: TraitRange,
    /// Speakers that appear only in the test split.
    pub held_out_speakers: usize,
    /// Fraction of each held-in speaker's utterances routed to test.
    pub test_utt_fraction: f64,
    pub frame_spec: FrameSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 30,
            utts_per_speaker: 40,
            n_classes: 10,
            n_groups: 4,
            volume_gain: TraitRange::new(0.35, 1.0),
            spectral_tilt: TraitRange::new(-12.0, 0.0),
            rate_factor: TraitRange::new(0.8, 1.3),
            noise_floor: TraitRange::new(0.01, 0.08),
            held_out_speakers: 6,
            test_utt_fraction: 0.25,
            frame_spec: FrameSpec::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(CorpusError::InvalidConfig("empty corpus".into()));
        }
        if self.n_classes < 2 {
            return Err(CorpusError::InvalidConfig("need at least 2 classes".into()));
        }
        if self.n_groups == 0 || self.n_groups > self.n_speakers {
            return Err(CorpusError::InvalidConfig(format!(
                "n_groups {} outside 1..=n_speakers",
                self.n_groups
            )));
        }
        if self.rate_factor.lo <= 0.0 {
            return Err(CorpusError::InvalidConfig(
                "rate_factor must be positive".into(),
            ));
        }
        if !(0.0 < self.volume_gain.lo && self.volume_gain.hi <= 1.0) {
            return Err(CorpusError::InvalidConfig(
                "volume_gain must lie in (0, 1]".into(),
            ));
        }
        if self.noise_floor.lo < 0.0 {
            return Err(CorpusError::InvalidConfig(
                "noise_floor must be nonnegative".into(),
            ));
        }
        if self.held_out_speakers >= self.n_speakers {
            return Err(CorpusError::InvalidConfig(
                "held_out_speakers must leave at least one training speaker".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_utt_fraction) {
            return Err(CorpusError::InvalidConfig(
                "test_utt_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub group_label: usize,
    pub volume_gain: f64,
    pub spectral_tilt: f64,
    pub rate_factor: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

/// Severity tier from (volume_gain, spectral_tilt): quieter and steeper-tilted
/// speakers land in higher tiers. Deterministic so group labels stay learnable
/// from the acoustics alone.
pub fn group_for_traits(cfg: &CorpusConfig, volume_gain: f64, spectral_tilt: f64) -> usize {
    let gain_sev = if cfg.volume_gain.span() > 0.0 {
        (cfg.volume_gain.hi - volume_gain) / cfg.volume_gain.span()
    } else {
        0.0
    };
    let tilt_sev = if cfg.spectral_tilt.span() > 0.0 {
        (cfg.spectral_tilt.hi - spectral_tilt) / cfg.spectral_tilt.span()
    } else {
        0.0
    };
    let severity = 0.5 * (gain_sev + tilt_sev);
    ((severity * cfg.n_groups as f64) as usize).min(cfg.n_groups - 1)
}

const SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(SEED_MIX);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(base ^ a.wrapping_mul(0x517c_c1b7_2722_0a95)) ^ b)
}

impl SpeakerProfile {
    /// Derive the profile of speaker `idx` for a given corpus seed. A seeded
    /// permutation spreads severities uniformly so the held-out tail is not
    /// biased toward one tier.
    pub fn derive(cfg: &CorpusConfig, corpus_seed: u64, idx: usize) -> SpeakerProfile {
        let s = cfg.n_speakers;
        let mut perm: Vec<usize> = (0..s).collect();
        let mut perm_rng = ChaCha8Rng::seed_from_u64(mix_seed(corpus_seed, 0xA11CE, 0));
        for i in (1..s).rev() {
            let j = perm_rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(corpus_seed, 0x5BEA_6E6, idx as u64));
        let severity = (perm[idx] as f64 + rng.gen::<f64>()) / s as f64;
        let jitter = |r: &mut ChaCha8Rng| (r.gen::<f64>() - 0.5) * 0.15;
        let gain_t = (severity + jitter(&mut rng)).clamp(0.0, 1.0);
        let tilt_t = (severity + jitter(&mut rng)).clamp(0.0, 1.0);
        let volume_gain = cfg.volume_gain.lerp(1.0 - gain_t);
        let spectral_tilt = cfg.spectral_tilt.lerp(1.0 - tilt_t);
        // noise tracks severity so severe tiers are also the hardest to classify
        let noise_t = (0.8 * severity + 0.2 * rng.gen::<f64>()).clamp(0.0, 1.0);
        let noise_floor = cfg.noise_floor.lerp(noise_t);
        let rate_factor = cfg.rate_factor.lerp(rng.gen::<f64>());
        SpeakerProfile {
            speaker_id: format!("spk{idx:03}"),
            group_label: group_for_traits(cfg, volume_gain, spectral_tilt),
            volume_gain,
            spectral_tilt,
            rate_factor,
            noise_floor,
            seed: mix_seed(corpus_seed, 0x5EED, idx as u64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker_id: String,
    pub utt_id: String,
    pub samples: Vec<f64>,
    pub frame_labels: Vec<usize>,
}

/// Frequency (Hz) carried by class `k`; classes k and k + n_freqs share it.
fn class_tone(cfg: &CorpusConfig, k: usize) -> (f64, f64) {
    let n_freqs = cfg.n_classes.div_ceil(2);
    let freq_idx = k % n_freqs;
    // spread tones over mid mel bands, away from the filterbank edges
    let c = cfg.frame_spec.n_mels;
    let band = c / 8 + freq_idx * (3 * c / 4) / n_freqs;
    let freq = mel_band_center(&cfg.frame_spec, band);
    let level = if k < n_freqs { 1.0 } else { 0.35 };
    (freq, level)
}

const MASTER_SCALE: f64 = 0.6;

/// Synthesize one utterance: a few tone segments with speaker coloration plus
/// a noise floor, all scaled by the speaker's volume gain. Bit-reproducible
/// from (profile.seed, utt_idx).
pub fn synthesize_utterance(
    cfg: &CorpusConfig,
    profile: &SpeakerProfile,
    utt_idx: usize,
) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, 0x07Fu64, utt_idx as u64));
    let rate = cfg.frame_spec.sample_rate as f64;
    let n_segments = rng.gen_range(3..=5usize);
    let ref_freq = class_tone(cfg, 0).0;

    let mut samples: Vec<f64> = Vec::new();
    let mut boundaries: Vec<(usize, usize)> = Vec::new(); // (end_sample, class)
    for _ in 0..n_segments {
        let class = rng.gen_range(0..cfg.n_classes);
        let dur_s = rng.gen_range(0.09..0.15) * profile.rate_factor;
        let n = (dur_s * rate).round() as usize;
        let (freq, level) = class_tone(cfg, class);
        // dB-per-octave tilt relative to the lowest class tone
        let tilt_db = profile.spectral_tilt * (freq / ref_freq).log2();
        let amp = level * 10f64.powf(tilt_db / 20.0);
        let phase = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
        let start = samples.len();
        for i in 0..n {
            let t = i as f64 / rate;
            let noise: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let v = amp * (2.0 * std::f64::consts::PI * freq * t + phase).sin()
                + profile.noise_floor * noise;
            samples.push((profile.volume_gain * MASTER_SCALE * v).clamp(-1.0, 1.0));
        }
        boundaries.push((start + n, class));
    }

    // one label per analysis frame, chosen at the frame center
    let spec = &cfg.frame_spec;
    let n_frames = spec.frame_count(samples.len());
    let hop = spec.hop_samples();
    let half = spec.frame_len_samples() / 2;
    let mut frame_labels = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let center = t * hop + half;
        let class = boundaries
            .iter()
            .find(|(end, _)| center < *end)
            .map(|(_, c)| *c)
            .unwrap_or(boundaries.last().unwrap().1);
        frame_labels.push(class);
    }

    Utterance {
        speaker_id: profile.speaker_id.clone(),
        utt_id: format!("{}-u{utt_idx:03}", profile.speaker_id),
        samples,
        frame_labels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
    fn parse(s: &str) -> Result<Split, CorpusError> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::BadManifest(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UttRecord {
    pub speaker_id: String,
    pub utt_id: String,
    pub split: Split,
    pub n_samples: usize,
    pub n_frames: usize,
    pub wav_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<UttRecord>,
    pub config: CorpusConfig,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn train_speakers(&self) -> Vec<&SpeakerProfile> {
        let held: Vec<&str> = self.held_out_ids();
        self.speakers
            .iter()
            .filter(|p| !held.contains(&p.speaker_id.as_str()))
            .collect()
    }

    pub fn held_out_ids(&self) -> Vec<&str> {
        let n = self.config.held_out_speakers;
        self.speakers
            .iter()
            .skip(self.speakers.len() - n)
            .map(|p| p.speaker_id.as_str())
            .collect()
    }

    pub fn profile(&self, speaker_id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|p| p.speaker_id == speaker_id)
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &UttRecord> {
        self.utterances.iter().filter(move |r| r.split == split)
    }
}

/// Generate and write the corpus: one directory per speaker with SYNW
/// waveforms and a labels file, plus a tab-separated manifest.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusManifest, CorpusError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut speakers = Vec::with_capacity(cfg.n_speakers);
    let mut utterances = Vec::new();
    let held_from = cfg.n_speakers - cfg.held_out_speakers;

    for idx in 0..cfg.n_speakers {
        let profile = SpeakerProfile::derive(cfg, seed, idx);
        let spk_dir = out_dir.join(&profile.speaker_id);
        fs::create_dir_all(&spk_dir).map_err(io_err(&spk_dir))?;

        // held-in speakers: a seeded shuffle routes a fraction of utts to test
        let mut order: Vec<usize> = (0..cfg.utts_per_speaker).collect();
        let mut split_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, 0x5917, idx as u64));
        for i in (1..order.len()).rev() {
            let j = split_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_test = ((cfg.utts_per_speaker as f64) * cfg.test_utt_fraction).ceil() as usize;
        let test_set: Vec<usize> = order[..n_test].to_vec();

        let mut label_lines = String::new();
        for utt_idx in 0..cfg.utts_per_speaker {
            let utt = synthesize_utterance(cfg, &profile, utt_idx);
            let wav_path = spk_dir.join(format!("{}.synw", utt.utt_id));
            write_synw(&wav_path, &utt.samples, cfg.frame_spec.sample_rate)?;
            label_lines.push_str(&utt.utt_id);
            for l in &utt.frame_labels {
                label_lines.push(' ');
                label_lines.push_str(&l.to_string());
            }
            label_lines.push('\n');
            let split = if idx >= held_from || test_set.contains(&utt_idx) {
                Split::Test
            } else {
                Split::Train
            };
            utterances.push(UttRecord {
                speaker_id: profile.speaker_id.clone(),
                utt_id: utt.utt_id.clone(),
                split,
                n_samples: utt.samples.len(),
                n_frames: utt.frame_labels.len(),
                wav_path,
            });
        }
        let labels_path = spk_dir.join("labels.txt");
        fs::write(&labels_path, label_lines).map_err(io_err(&labels_path))?;
        speakers.push(profile);
    }

    let manifest = CorpusManifest {
        speakers,
        utterances,
        config: cfg.clone(),
        seed,
    };
    write_manifest(&manifest, &out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

const SYNW_MAGIC: &[u8; 4] = b"SYNW";
const SYNW_VERSION: u32 = 1;

pub fn write_synw(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), CorpusError> {
    let mut buf = Vec::with_capacity(16 + samples.len() * 2);
    buf.extend_from_slice(SYNW_MAGIC);
    buf.extend_from_slice(&SYNW_VERSION.to_le_bytes());
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_synw(path: &Path) -> Result<(Vec<f64>, u32), CorpusError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(io_err(path))?;
    if &header[0..4] != SYNW_MAGIC {
        return Err(CorpusError::BadWaveform {
            path: path.into(),
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != SYNW_VERSION {
        return Err(CorpusError::BadWaveform {
            path: path.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let sample_rate = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    f.read_to_end(&mut body).map_err(io_err(path))?;
    if body.len() != len * 2 {
        return Err(CorpusError::BadWaveform {
            path: path.into(),
            reason: format!("expected {} payload bytes, got {}", len * 2, body.len()),
        });
    }
    let samples = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
        .collect();
    Ok((samples, sample_rate))
}

/// Load one utterance (waveform + labels) back from disk.
pub fn load_utterance(
    corpus_dir: &Path,
    record: &UttRecord,
) -> Result<Utterance, CorpusError> {
    let (samples, _) = read_synw(&record.wav_path)?;
    let labels_path = corpus_dir.join(&record.speaker_id).join("labels.txt");
    let text = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        if parts.next() == Some(record.utt_id.as_str()) {
            let frame_labels = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|_| {
                        CorpusError::BadManifest(format!("bad label '{p}' in {line}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(Utterance {
                speaker_id: record.speaker_id.clone(),
                utt_id: record.utt_id.clone(),
                samples,
                frame_labels,
            });
        }
    }
    Err(CorpusError::BadManifest(format!(
        "utterance {} missing from {}",
        record.utt_id,
        labels_path.display()
    )))
}

const MANIFEST_HEADER: &str = "speaker_id\tutt_id\tsplit\tgroup\tvolume_gain\tspectral_tilt\trate_factor\tnoise_floor\tspeaker_seed\tn_samples\tn_frames\twav_path";

fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    out.push_str(&format!(
        "# corpus_seed={} n_speakers={} utts_per_speaker={} n_classes={} n_groups={} held_out={} test_frac={}\n",
        manifest.seed,
        manifest.config.n_speakers,
        manifest.config.utts_per_speaker,
        manifest.config.n_classes,
        manifest.config.n_groups,
        manifest.config.held_out_speakers,
        manifest.config.test_utt_fraction,
    ));
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for r in &manifest.utterances {
        let p = manifest
            .speakers
            .iter()
            .find(|s| s.speaker_id == r.speaker_id)
            .expect("speaker for record");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.speaker_id,
            r.utt_id,
            r.split.as_str(),
            p.group_label,
            p.volume_gain,
            p.spectral_tilt,
            p.rate_factor,
            p.noise_floor,
            p.seed,
            r.n_samples,
            r.n_frames,
            r.wav_path.display(),
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Parse a manifest written by [`generate_corpus`]. The frame spec and trait
/// ranges are not round-tripped; callers supply the config they ran with.
pub fn load_manifest(path: &Path, cfg: &CorpusConfig) -> Result<CorpusManifest, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| CorpusError::BadManifest("empty manifest".into()))?;
    let seed = meta
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("corpus_seed="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CorpusError::BadManifest("missing corpus_seed".into()))?;
    let header = lines.next().unwrap_or("");
    if header != MANIFEST_HEADER {
        return Err(CorpusError::BadManifest("unexpected header row".into()));
    }
    let mut speakers: Vec<SpeakerProfile> = Vec::new();
    let mut utterances = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 12 {
            return Err(CorpusError::BadManifest(format!(
                "expected 12 fields, got {}: {line}",
                f.len()
            )));
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| CorpusError::BadManifest(format!("bad float {s}")))
        };
        let parse_u = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| CorpusError::BadManifest(format!("bad integer {s}")))
        };
        if !speakers.iter().any(|p| p.speaker_id == f[0]) {
            speakers.push(SpeakerProfile {
                speaker_id: f[0].to_string(),
                group_label: parse_u(f[3])?,
                volume_gain: parse_f(f[4])?,
                spectral_tilt: parse_f(f[5])?,
                rate_factor: parse_f(f[6])?,
                noise_floor: parse_f(f[7])?,
                seed: f[8]
                    .parse::<u64>()
                    .map_err(|_| CorpusError::BadManifest(format!("bad seed {}", f[8])))?,
            });
        }
        utterances.push(UttRecord {
            speaker_id: f[0].to_string(),
            utt_id: f[1].to_string(),
            split: Split::parse(f[2])?,
            n_samples: parse_u(f[9])?,
            n_frames: parse_u(f[10])?,
            wav_path: PathBuf::from(f[11]),
        });
    }
    Ok(CorpusManifest {
        speakers,
        utterances,
        config: cfg.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::mel_spectrogram;

    fn tiny_cfg() -> CorpusConfig {
        CorpusConfig {
            n_speakers: 4,
            utts_per_speaker: 3,
            held_out_speakers: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn counting_contract() {
        let cfg = CorpusConfig {
            n_speakers: 30,
            utts_per_speaker: 40,
            ..CorpusConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&cfg, 7, dir.path()).unwrap();
        assert_eq!(manifest.utterances.len(), 1200);
        assert_eq!(manifest.speakers.len(), 30);
        let reloaded = load_manifest(&dir.path().join("manifest.tsv"), &cfg).unwrap();
        assert_eq!(reloaded.speakers.len(), 30);
        assert_eq!(reloaded.utterances.len(), 1200);
        assert_eq!(reloaded.seed, 7);
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut entries = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    entries.push((
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        entries.sort();
        entries
    }

    #[test]
    fn same_seed_byte_identical() {
        let cfg = tiny_cfg();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_corpus(&cfg, 11, d1.path()).unwrap();
        generate_corpus(&cfg, 11, d2.path()).unwrap();
        // manifests embed absolute paths; compare everything else byte-for-byte
        let a: Vec<_> = dir_digest(d1.path())
            .into_iter()
            .filter(|(n, _)| n != "manifest.tsv")
            .collect();
        let b: Vec<_> = dir_digest(d2.path())
            .into_iter()
            .filter(|(n, _)| n != "manifest.tsv")
            .collect();
        assert_eq!(a, b);
    }

    /// Oracle: recompute mean log amplitude straight from the samples.
    #[test]
    fn halved_gain_drops_mean_log_amplitude_by_ln2() {
        let cfg = tiny_cfg();
        let base = SpeakerProfile::derive(&cfg, 3, 1);
        let mut halved = base.clone();
        halved.volume_gain = base.volume_gain / 2.0;
        let mean_log = |p: &SpeakerProfile| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for u in 0..cfg.utts_per_speaker {
                for s in synthesize_utterance(&cfg, p, u).samples {
                    if s != 0.0 {
                        acc += s.abs().ln();
                        n += 1;
                    }
                }
            }
            acc / n as f64
        };
        let drop = mean_log(&base) - mean_log(&halved);
        assert!(
            (drop - std::f64::consts::LN_2).abs() < 1e-6,
            "drop = {drop}"
        );
    }

    #[test]
    fn labels_align_with_frontend_frames() {
        let cfg = tiny_cfg();
        for idx in 0..cfg.n_speakers {
            let p = SpeakerProfile::derive(&cfg, 5, idx);
            for u in 0..cfg.utts_per_speaker {
                let utt = synthesize_utterance(&cfg, &p, u);
                let mel = mel_spectrogram(&utt.samples, &cfg.frame_spec).unwrap();
                assert_eq!(utt.frame_labels.len(), mel.n_frames());
            }
        }
    }

    #[test]
    fn split_contract() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&cfg, 9, dir.path()).unwrap();
        let held = manifest.held_out_ids();
        assert_eq!(held.len(), 1);
        for r in &manifest.utterances {
            if held.contains(&r.speaker_id.as_str()) {
                assert_eq!(r.split, Split::Test);
            }
        }
        // held-in speakers have both splits and no utterance is in both
        for p in manifest.train_speakers() {
            let train: Vec<_> = manifest
                .records(Split::Train)
                .filter(|r| r.speaker_id == p.speaker_id)
                .map(|r| r.utt_id.clone())
                .collect();
            let test: Vec<_> = manifest
                .records(Split::Test)
                .filter(|r| r.speaker_id == p.speaker_id)
                .map(|r| r.utt_id.clone())
                .collect();
            assert!(!train.is_empty() && !test.is_empty());
            assert!(train.iter().all(|u| !test.contains(u)));
        }
    }

    #[test]
    fn invalid_rate_factor_rejected() {
        let cfg = CorpusConfig {
            rate_factor: TraitRange::new(-0.5, 1.0),
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_corpus(&cfg, 1, dir.path()),
            Err(CorpusError::InvalidConfig(_))
        ));
    }

    #[test]
    fn group_buckets_cover_all_tiers() {
        let cfg = CorpusConfig::default();
        let mut seen = vec![0usize; cfg.n_groups];
        for idx in 0..cfg.n_speakers {
            let p = SpeakerProfile::derive(&cfg, 7, idx);
            seen[p.group_label] += 1;
            assert_eq!(
                p.group_label,
                group_for_traits(&cfg, p.volume_gain, p.spectral_tilt)
            );
        }
        assert!(seen.iter().all(|&c| c > 0), "groups populated: {seen:?}");
    }

    #[test]
    fn synw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.synw");
        let samples: Vec<f64> = (0..500).map(|i| ((i as f64) * 0.01).sin() * 0.8).collect();
        write_synw(&path, &samples, 16_000).unwrap();
        let (back, rate) = read_synw(&path).unwrap();
        assert_eq!(rate, 16_000);
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }
}
