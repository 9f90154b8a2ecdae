//! Audio preprocessing and the 39-dimensional MFCC front-end
//! (13 static cepstra, 13 deltas, 13 accelerations).
//!
//! # Feature archive layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes   "DIDFEAT\0"
//! version    u32       1
//! count      u32       number of records
//! record*    count times:
//!   id_len   u32
//!   id       id_len bytes of UTF-8
//!   frames   u32       T
//!   dim      u32       D
//!   shift    f64       frame shift in seconds
//!   values   T*D f64   row-major
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of static cepstral coefficients in the standard configuration.
pub const STATIC_DIMS: usize = 13;
/// Full feature dimension: static + delta + acceleration.
pub const FEATURE_DIMS: usize = 3 * STATIC_DIMS;

const LOG_FLOOR: f64 = 1e-12;
const ARCHIVE_MAGIC: &[u8; 8] = b"DIDFEAT\0";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Row-major `T x D` matrix of feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    frame_shift: f64,
    origin: String,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, cols: usize, frame_shift: f64, origin: impl Into<String>) -> Result<Self> {
        if cols == 0 || data.is_empty() {
            return Err(Error::EmptyInput("feature matrix"));
        }
        if !data.len().is_multiple_of(cols) {
            return Err(Error::ShapeMismatch {
                expected: format!("multiple of {cols} values"),
                found: data.len().to_string(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {} of row {}", i % cols, i / cols)));
        }
        Ok(FeatureMatrix {
            rows: data.len() / cols,
            data,
            cols,
            frame_shift,
            origin: origin.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_shift: f64, origin: impl Into<String>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.concat(), cols, frame_shift, origin)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn set_origin(&mut self, origin: impl Into<String>) {
        self.origin = origin.into();
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self) -> FrameView<'_> {
        FrameView {
            data: &self.data,
            dim: self.cols,
        }
    }

    pub fn slice(&self, range: Range<usize>) -> FrameView<'_> {
        self.view().slice(range)
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Stacks the frames of several matrices into one (for pooled training).
    pub fn concat(parts: &[&FeatureMatrix], origin: impl Into<String>) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput("matrices to concatenate"))?;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != first.cols {
                return Err(Error::DimensionMismatch {
                    expected: first.cols,
                    found: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
        }
        Self::new(data, first.cols, first.frame_shift, origin)
    }
}

/// Borrowed run of consecutive frames.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> FrameView<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("multiple of {dim} values"),
                found: data.len().to_string(),
            });
        }
        Ok(FrameView { data, dim })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &'a [f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn slice(&self, range: Range<usize>) -> FrameView<'a> {
        FrameView {
            data: &self.data[range.start * self.dim..range.end * self.dim],
            dim: self.dim,
        }
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &'a [f64]> {
        self.data.chunks_exact(self.dim)
    }
}

impl<'a> From<&'a FeatureMatrix> for FrameView<'a> {
    fn from(m: &'a FeatureMatrix) -> Self {
        m.view()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_shift: f64,
    pub num_mel_filters: usize,
    pub num_cepstra: usize,
    pub pre_emphasis: f64,
    /// Half-width of the delta regression window, in frames.
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_length: 0.025,
            frame_shift: 0.010,
            num_mel_filters: 26,
            num_cepstra: STATIC_DIMS,
            pre_emphasis: 0.97,
            delta_window: 2,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_length > 0.0 && self.frame_shift > 0.0 && self.frame_shift <= self.frame_length) {
            return Err(Error::InvalidConfig(
                "need 0 < frame_shift <= frame_length".into(),
            ));
        }
        if self.num_cepstra == 0 || self.num_cepstra > self.num_mel_filters {
            return Err(Error::InvalidConfig(
                "need 0 < num_cepstra <= num_mel_filters".into(),
            ));
        }
        if self.delta_window == 0 {
            return Err(Error::InvalidConfig("delta_window must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_samples(&self, sample_rate: u32) -> (usize, usize) {
        let len = (self.frame_length * sample_rate as f64).round() as usize;
        let shift = (self.frame_shift * sample_rate as f64).round() as usize;
        (len.max(1), shift.max(1))
    }
}

/// Number of whole frames in `len` samples.
pub fn frame_count(len: usize, frame: usize, shift: usize) -> usize {
    if len < frame {
        0
    } else {
        (len - frame) / shift + 1
    }
}

/// Settings for the whole front-end: trimming, MFCC, deltas and CMS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontEndConfig {
    pub mfcc: MfccConfig,
    pub trim_silence: bool,
    /// Frames more than this many dB below the loudest frame count as silence.
    pub energy_threshold_db: f64,
    pub min_speech_frames: usize,
    pub cepstral_mean_subtraction: bool,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        FrontEndConfig {
            mfcc: MfccConfig::default(),
            trim_silence: true,
            energy_threshold_db: -40.0,
            min_speech_frames: 3,
            cepstral_mean_subtraction: true,
        }
    }
}

/// Removes leading and trailing low-energy frames (25 ms frames, 10 ms
/// shift). The edges are the first and last runs of at least
/// `min_speech_frames` frames within `energy_threshold_db` of the peak.
pub fn trim_silence(audio: &AudioBuffer, energy_threshold_db: f64, min_speech_frames: usize) -> Result<AudioBuffer> {
    let samples = audio.samples();
    if samples.is_empty() {
        return Err(Error::EmptyInput("audio buffer"));
    }
    let (frame, shift) = MfccConfig::default().frame_samples(audio.sample_rate());
    let frame = frame.min(samples.len());
    let n = frame_count(samples.len(), frame, shift);
    let energy_db: Vec<f64> = (0..n)
        .map(|i| {
            let f = &samples[i * shift..i * shift + frame];
            let ms = f.iter().map(|s| s * s).sum::<f64>() / frame as f64;
            10.0 * ms.log10()
        })
        .collect();
    let peak = energy_db.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return Err(Error::EmptyAfterTrim);
    }
    let speech: Vec<bool> = energy_db
        .iter()
        .map(|&e| e > f64::NEG_INFINITY && e >= peak + energy_threshold_db)
        .collect();
    let run = min_speech_frames.max(1).min(n);
    let first = (0..=n - run).find(|&i| speech[i..i + run].iter().all(|&s| s));
    let last = (run - 1..n).rev().find(|&j| speech[j + 1 - run..=j].iter().all(|&s| s));
    let (Some(first), Some(last)) = (first, last) else {
        return Err(Error::EmptyAfterTrim);
    };
    let start = first * shift;
    let end = if last == n - 1 {
        samples.len()
    } else {
        last * shift + frame
    };
    AudioBuffer::new(samples[start..end].to_vec(), audio.sample_rate())
}

/// Orthonormal DCT-II basis, `num_cepstra x num_filters`, row-major.
pub fn dct_basis(num_cepstra: usize, num_filters: usize) -> Vec<f64> {
    let n = num_filters as f64;
    let mut b = Vec::with_capacity(num_cepstra * num_filters);
    for k in 0..num_cepstra {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for j in 0..num_filters {
            b.push(scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n).cos());
        }
    }
    b
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale from 0 Hz to Nyquist,
/// `num_filters x (fft_size/2 + 1)`, row-major.
pub fn mel_filterbank(num_filters: usize, fft_size: usize, sample_rate: u32) -> Vec<f64> {
    let bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (num_filters + 1) as f64))
        .collect();
    let mut fb = vec![0.0; num_filters * bins];
    for m in 0..num_filters {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[m * bins + k] = w;
        }
    }
    fb
}

/// Reusable static-MFCC analyser for one configuration and sample rate.
#[derive(Clone)]
pub struct MfccExtractor {
    cfg: MfccConfig,
    sample_rate: u32,
    frame: usize,
    shift: usize,
    fft_size: usize,
    window: Vec<f64>,
    filterbank: Vec<f64>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let (frame, shift) = cfg.frame_samples(sample_rate);
        let fft_size = frame.next_power_of_two();
        let window = (0..frame)
            .map(|n| {
                if frame == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame - 1) as f64).cos()
                }
            })
            .collect();
        Ok(MfccExtractor {
            cfg: cfg.clone(),
            sample_rate,
            frame,
            shift,
            fft_size,
            window,
            filterbank: mel_filterbank(cfg.num_mel_filters, fft_size, sample_rate),
            dct: dct_basis(cfg.num_cepstra, cfg.num_mel_filters),
            fft: FftPlanner::new().plan_fft_forward(fft_size),
        })
    }

    /// `T x num_cepstra` static cepstra with `T = floor((len - frame)/shift) + 1`.
    pub fn compute(&self, audio: &AudioBuffer, origin: &str) -> Result<FeatureMatrix> {
        if audio.sample_rate() != self.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "extractor built for {} Hz, audio is {} Hz",
                self.sample_rate,
                audio.sample_rate()
            )));
        }
        let x = audio.samples();
        let t = frame_count(x.len(), self.frame, self.shift);
        if t == 0 {
            return Err(Error::AudioTooShort {
                samples: x.len(),
                frame: self.frame,
            });
        }
        let a = self.cfg.pre_emphasis;
        let emphasized: Vec<f64> = (0..x.len())
            .map(|n| if n == 0 { x[0] } else { x[n] - a * x[n - 1] })
            .collect();
        let bins = self.fft_size / 2 + 1;
        let nf = self.cfg.num_mel_filters;
        let nc = self.cfg.num_cepstra;
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; bins];
        let mut logmel = vec![0.0; nf];
        let mut out = Vec::with_capacity(t * nc);
        for i in 0..t {
            let start = i * self.shift;
            for (n, c) in buf.iter_mut().enumerate() {
                *c = if n < self.frame {
                    Complex::new(emphasized[start + n] * self.window[n], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (j, lm) in logmel.iter_mut().enumerate() {
                let row = &self.filterbank[j * bins..(j + 1) * bins];
                let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                *lm = e.max(LOG_FLOOR).ln();
            }
            for k in 0..nc {
                let row = &self.dct[k * nf..(k + 1) * nf];
                out.push(row.iter().zip(&logmel).map(|(b, l)| b * l).sum());
            }
        }
        FeatureMatrix::new(out, nc, self.cfg.frame_shift, origin)
    }
}

pub fn compute_mfcc(audio: &AudioBuffer, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    MfccExtractor::new(cfg, audio.sample_rate())?.compute(audio, "")
}

fn regression(rows: &[&[f64]], window: usize) -> Vec<Vec<f64>> {
    let t = rows.len();
    let dim = rows[0].len();
    let norm = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    (0..t)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let mut acc = 0.0;
                    for k in 1..=window {
                        let next = rows[(i + k).min(t - 1)][d];
                        let prev = rows[i.saturating_sub(k)][d];
                        acc += k as f64 * (next - prev);
                    }
                    acc / norm
                })
                .collect()
        })
        .collect()
}

/// Appends regression deltas and accelerations to the static block. Only the
/// first 13 columns of the input are read; edges replicate the end frames.
pub fn append_deltas(statics: &FeatureMatrix, delta_window: usize) -> Result<FeatureMatrix> {
    if statics.dim() != STATIC_DIMS && statics.dim() != FEATURE_DIMS {
        return Err(Error::DimensionMismatch {
            expected: STATIC_DIMS,
            found: statics.dim(),
        });
    }
    if statics.rows() < 2 {
        return Err(Error::EmptyInput("at least 2 frames are needed for deltas"));
    }
    if delta_window == 0 {
        return Err(Error::InvalidConfig("delta_window must be positive".into()));
    }
    let base: Vec<&[f64]> = statics.iter_rows().map(|r| &r[..STATIC_DIMS]).collect();
    let delta = regression(&base, delta_window);
    let delta_refs: Vec<&[f64]> = delta.iter().map(Vec::as_slice).collect();
    let accel = regression(&delta_refs, delta_window);
    let mut out = Vec::with_capacity(statics.rows() * FEATURE_DIMS);
    for t in 0..statics.rows() {
        out.extend_from_slice(base[t]);
        out.extend_from_slice(&delta[t]);
        out.extend_from_slice(&accel[t]);
    }
    FeatureMatrix::new(out, FEATURE_DIMS, statics.frame_shift(), statics.origin())
}

/// Subtracts the per-utterance mean of each static coefficient. Delta and
/// acceleration columns are left as they are.
pub fn cepstral_mean_subtract(feat: &FeatureMatrix) -> FeatureMatrix {
    let stat = feat.dim().min(STATIC_DIMS);
    let t = feat.rows() as f64;
    let mut mean = vec![0.0; stat];
    for row in feat.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut out = feat.clone();
    for row in out.data.chunks_exact_mut(feat.dim()) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Zero-pads or truncates at the end so the result has exactly
/// `target_frames` rows.
pub fn fix_length(feat: &FeatureMatrix, target_frames: usize) -> Result<FeatureMatrix> {
    if target_frames == 0 {
        return Err(Error::InvalidConfig("target_frames must be at least 1".into()));
    }
    let d = feat.dim();
    let mut data = vec![0.0; target_frames * d];
    let keep = feat.rows().min(target_frames) * d;
    data[..keep].copy_from_slice(&feat.data[..keep]);
    FeatureMatrix::new_unchecked(data, d, feat.frame_shift, feat.origin.clone())
}

impl FeatureMatrix {
    fn new_unchecked(data: Vec<f64>, cols: usize, frame_shift: f64, origin: String) -> Result<Self> {
        Ok(FeatureMatrix {
            rows: data.len() / cols,
            data,
            cols,
            frame_shift,
            origin,
        })
    }
}

/// Rounded mean frame count plus a margin.
pub fn compute_target_frames<'a>(corpus: impl IntoIterator<Item = &'a FeatureMatrix>, margin: usize) -> Result<usize> {
    let (mut total, mut n) = (0usize, 0usize);
    for f in corpus {
        total += f.rows();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("corpus"));
    }
    Ok((total as f64 / n as f64).round() as usize + margin)
}

/// Runs the configured front-end on one utterance.
pub fn extract_features(extractor: &MfccExtractor, audio: &AudioBuffer, cfg: &FrontEndConfig, origin: &str) -> Result<FeatureMatrix> {
    let trimmed;
    let audio = if cfg.trim_silence {
        trimmed = trim_silence(audio, cfg.energy_threshold_db, cfg.min_speech_frames)?;
        &trimmed
    } else {
        audio
    };
    let statics = extractor.compute(audio, origin)?;
    let full = append_deltas(&statics, cfg.mfcc.delta_window)?;
    Ok(if cfg.cepstral_mean_subtraction {
        cepstral_mean_subtract(&full)
    } else {
        full
    })
}

pub fn write_archive(path: impl AsRef<Path>, feats: &[FeatureMatrix]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(ARCHIVE_MAGIC)?;
    write(&ARCHIVE_VERSION.to_le_bytes())?;
    write(&(feats.len() as u32).to_le_bytes())?;
    for f in feats {
        write(&(f.origin.len() as u32).to_le_bytes())?;
        write(f.origin.as_bytes())?;
        write(&(f.rows as u32).to_le_bytes())?;
        write(&(f.cols as u32).to_le_bytes())?;
        write(&f.frame_shift.to_le_bytes())?;
        for v in &f.data {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<Vec<FeatureMatrix>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        Ok(buf)
    };
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if read(8)? != ARCHIVE_MAGIC {
        return Err(bad("not a feature archive"));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_of(read(4)?);
    if version != ARCHIVE_VERSION {
        return Err(bad(&format!("unsupported archive version {version}")));
    }
    let count = u32_of(read(4)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u32_of(read(4)?) as usize;
        let id = String::from_utf8(read(id_len)?).map_err(|_| bad("utterance id is not UTF-8"))?;
        let rows = u32_of(read(4)?) as usize;
        let cols = u32_of(read(4)?) as usize;
        let shift = f64::from_le_bytes(read(8)?.try_into().expect("8 bytes"));
        let raw = read(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(FeatureMatrix::new(data, cols, shift, id)?);
    }
    Ok(out)
}
