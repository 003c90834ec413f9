use std::io::Read;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nnprim::Tensor;

/// Analysis settings for mel extraction: 22.05 kHz audio, 1024-sample frames
/// hopped by 256, 80 triangular mel bands.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_size: usize,
    pub hop_size: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> MelConfig {
        MelConfig {
            sample_rate: 22050,
            n_mels: 80,
            frame_size: 1024,
            hop_size: 256,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config { field: "n_mels", detail: "must be at least 1".into() });
        }
        if self.hop_size == 0 || self.hop_size >= self.frame_size {
            return Err(Error::Config {
                field: "hop_size",
                detail: format!("{} must be positive and smaller than frame_size {}", self.hop_size, self.frame_size),
            });
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config {
                field: "fmax",
                detail: format!("need 0 <= fmin < fmax <= Nyquist, got [{}, {}]", self.fmin, self.fmax),
            });
        }
        Ok(())
    }
}

/// Log-amplitude mel spectrogram, `T×n_mels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
}

impl MelSpectrogram {
    pub fn new(frames: Tensor) -> MelSpectrogram {
        MelSpectrogram { frames }
    }

    pub fn t_len(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    /// Round every entry to f32 precision, matching what the on-disk format
    /// preserves. Applied before writing whenever a caller needs the file to
    /// reload to exactly the in-memory matrix.
    pub fn quantized(mut self) -> MelSpectrogram {
        for v in self.frames.data_mut() {
            *v = *v as f32 as f64;
        }
        self
    }
}

const LOG_FLOOR: f64 = 1e-5;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the one-sided spectrum (`n_bins` rows of
/// weights per mel band).
fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.frame_size / 2 + 1;
    let hz_per_bin = cfg.sample_rate as f64 / cfg.frame_size as f64;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    // n_mels + 2 evenly spaced mel points define the triangle corners.
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut bank = vec![vec![0.0; n_bins]; cfg.n_mels];
    for (m, filt) in bank.iter_mut().enumerate() {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for (k, w) in filt.iter_mut().enumerate() {
            let hz = k as f64 * hz_per_bin;
            if hz > left && hz < right {
                *w = if hz <= center {
                    (hz - left) / (center - left)
                } else {
                    (right - hz) / (right - center)
                };
            }
        }
    }
    bank
}

/// Short-time magnitude spectrum → triangular mel bands → natural log with a
/// 1e-5 floor. Frame count is `1 + (len − frame_size)/hop_size` (no padding).
pub fn wav_to_mel(samples: &[f64], cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if samples.len() < cfg.frame_size {
        return Err(Error::InvalidInput(format!(
            "need at least {} samples for one frame, got {}",
            cfg.frame_size,
            samples.len()
        )));
    }
    let t_len = 1 + (samples.len() - cfg.frame_size) / cfg.hop_size;
    let n = cfg.frame_size;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut out = Vec::with_capacity(t_len * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..t_len {
        let start = t * cfg.hop_size;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
        for filt in &bank {
            let energy: f64 = filt.iter().zip(&mags).map(|(w, m)| w * m).sum();
            out.push(energy.max(LOG_FLOOR).ln());
        }
    }
    Ok(MelSpectrogram::new(Tensor::from_vec(&[t_len, cfg.n_mels], out)?))
}

const MEL_MAGIC: &[u8; 4] = b"MEL1";

/// Write the binary mel container: magic, u32 frame count, u32 band count,
/// then row-major little-endian f32 values.
pub fn save_mel(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let ctx = || format!("writing mel file {}", path.display());
    let mut bytes = Vec::with_capacity(12 + mel.frames.numel() * 4);
    bytes.extend_from_slice(MEL_MAGIC);
    bytes.extend_from_slice(&(mel.t_len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    for &v in mel.frames.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(ctx(), e))
}

pub fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    let ctx = || format!("reading mel file {}", path.display());
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| Error::io(ctx(), e))?;
    if &header[0..4] != MEL_MAGIC {
        return Err(Error::format(path.display().to_string(), 0, "bad magic, expected MEL1"));
    }
    let t_len = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let n_mels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if t_len == 0 || n_mels == 0 {
        return Err(Error::format(path.display().to_string(), 0, "zero frame or band count"));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(ctx(), e))?;
    if payload.len() != t_len * n_mels * 4 {
        return Err(Error::format(
            path.display().to_string(),
            0,
            format!("expected {} payload bytes, found {}", t_len * n_mels * 4, payload.len()),
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(MelSpectrogram::new(Tensor::from_vec(&[t_len, n_mels], data)?))
}
