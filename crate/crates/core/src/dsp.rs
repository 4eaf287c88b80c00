//! Filtering, resampling, baseline correction, bad-channel screening and
//! Welch spectral estimation.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{Epoch, Modality, ModalityLayout};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// IIR band-pass
// ---------------------------------------------------------------------------

/// Butterworth band-pass specification. `order` is the order of the
/// low-pass prototype; the realised band-pass has `2 * order` poles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
}

impl BandpassSpec {
    pub fn new(low_hz: f64, high_hz: f64) -> Self {
        Self {
            low_hz,
            high_hz,
            order: 4,
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < fs / 2.0) {
            return Err(Error::InvalidBand(format!(
                "need 0 < {} < {} < {} (Nyquist)",
                self.low_hz,
                self.high_hz,
                fs / 2.0
            )));
        }
        if ![2, 4, 6, 8].contains(&self.order) {
            return Err(Error::InvalidBand(format!(
                "order must be one of 2, 4, 6, 8; got {}",
                self.order
            )));
        }
        Ok(())
    }
}

/// Second-order section with `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2])
            / (self.a[0] + z_inv * self.a[1] + z2 * self.a[2])
    }

    /// Transposed direct-form II state for a unit step at steady state.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let z2 = b2 - a2 * g;
        let z1 = b1 - a1 * g + z2;
        [z1, z2]
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        let [_, a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.sqrt()
        } else {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        }
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
}

impl FilterCoefficients {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / fs);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Initial state per section for a unit step (scipy's `sosfilt_zi`).
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [z1, z2] = s.step_state();
                let out = [scale * z1, scale * z2];
                scale *= s.dc_gain();
                out
            })
            .collect()
    }

    /// Single forward pass with optional initial states.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        let mut states = vec![[0.0; 2]; self.sections.len()];
        self.filter_in_place(&mut y, &mut states);
        y
    }

    fn filter_in_place(&self, y: &mut [f64], states: &mut [[f64; 2]]) {
        for (s, z) in self.sections.iter().zip(states.iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            let [mut z1, mut z2] = *z;
            for v in y.iter_mut() {
                let x = *v;
                let out = b0 * x + z1;
                z1 = b1 * x - a1 * out + z2;
                z2 = b2 * x - a2 * out;
                *v = out;
            }
            *z = [z1, z2];
        }
    }

    /// Edge extension length: long enough for the slowest pole to decay to
    /// 1e-3, and at least `3 * (2 * sections + 1)`.
    pub fn pad_len(&self) -> usize {
        let base = 3 * (2 * self.sections.len() + 1);
        let r = self.sections.iter().map(Biquad::pole_radius).fold(0.0, f64::max);
        if r <= 0.0 || r >= 1.0 {
            return base;
        }
        let decay = (1e-3f64.ln() / r.ln()).ceil() as usize;
        base.max(decay)
    }

    /// Zero-phase forward-backward filtering with odd extension at both ends
    /// and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad_len().min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.step_states();

        let x0 = ext[0];
        let mut states: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect();
        self.filter_in_place(&mut ext, &mut states);

        ext.reverse();
        let y0 = ext[0];
        let mut states: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * y0, z[1] * y0]).collect();
        self.filter_in_place(&mut ext, &mut states);
        ext.reverse();

        ext[pad..pad + n].to_vec()
    }
}

/// Butterworth band-pass as second-order sections, designed in the analog
/// domain on pre-warped edges and mapped with the bilinear transform.
pub fn design_bandpass(spec: &BandpassSpec, fs: f64) -> Result<FilterCoefficients> {
    spec.validate(fs)?;
    let n = spec.order;
    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * spec.low_hz / fs).tan();
    let w_hi = fs2 * (PI * spec.high_hz / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    let mut sections = Vec::with_capacity(n);
    // Upper-half-plane prototype poles; each maps to two band-pass poles,
    // each of which pairs with its conjugate (produced by the mirrored
    // prototype pole) to form one section.
    for k in 0..n / 2 {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            let z = (fs2 + s) / (fs2 - s);
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * z.re, z.norm_sqr()],
            });
        }
    }
    let mut coeffs = FilterCoefficients { sections };

    // Unit gain at the digital image of the analog centre frequency.
    let f_center = fs / PI * (w0_sq.sqrt() / fs2).atan();
    let gain = coeffs.response(f_center, fs).norm();
    let per_section = gain.powf(-1.0 / coeffs.sections.len() as f64);
    for s in &mut coeffs.sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(coeffs)
}

// ---------------------------------------------------------------------------
// FIR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Odd,
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Ideal low-pass impulse response (cutoff in Hz) centred on `(taps-1)/2`,
/// without window.
fn sinc_lowpass(taps: usize, cutoff_hz: f64, fs: f64) -> Vec<f64> {
    let m = (taps - 1) as f64 / 2.0;
    let fc = cutoff_hz / fs;
    (0..taps)
        .map(|i| {
            let t = i as f64 - m;
            if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            }
        })
        .collect()
}

/// Linear-phase FIR kernel with odd length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirKernel {
    pub taps: Vec<f64>,
}

impl FirKernel {
    pub fn lowpass(taps: usize, cutoff_hz: f64, fs: f64) -> Self {
        let w = hamming(taps);
        let h = sinc_lowpass(taps, cutoff_hz, fs)
            .into_iter()
            .zip(w)
            .map(|(h, w)| h * w)
            .collect();
        Self { taps: h }
    }

    /// Band-stop at each of `freqs_hz`, each stop band `width_hz` wide:
    /// a unit impulse minus the sum of windowed-sinc band-passes.
    pub fn notch(taps: usize, fs: f64, freqs_hz: &[f64], width_hz: f64) -> Result<Self> {
        if taps % 2 == 0 || taps < 3 {
            return Err(Error::InvalidBand(format!("notch length must be odd and >= 3, got {taps}")));
        }
        if !(width_hz > 0.0) {
            return Err(Error::InvalidBand(format!("notch width must be positive, got {width_hz}")));
        }
        let w = hamming(taps);
        let mut h = vec![0.0; taps];
        h[(taps - 1) / 2] = 1.0;
        for &f in freqs_hz {
            let lo = f - width_hz / 2.0;
            let hi = f + width_hz / 2.0;
            if !(lo > 0.0 && hi < fs / 2.0) {
                return Err(Error::InvalidBand(format!(
                    "notch {f} Hz +/- {} Hz must lie inside (0, {}) Hz",
                    width_hz / 2.0,
                    fs / 2.0
                )));
            }
            let upper = sinc_lowpass(taps, hi, fs);
            let lower = sinc_lowpass(taps, lo, fs);
            for i in 0..taps {
                h[i] -= (upper[i] - lower[i]) * w[i];
            }
        }
        Ok(Self { taps: h })
    }

    pub fn half_len(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Convolution aligned to the input (group delay removed), same length
    /// as the input.
    pub fn apply(&self, x: &[f64], pad: PadMode) -> Vec<f64> {
        let n = x.len();
        let m = self.half_len();
        if n == 0 {
            return Vec::new();
        }
        let ext = match pad {
            PadMode::Zero => {
                let mut e = vec![0.0; n + 2 * m];
                e[m..m + n].copy_from_slice(x);
                e
            }
            PadMode::Odd => odd_extend(x, m),
        };
        let h = &self.taps;
        (0..n)
            .map(|i| {
                // y[i] = sum_k h[k] * x[i + m - k]; ext index = x index + m
                let window = &ext[i..i + h.len()];
                window
                    .iter()
                    .rev()
                    .zip(h)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Odd (point-symmetric) extension by `pad` samples on both sides. When the
/// signal is shorter than `pad + 1`, the extension repeats the reflection.
fn odd_extend(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut e = Vec::with_capacity(n + 2 * pad);
    let reflect = |i: usize| -> usize {
        if n == 1 {
            0
        } else {
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        }
    };
    for i in (1..=pad).rev() {
        e.push(2.0 * x[0] - x[reflect(i)]);
    }
    e.extend_from_slice(x);
    for i in 1..=pad {
        e.push(2.0 * x[n - 1] - x[n - 1 - reflect(i)]);
    }
    e
}

/// Default notch FIR length.
pub const NOTCH_TAPS: usize = 501;
/// Default total width of each notch stop band.
pub const NOTCH_WIDTH_HZ: f64 = 4.0;

/// Linear-phase FIR band-stop at every frequency in `freqs_hz`; output is
/// time-aligned with and as long as the input.
pub fn notch_fir(signal: &[f64], fs: f64, freqs_hz: &[f64], width_hz: f64) -> Result<Vec<f64>> {
    for &f in freqs_hz {
        if !(f > 0.0 && f < fs / 2.0) {
            return Err(Error::InvalidBand(format!(
                "notch {f} Hz outside (0, {}) Hz",
                fs / 2.0
            )));
        }
    }
    let kernel = FirKernel::notch(NOTCH_TAPS, fs, freqs_hz, width_hz)?;
    Ok(kernel.apply(signal, PadMode::Zero))
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

const MAX_RATIO_DENOMINATOR: u64 = 16;

/// `fs_in / fs_out` as a reduced fraction `p / q` with small `q`.
fn rational_ratio(fs_in: f64, fs_out: f64) -> Option<(usize, usize)> {
    let ratio = fs_in / fs_out;
    (1..=MAX_RATIO_DENOMINATOR).find_map(|q| {
        let p = (ratio * q as f64).round();
        if p >= 1.0 && (p / q as f64 - ratio).abs() <= 1e-9 * ratio {
            let p = p as u64;
            let g = gcd(p, q);
            Some(((p / g) as usize, (q / g) as usize))
        } else {
            None
        }
    })
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rational-rate downsampling: zero-stuff by `q`, windowed-sinc anti-alias
/// low-pass at `0.45 * fs_out`, keep every `p`-th sample.
pub fn resample_to(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_out > 0.0 && fs_in > 0.0) || fs_out > fs_in {
        return Err(Error::UnsupportedRatio { fs_in, fs_out });
    }
    if fs_in == fs_out {
        return Ok(signal.to_vec());
    }
    let (p, q) = rational_ratio(fs_in, fs_out).ok_or(Error::UnsupportedRatio { fs_in, fs_out })?;
    let n = signal.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let fs_up = fs_in * q as f64;
    let transition = 0.05 * fs_out;
    let mut taps = (4.0 * fs_up / transition).ceil() as usize;
    taps |= 1;
    let kernel = FirKernel::lowpass(taps, 0.45 * fs_out, fs_up);
    let m = kernel.half_len();

    let edge = m / q + 1;
    let ext = odd_extend(signal, edge);
    let n_out = (n - 1) * q / p + 1;
    let h = &kernel.taps;
    let out = (0..n_out)
        .map(|j| {
            // centre index in the zero-stuffed extended signal
            let centre = edge * q + j * p;
            let mut acc = 0.0;
            // u[centre + m - k] is non-zero only where divisible by q
            for (k, &hk) in h.iter().enumerate() {
                let u = centre + m - k;
                if u % q == 0 {
                    acc += hk * ext[u / q];
                }
            }
            acc * q as f64
        })
        .collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Baseline and screening
// ---------------------------------------------------------------------------

/// Subtract each channel's pre-event mean (samples in `[-t0_offset, 0)`).
pub fn baseline_correct(epoch: &Epoch) -> Epoch {
    let mut out = epoch.clone();
    baseline_correct_in_place(&mut out);
    out
}

pub fn baseline_correct_in_place(epoch: &mut Epoch) {
    let n_pre = epoch.event_index();
    if n_pre == 0 {
        return;
    }
    for ch in 0..epoch.n_channels() {
        let row = epoch.channel_mut(ch);
        let mean = row[..n_pre].iter().sum::<f64>() / n_pre as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
}

fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// MAD consistency constant for normally distributed data.
pub const MAD_SCALE: f64 = 1.4826;
pub const DEFAULT_BAD_CHANNEL_Z: f64 = 6.0;
pub const DEFAULT_FLAT_EPS: f64 = 1e-6;
/// Smallest modality group that gets the robust-z test.
pub const MIN_Z_GROUP: usize = 8;

/// Channels whose standard deviation is a robust-z outlier within its
/// modality, or below `flat_eps`. Modalities with fewer than
/// [`MIN_Z_GROUP`] channels or a zero MAD only get the flatline rule.
pub fn detect_bad_channels(
    epoch: &Epoch,
    layout: &ModalityLayout,
    z_thresh: f64,
    flat_eps: f64,
) -> Vec<usize> {
    let stds: Vec<f64> = epoch.channels().map(population_std).collect();
    let mut bad = Vec::new();
    for modality in Modality::ALL {
        let range = layout.range(modality);
        if range.is_empty() || range.end > stds.len() {
            continue;
        }
        let group = &stds[range.clone()];
        let med = median(&mut group.to_vec());
        let mut dev: Vec<f64> = group.iter().map(|s| (s - med).abs()).collect();
        let mad = median(&mut dev);
        for (offset, &s) in group.iter().enumerate() {
            let z_flag = group.len() >= MIN_Z_GROUP && mad > 0.0 && ((s - med) / (MAD_SCALE * mad)).abs() > z_thresh;
            if z_flag || s < flat_eps {
                bad.push(range.start + offset);
            }
        }
    }
    bad
}

// ---------------------------------------------------------------------------
// Modality-specific preprocessing chain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_fs: f64,
    pub eeg_band: BandpassSpec,
    pub emg_band: BandpassSpec,
    pub gsr_band: BandpassSpec,
    pub emg_notch_hz: Vec<f64>,
    pub notch_taps: usize,
    pub notch_width_hz: f64,
    pub baseline: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_fs: 500.0,
            eeg_band: BandpassSpec::new(0.5, 40.0),
            emg_band: BandpassSpec::new(20.0, 240.0),
            gsr_band: BandpassSpec::new(0.1, 35.0),
            emg_notch_hz: vec![50.0, 100.0, 150.0, 200.0],
            notch_taps: NOTCH_TAPS,
            notch_width_hz: NOTCH_WIDTH_HZ,
            baseline: true,
        }
    }
}

/// Designed filters for one sampling rate, reusable across epochs.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    eeg: FilterCoefficients,
    emg: FilterCoefficients,
    gsr: FilterCoefficients,
    notch: Option<FirKernel>,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self> {
        let fs = config.target_fs;
        let notch = if config.emg_notch_hz.is_empty() {
            None
        } else {
            Some(FirKernel::notch(
                config.notch_taps,
                fs,
                &config.emg_notch_hz,
                config.notch_width_hz,
            )?)
        };
        Ok(Self {
            eeg: design_bandpass(&config.eeg_band, fs)?,
            emg: design_bandpass(&config.emg_band, fs)?,
            gsr: design_bandpass(&config.gsr_band, fs)?,
            notch,
            config,
        })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    /// Resample to the target rate, filter each modality, then baseline-correct.
    pub fn apply(&self, epoch: &Epoch, layout: &ModalityLayout) -> Result<Epoch> {
        if epoch.n_channels() != layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "epoch has {} channels, layout {}",
                epoch.n_channels(),
                layout.total()
            )));
        }
        let fs_in = epoch.sample_rate_hz;
        let fs = self.config.target_fs;
        let mut channels = Vec::with_capacity(epoch.n_channels());
        for ch in 0..epoch.n_channels() {
            let raw = epoch.channel(ch);
            let x = if fs_in != fs {
                resample_to(raw, fs_in, fs)?
            } else {
                raw.to_vec()
            };
            let y = match layout.modality_of(ch) {
                Some(Modality::Eeg) => self.eeg.filtfilt(&x),
                Some(Modality::Emg) => {
                    let y = self.emg.filtfilt(&x);
                    match &self.notch {
                        Some(k) => k.apply(&y, PadMode::Zero),
                        None => y,
                    }
                }
                Some(Modality::Gsr) => self.gsr.filtfilt(&x),
                None => x,
            };
            channels.push(y);
        }
        let mut out = epoch.clone();
        out.set_channels(channels)?;
        out.sample_rate_hz = fs;
        if self.config.baseline {
            baseline_correct_in_place(&mut out);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Welch PSD
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    Hann,
    Hamming,
}

impl WindowKind {
    /// Periodic (DFT-even) window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        let a = match self {
            Self::Hann => 0.5,
            Self::Hamming => 0.54,
        };
        (0..n)
            .map(|i| a - (1.0 - a) * (2.0 * PI * i as f64 / n as f64).cos())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub segment_len: usize,
    pub overlap: f64,
    pub window: WindowKind,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segment_len: 256,
            overlap: 0.5,
            window: WindowKind::Hann,
        }
    }
}

impl WelchConfig {
    pub fn hop(&self) -> usize {
        let noverlap = (self.overlap * self.segment_len as f64).floor() as usize;
        (self.segment_len - noverlap).max(1)
    }

    /// Window power normalisation `U = (1/N) * sum w[n]^2`.
    pub fn normalization(&self) -> f64 {
        let w = self.window.coefficients(self.segment_len);
        w.iter().map(|v| v * v).sum::<f64>() / self.segment_len as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len < 2 {
            return Err(Error::InvalidArgument("Welch segment must be >= 2 samples".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!(
                "Welch overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdResult {
    pub freqs_hz: Vec<f64>,
    /// One-sided power density (amplitude^2 / Hz).
    pub power: Vec<f64>,
    pub n_segments: usize,
}

impl PsdResult {
    pub fn resolution_hz(&self) -> f64 {
        if self.freqs_hz.len() < 2 {
            0.0
        } else {
            self.freqs_hz[1] - self.freqs_hz[0]
        }
    }
}

/// Reusable Welch estimator (window and FFT plan computed once).
#[derive(Clone)]
pub struct WelchEstimator {
    config: WelchConfig,
    fs: f64,
    window: Vec<f64>,
    scale: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for WelchEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WelchEstimator")
            .field("config", &self.config)
            .field("fs", &self.fs)
            .finish()
    }
}

impl WelchEstimator {
    pub fn new(config: WelchConfig, fs: f64) -> Result<Self> {
        config.validate()?;
        let n = config.segment_len;
        let window = config.window.coefficients(n);
        let u = config.normalization();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            config,
            fs,
            window,
            scale: 1.0 / (n as f64 * u * fs),
            fft,
        })
    }

    pub fn config(&self) -> &WelchConfig {
        &self.config
    }

    pub fn psd(&self, signal: &[f64]) -> Result<PsdResult> {
        let n = self.config.segment_len;
        if signal.len() < n {
            return Err(Error::SegmentTooLong {
                segment: n,
                signal: signal.len(),
            });
        }
        let hop = self.config.hop();
        let k = (signal.len() - n) / hop + 1;
        let n_bins = n / 2 + 1;
        let mut power = vec![0.0; n_bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for m in 0..k {
            let seg = &signal[m * hop..m * hop + n];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p += c.norm_sqr();
            }
        }
        let norm = self.scale / k as f64;
        for (i, p) in power.iter_mut().enumerate() {
            *p *= norm;
            // fold negative frequencies; DC and (even-N) Nyquist appear once
            let is_nyquist = n % 2 == 0 && i == n / 2;
            if i != 0 && !is_nyquist {
                *p *= 2.0;
            }
        }
        let freqs_hz = (0..n_bins).map(|i| i as f64 * self.fs / n as f64).collect();
        Ok(PsdResult {
            freqs_hz,
            power,
            n_segments: k,
        })
    }
}

pub fn welch_psd(signal: &[f64], fs: f64, cfg: &WelchConfig) -> Result<PsdResult> {
    WelchEstimator::new(*cfg, fs)?.psd(signal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPower {
    /// Mean density over bins with `lo <= f < hi`; 0 when the band is empty.
    pub power: f64,
    pub n_bins: usize,
}

impl BandPower {
    pub fn is_empty(&self) -> bool {
        self.n_bins == 0
    }
}

pub fn band_power(psd: &PsdResult, lo_hz: f64, hi_hz: f64) -> BandPower {
    let (sum, n_bins) = psd
        .freqs_hz
        .iter()
        .zip(&psd.power)
        .filter(|(&f, _)| f >= lo_hz && f < hi_hz)
        .fold((0.0, 0usize), |(s, n), (_, &p)| (s + p, n + 1));
    BandPower {
        power: if n_bins == 0 { 0.0 } else { sum / n_bins as f64 },
        n_bins,
    }
}
