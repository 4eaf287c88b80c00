use std::f64::consts::PI;

use physiodecode::dataset::{BehaviorClass, Epoch, ModalityLayout};
use physiodecode::dsp::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const FS: f64 = 500.0;

fn sine(freq: f64, secs: f64, fs: f64) -> Vec<f64> {
    let n = (secs * fs).round() as usize;
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

/// Whole number of periods sampled end to end, so both endpoints are zero
/// and edge padding adds no offset.
fn sine_closed(freq: f64, secs: f64, fs: f64) -> Vec<f64> {
    let n = (secs * fs).round() as usize + 1;
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Output/input RMS ratio after dropping `skip` samples at both ends.
fn interior_ratio(input: &[f64], output: &[f64], skip: usize) -> f64 {
    let n = input.len();
    rms(&output[skip..n - skip]) / rms(&input[skip..n - skip])
}

fn eeg_filter() -> FilterCoefficients {
    design_bandpass(&BandpassSpec::new(0.5, 40.0), FS).unwrap()
}

#[test]
fn bandpass_passband_ripple() {
    let f = eeg_filter();
    for freq in [2.0, 5.0, 10.0, 15.0, 20.0, 25.0] {
        let x = sine_closed(freq, 10.0, FS);
        let r = interior_ratio(&x, &f.filtfilt(&x), FS as usize);
        assert!((0.95..=1.05).contains(&r), "{freq} Hz: ratio {r}");
    }
}

#[test]
fn bandpass_stopband() {
    let f = eeg_filter();
    for freq in [100.0, 150.0, 200.0] {
        let x = sine_closed(freq, 10.0, FS);
        let r = interior_ratio(&x, &f.filtfilt(&x), FS as usize);
        assert!(r <= 0.01, "{freq} Hz: ratio {r}");
    }
}

#[test]
fn bandpass_edges_near_minus_six_db() {
    let f = eeg_filter();
    let (lo, hi) = (10f64.powf(-7.0 / 20.0), 10f64.powf(-5.0 / 20.0));
    for (freq, secs, skip_s) in [(0.5, 120.0, 30.0), (40.0, 10.0, 1.0)] {
        let x = sine_closed(freq, secs, FS);
        let r = interior_ratio(&x, &f.filtfilt(&x), (skip_s * FS) as usize);
        assert!((lo..=hi).contains(&r), "{freq} Hz: ratio {r}");
    }
}

#[test]
fn filtfilt_is_zero_phase() {
    let f = eeg_filter();
    let n = 2001;
    let x: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 - 1000.0) / FS;
            (2.0 * PI * 10.0 * t).cos() * (-t * t / (2.0 * 0.05f64.powi(2))).exp()
        })
        .collect();
    let y = f.filtfilt(&x);
    let peak = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert_eq!(peak, 1000);
}

#[test]
fn notch_removes_line_harmonics() {
    let lines = [50.0, 100.0, 150.0, 200.0];
    for freq in lines {
        let x = sine(freq, 4.0, FS);
        let y = notch_fir(&x, FS, &lines, NOTCH_WIDTH_HZ).unwrap();
        let r = interior_ratio(&x, &y, NOTCH_TAPS);
        assert!(r <= 0.01, "{freq} Hz residual {r}");
    }
}

#[test]
fn notch_preserves_off_line_tone() {
    let x = sine(30.0, 4.0, FS);
    let y = notch_fir(&x, FS, &[50.0, 100.0, 150.0, 200.0], NOTCH_WIDTH_HZ).unwrap();
    let r = interior_ratio(&x, &y, NOTCH_TAPS);
    assert!((r - 1.0).abs() <= 0.02, "ratio {r}");
}

#[test]
fn resample_epoch_length_and_amplitude() {
    assert_eq!(resample_to(&vec![0.0; 2001], 1000.0, 500.0).unwrap().len(), 1001);
    let x = sine(10.0, 4.0, 1000.0);
    let y = resample_to(&x, 1000.0, 500.0).unwrap();
    let r = rms(&y[100..y.len() - 100]) / rms(&x[200..x.len() - 200]);
    assert!((r - 1.0).abs() <= 0.02, "ratio {r}");
}

#[test]
fn baseline_removes_offset() {
    let n = 1001;
    let ch: Vec<f64> = (0..n).map(|i| 3.0 + (i as f64 / FS * 2.0 * PI).sin()).collect();
    let e = Epoch::from_channels("s", "e", BehaviorClass::Brake, FS, &[ch]).unwrap();
    let out = baseline_correct(&e);
    let pre = e.event_index();
    let mean = out.channel(0)[..pre].iter().sum::<f64>() / pre as f64;
    assert!(mean.abs() < 1e-12, "pre-event mean {mean}");
}

#[test]
fn amplified_channel_is_flagged() {
    let layout = ModalityLayout::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut channels: Vec<Vec<f64>> = (0..layout.total())
        .map(|_| (0..1001).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    for v in &mut channels[17] {
        *v *= 50.0;
    }
    let e = Epoch::from_channels("s", "e", BehaviorClass::Turn, FS, &channels).unwrap();
    let bad = detect_bad_channels(&e, &layout, 5.0, DEFAULT_FLAT_EPS);
    assert_eq!(bad, vec![17]);
}

fn psd_of(x: &[f64]) -> PsdResult {
    welch_psd(x, FS, &WelchConfig::default()).unwrap()
}

fn integrate(psd: &PsdResult, lo: f64, hi: f64) -> f64 {
    let df = psd.resolution_hz();
    psd.freqs_hz
        .iter()
        .zip(&psd.power)
        .filter(|(f, _)| **f >= lo && **f <= hi)
        .map(|(_, p)| p * df)
        .sum()
}

/// Welch PSD by direct DFT of each windowed segment.
fn naive_welch(x: &[f64], fs: f64, n: usize, hop: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let u = w.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut acc = vec![0.0; n / 2 + 1];
    let mut k = 0;
    let mut start = 0;
    while start + n <= x.len() {
        let seg = &x[start..start + n];
        for (m, a) in acc.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in seg.iter().enumerate() {
                let ph = -2.0 * PI * (m * i) as f64 / n as f64;
                re += w[i] * v * ph.cos();
                im += w[i] * v * ph.sin();
            }
            let mut p = (re * re + im * im) / (fs * n as f64 * u);
            if m != 0 && m != n / 2 {
                p *= 2.0;
            }
            *a += p;
        }
        k += 1;
        start += hop;
    }
    acc.iter().map(|a| a / k as f64).collect()
}

#[test]
fn welch_matches_direct_dft() {
    let x = sine(10.0, 1001.0 / FS, FS);
    let psd = psd_of(&x);
    let oracle = naive_welch(&x, FS, 256, 128);
    assert_eq!(psd.power.len(), oracle.len());
    let peak = oracle.iter().cloned().fold(0.0, f64::max);
    for (a, b) in psd.power.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-9 * peak, "{a} vs {b}");
    }
}

#[test]
fn welch_peak_and_alpha_share() {
    let x = sine(10.0, 1001.0 / FS, FS);
    let psd = psd_of(&x);
    let argmax = psd
        .power
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    assert!((psd.freqs_hz[argmax] - 10.0).abs() <= FS / 256.0);
    // Hann main lobe spans +-2 bins (3.9 Hz), wider than half the band
    let share = integrate(&psd, 8.0, 13.0) / integrate(&psd, 0.0, FS / 2.0);
    assert!(share >= 0.85, "alpha share {share}");
}

#[test]
fn welch_parseval_on_white_noise() {
    let sigma = 1.7;
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut ratios: Vec<f64> = (0..100u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..1001).map(|_| normal.sample(&mut rng)).collect();
            integrate(&psd_of(&x), 0.0, FS / 2.0) / (sigma * sigma)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = (ratios[49] + ratios[50]) / 2.0;
    assert!((median - 1.0).abs() <= 0.10, "median ratio {median}");
}

#[test]
fn delta_tone_dominates_alpha_band() {
    let psd = psd_of(&sine(2.0, 1001.0 / FS, FS));
    let delta = band_power(&psd, 0.5, 4.0).power;
    let alpha = band_power(&psd, 8.0, 13.0).power;
    assert!(delta >= 10.0 * alpha, "delta {delta} alpha {alpha}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filtfilt_is_linear(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        x in prop::collection::vec(-1.0f64..1.0, 300),
        y in prop::collection::vec(-1.0f64..1.0, 300),
    ) {
        let f = eeg_filter();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = f.filtfilt(&mix);
        let (fx, fy) = (f.filtfilt(&x), f.filtfilt(&y));
        for i in 0..mix.len() {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn welch_is_nonnegative_and_scales_quadratically(
        x in prop::collection::vec(-1.0f64..1.0, 600),
        k in 0.1f64..10.0,
    ) {
        let p = psd_of(&x);
        let scaled: Vec<f64> = x.iter().map(|v| v * k).collect();
        let q = psd_of(&scaled);
        for (a, b) in p.power.iter().zip(&q.power) {
            prop_assert!(*a >= 0.0);
            prop_assert!((b - k * k * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
