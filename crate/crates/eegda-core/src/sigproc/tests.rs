use super::*;
use crate::rngutil;
use rand::Rng;

/// Independent O(N^2) evaluation of the periodogram definition; the oracle
/// the FFT-backed path must reproduce.
fn psd_direct(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|f| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (k, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (f * k) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im) / n as f64
        })
        .collect()
}

fn tone(freq: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / fs).cos())
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn record_of(channel: Vec<f64>, channels: usize) -> Mat {
    let rows: Vec<Vec<f64>> = (0..channels).map(|_| channel.clone()).collect();
    Mat::from_rows(&rows).unwrap()
}

#[test]
fn segment_counts_match_window_arithmetic() {
    let fs = 128.0;
    let record = record_of(vec![0.5; (60.0 * fs) as usize], 3);
    let segs = segment(&record, fs, 2.0, 1.0).unwrap();
    assert_eq!(segs.len(), 59);
    assert_eq!(segs[0].len(), 256);
    assert_eq!(segs[0].channel_count(), 3);

    let exact = record_of(vec![0.5; (2.0 * fs) as usize], 1);
    assert_eq!(segment(&exact, fs, 2.0, 1.0).unwrap().len(), 1);

    let partial = record_of(vec![0.5; (2.5 * fs) as usize], 1);
    assert_eq!(segment(&partial, fs, 2.0, 1.0).unwrap().len(), 1);
}

#[test]
fn segment_rejects_short_record() {
    let record = record_of(vec![0.0; 100], 2);
    let err = segment(&record, 128.0, 2.0, 1.0).unwrap_err();
    assert!(err.to_string().contains("record too short"), "{err}");
}

#[test]
fn psd_zero_input_is_zero() {
    let spec = psd(&vec![0.0; 256]).unwrap();
    assert!(spec.iter().all(|&v| v == 0.0));
}

#[test]
fn psd_unit_cosine_at_bin_k() {
    let n = 256;
    let fs = 256.0;
    let k = 10;
    let spec = psd(&tone(k as f64 * fs / n as f64, fs, n, 1.0)).unwrap();
    assert!((spec[k] - 64.0).abs() < 1e-9, "bin {k}: {}", spec[k]);
    for (i, &v) in spec.iter().enumerate() {
        if i != k && i != n - k {
            assert!(v < 1e-18, "leak at bin {i}: {v}");
        }
    }
}

#[test]
fn psd_matches_direct_dft_oracle() {
    let mut rng = rngutil::stream(11, "psd-oracle");
    for &n in &[64usize, 128, 256, 512] {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = psd(&x).unwrap();
        let slow = psd_direct(&x);
        let scale = slow.iter().cloned().fold(0.0f64, f64::max);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9 * scale.max(1.0), "n={n}: {a} vs {b}");
        }
        // Parseval: sum of PSD over all bins equals signal energy.
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let total: f64 = fast.iter().sum();
        assert!((total - energy).abs() <= 1e-9 * energy.max(1.0));
        assert!(fast.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn psd_rejects_non_finite() {
    assert!(matches!(
        psd(&[1.0, f64::NAN, 0.0]),
        Err(CoreError::NonFinite(_))
    ));
}

#[test]
fn band_power_zero_spectrum() {
    let band = BandSpec::canonical(BandName::Alpha);
    assert_eq!(band_power(&vec![0.0; 128], &band, 128.0), 0.0);
}

#[test]
fn band_power_picks_up_the_tone_bin() {
    let n = 256;
    let fs = 128.0; // df = 0.5 Hz, 10 Hz tone sits at bin 20
    let x = tone(10.0, fs, n, 1.0);
    let spec = psd(&x).unwrap();
    let alpha = band_power(&spec, &BandSpec::canonical(BandName::Alpha), fs);
    assert!((alpha - spec[20]).abs() < 1e-12);
    let delta = band_power(&spec, &BandSpec::canonical(BandName::Delta), fs);
    assert!(delta < 1e-12 * alpha.max(1.0), "delta {delta} alpha {alpha}");
}

#[test]
fn band_power_is_additive_over_a_bin_partition() {
    let n = 128;
    let fs = 128.0; // df = 1 Hz
    let mut rng = rngutil::stream(12, "band-additive");
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = psd(&x).unwrap();
    // Bands sliced between bins so each bin 0..=64 lands in exactly one band.
    let cuts = [0usize, 5, 19, 33, 50, 64];
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo_bin, hi_bin) = (w[0], w[1]);
        let f_low = if lo_bin == 0 { -0.25 } else { lo_bin as f64 - 0.25 };
        let band = BandSpec {
            name: BandName::Alpha,
            f_low,
            f_high: hi_bin as f64 - 0.25,
        };
        total += band_power(&spec, &band, fs);
    }
    // Tail band covering the last addressable bin.
    let band = BandSpec {
        name: BandName::Gamma,
        f_low: 63.75,
        f_high: 64.0,
    };
    total += band_power(&spec, &band, fs);
    let one_sided: f64 = spec[..=64].iter().sum();
    assert!((total - one_sided).abs() < 1e-12 * one_sided);
}

#[test]
fn features_have_channel_major_layout_and_width() {
    let fs = 128.0;
    let n = 256;
    let bands = default_bands();

    let mut rng = rngutil::stream(13, "features");
    let rows: Vec<Vec<f64>> = (0..32)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let seg = SignalSegment::new(Mat::from_rows(&rows).unwrap(), fs).unwrap();
    assert_eq!(features(&seg, &bands).unwrap().values.len(), 160);
    let gamma_only = [BandSpec::canonical(BandName::Gamma)];
    assert_eq!(features(&seg, &gamma_only).unwrap().values.len(), 32);

    // Channel 0 = 10 Hz tone, channel 1 = silence.
    let two = Mat::from_rows(&[tone(10.0, fs, n, 1.0), vec![0.0; n]]).unwrap();
    let seg = SignalSegment::new(two, fs).unwrap();
    let fv = features(&seg, &bands).unwrap();
    assert!(fv.values[2] > 1.0, "alpha slot of channel 0: {}", fv.values[2]);
    assert!(fv.values[5..10].iter().all(|&v| v == 0.0));
}

#[test]
fn features_are_permutation_consistent() {
    let fs = 128.0;
    let n = 256;
    let bands = default_bands();
    let mut rng = rngutil::stream(14, "perm");
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let seg = SignalSegment::new(Mat::from_rows(&rows).unwrap(), fs).unwrap();
    let base = features(&seg, &bands).unwrap().values;

    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let seg_p = SignalSegment::new(Mat::from_rows(&permuted).unwrap(), fs).unwrap();
    let moved = features(&seg_p, &bands).unwrap().values;
    for (new_ch, &old_ch) in perm.iter().enumerate() {
        assert_eq!(
            &moved[new_ch * 5..new_ch * 5 + 5],
            &base[old_ch * 5..old_ch * 5 + 5]
        );
    }
}

#[test]
fn normalizer_endpoints_constants_and_clamping() {
    let m = Mat::from_rows(&[vec![0.0, 7.0], vec![10.0, 7.0]]).unwrap();
    let t = fit_normalizer(&m).unwrap();
    let out = apply_normalizer(&t, &m);
    assert_eq!(out.row(0), &[-1.0, 0.0]);
    assert_eq!(out.row(1), &[1.0, 0.0]);
    // Out-of-range value clamps.
    assert_eq!(t.apply_vec(&[15.0, 7.0]), vec![1.0, 0.0]);
    assert_eq!(t.apply_vec(&[-3.0, 7.0]), vec![-1.0, 0.0]);
}

#[test]
fn normalizer_round_trip_recovers_in_range_values() {
    let mut rng = rngutil::stream(15, "norm-rt");
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..6).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let m = Mat::from_rows(&rows).unwrap();
    let t = fit_normalizer(&m).unwrap();
    for r in 0..m.rows() {
        let y = t.apply_vec(m.row(r));
        assert!(y.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let back = t.denormalize(&y);
        for (a, b) in back.iter().zip(m.row(r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn noise_augmentation_identity_scale_and_determinism() {
    let fs = 128.0;
    let n = 1024;
    let seg = SignalSegment::new(
        Mat::from_rows(&[tone(10.0, fs, n, 1.0), tone(20.0, fs, n, 2.0)]).unwrap(),
        fs,
    )
    .unwrap();

    assert_eq!(augment_noise(&seg, 0.0, 1).samples(), seg.samples());

    let noisy = augment_noise(&seg, 0.1, 7);
    for ch in 0..2 {
        let diff: Vec<f64> = noisy
            .samples()
            .row(ch)
            .iter()
            .zip(seg.samples().row(ch))
            .map(|(a, b)| a - b)
            .collect();
        let mean = diff.iter().sum::<f64>() / n as f64;
        let std = (diff.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
        // Channel std of a unit cosine is 1/sqrt(2); of amplitude 2, sqrt(2).
        let expect = 0.1 * seg_channel_std(&seg, ch);
        assert!(
            (std / expect - 1.0).abs() < 0.2,
            "ch{ch}: injected std {std}, expected ~{expect}"
        );
    }

    let again = augment_noise(&seg, 0.1, 7);
    assert_eq!(noisy.samples(), again.samples());
    let other = augment_noise(&seg, 0.1, 8);
    assert_ne!(noisy.samples(), other.samples());
}

fn seg_channel_std(seg: &SignalSegment, ch: usize) -> f64 {
    let row = seg.samples().row(ch);
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[test]
fn resample_identity_constant_and_round_trip_fidelity() {
    let fs = 128.0;
    let n = 256;
    let seg = SignalSegment::new(
        Mat::from_rows(&[tone(10.0, fs, n, 1.0)]).unwrap(),
        fs,
    )
    .unwrap();

    let same = augment_resample(&seg, 1.0).unwrap();
    for (a, b) in same.samples().data().iter().zip(seg.samples().data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let flat = SignalSegment::new(Mat::from_rows(&[vec![3.5; n]]).unwrap(), fs).unwrap();
    let flat_rs = augment_resample(&flat, 0.7).unwrap();
    for v in flat_rs.samples().data() {
        assert!((v - 3.5).abs() < 1e-12);
    }

    let warped = augment_resample(&seg, 0.9).unwrap();
    let a = seg.samples().row(0);
    let b = warped.samples().row(0);
    let corr = correlation(a, b);
    assert!(corr >= 0.95, "correlation {corr}");

    assert!(augment_resample(&seg, 0.4).is_err());
    assert!(augment_resample(&seg, 2.5).is_err());
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va.sqrt() * vb.sqrt())
}

#[test]
fn bandpass_rejects_and_passes_as_specified() {
    let fs = 256.0;
    let n = 2048;

    // 60 Hz sits above the 50 Hz edge: strongly attenuated.
    let hot = record_of(tone(60.0, fs, n, 1.0), 1);
    let out = bandpass(&hot, fs, 0.3, 50.0).unwrap();
    let ratio = rms(out.row(0)) / rms(hot.row(0));
    assert!(ratio < 0.1, "60 Hz leak: {ratio}");

    // 10 Hz is mid-band: essentially untouched.
    let mid = record_of(tone(10.0, fs, n, 1.0), 1);
    let out = bandpass(&mid, fs, 0.3, 50.0).unwrap();
    let ratio = rms(out.row(0)) / rms(mid.row(0));
    assert!((ratio - 1.0).abs() < 0.05, "10 Hz ratio: {ratio}");

    // Zero in, zero out.
    let zero = record_of(vec![0.0; n], 2);
    let out = bandpass(&zero, fs, 0.3, 50.0).unwrap();
    assert!(out.data().iter().all(|&v| v.abs() < 1e-12));

    // Stopband attenuation >= 20 dB at f_low/2 and 2*f_high.
    let lo = record_of(tone(0.15, fs, 30 * 256, 1.0), 1);
    let out = bandpass(&lo, fs, 0.3, 50.0).unwrap();
    assert!(rms(out.row(0)) / rms(lo.row(0)) < 0.1);
    let hi = record_of(tone(100.0, fs, n, 1.0), 1);
    let out = bandpass(&hi, fs, 0.3, 50.0).unwrap();
    assert!(rms(out.row(0)) / rms(hi.row(0)) < 0.1);

    // Band edge at or above Nyquist is rejected.
    assert!(bandpass(&mid, fs, 0.3, 128.0).is_err());
    assert!(bandpass(&mid, fs, 0.3, 130.0).is_err());
}
