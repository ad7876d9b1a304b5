use mofme::data::{make_sample, make_split, DataConfig, Sample, WeatherKind};
use mofme::metrics::psnr;

/// Coverage, mean signed change over changed pixels, and mean absolute change.
fn features(s: &Sample) -> [f64; 3] {
    let diff: Vec<f64> = s.corrupted.data().iter().zip(s.clean.data()).map(|(c, p)| c - p).collect();
    let changed: Vec<f64> = diff.iter().copied().filter(|d| d.abs() > 1e-3).collect();
    let coverage = changed.len() as f64 / diff.len() as f64;
    let signed = if changed.is_empty() { 0.0 } else { changed.iter().sum::<f64>() / changed.len() as f64 };
    let abs = diff.iter().map(|d| d.abs()).sum::<f64>() / diff.len() as f64;
    [coverage, signed, abs]
}

#[test]
fn corruption_kinds_are_separable_by_nearest_centroid() {
    let samples: Vec<Sample> = (0..300)
        .map(|i| make_sample(1000 + i as u64, WeatherKind::ALL[i % 3], 32, 32))
        .collect();
    let feats: Vec<[f64; 3]> = samples.iter().map(features).collect();
    // standardize, then fit centroids on the first half and classify the second
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for j in 0..3 {
        mean[j] = feats.iter().map(|f| f[j]).sum::<f64>() / feats.len() as f64;
        sd[j] = (feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / feats.len() as f64).sqrt();
    }
    let z: Vec<[f64; 3]> = feats
        .iter()
        .map(|f| [0, 1, 2].map(|j| (f[j] - mean[j]) / sd[j]))
        .collect();
    let mut centroids = [[0.0; 3]; 3];
    let mut counts = [0usize; 3];
    for (f, s) in z.iter().zip(&samples).take(150) {
        let k = s.kind.index();
        counts[k] += 1;
        for j in 0..3 {
            centroids[k][j] += f[j];
        }
    }
    for k in 0..3 {
        for j in 0..3 {
            centroids[k][j] /= counts[k] as f64;
        }
    }
    let classify = |f: &[f64; 3]| {
        (0..3)
            .min_by(|&a, &b| {
                let d = |k: usize| (0..3).map(|j| (f[j] - centroids[k][j]).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap()
    };
    let correct = z
        .iter()
        .zip(&samples)
        .skip(150)
        .filter(|(f, s)| classify(f) == s.kind.index())
        .count();
    assert!(correct as f64 / 150.0 > 0.9, "accuracy {correct}/150");
}

#[test]
fn corruption_lowers_psnr_for_every_kind() {
    for kind in WeatherKind::ALL {
        for seed in 0..20 {
            let s = make_sample(seed, kind, 32, 32);
            assert!(psnr(&s.corrupted, &s.clean, 1.0).unwrap() < 40.0, "{kind} seed {seed}");
        }
    }
}

#[test]
fn splits_are_seeded_and_balanced() {
    let cfg = DataConfig::default();
    let a = make_split(&cfg).unwrap();
    let b = make_split(&cfg).unwrap();
    assert_eq!(a.train.samples, b.train.samples);
    assert_eq!(a.test.samples, b.test.samples);
    assert_eq!(a.train.counts(), [100, 100, 100]);
    assert_eq!(a.test.counts(), [30, 30, 30]);
    let other = make_split(&DataConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.train.samples[0].clean, other.train.samples[0].clean);
}
