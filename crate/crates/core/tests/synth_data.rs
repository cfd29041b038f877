use std::fs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timedet::dataset::{feature_path, Dataset, Split, VideoRecord};
use timedet::synth::{generate, GenConfig};
use timedet::Error;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn longer_videos_hold_more_instances() {
    let ds = generate(&GenConfig::default()).unwrap();
    let train = ds.split(Split::Train);
    assert_eq!(train.len(), 200);
    let d: Vec<f64> = train.iter().map(|v| v.meta().duration_sec).collect();
    let n: Vec<f64> = train.iter().map(|v| v.instances.len() as f64).collect();
    let r = pearson(&d, &n);
    assert!(r > 0.5, "correlation {r}");
}

#[test]
fn default_durations_span_a_wide_range() {
    let ds = generate(&GenConfig::default()).unwrap();
    let d: Vec<f64> = ds
        .split(Split::Train)
        .iter()
        .map(|v| v.meta().duration_sec)
        .collect();
    let max = d.iter().cloned().fold(f64::MIN, f64::max);
    let min = d.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max / min >= 20.0, "ratio {}", max / min);
}

/// Label of every snippet: the class whose instance contains the snippet
/// midpoint, or `num_classes` for background.
fn snippet_labels(v: &VideoRecord, num_classes: usize) -> Vec<usize> {
    let tau = v.meta().snippet_sec();
    (0..v.meta().num_features)
        .map(|t| {
            let mid = (t as f64 + 0.5) * tau;
            v.instances
                .iter()
                .find(|i| i.start <= mid && mid < i.end)
                .map_or(num_classes, |i| i.label)
        })
        .collect()
}

/// Softmax regression trained with plain minibatch SGD.
struct LinearProbe {
    w: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl LinearProbe {
    fn scores(&self, x: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let row = &self.w[k * (self.dim + 1)..(k + 1) * (self.dim + 1)];
                row[self.dim] + x.iter().zip(row).map(|(a, b)| *a as f64 * b).sum::<f64>()
            })
            .collect()
    }

    fn fit(samples: &[(&[f32], usize)], dim: usize, classes: usize, epochs: usize) -> Self {
        let mut p = LinearProbe {
            w: vec![0.0; classes * (dim + 1)],
            dim,
            classes,
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let lr = 0.05 / (1.0 + epoch as f64);
            for &i in &order {
                let (x, y) = samples[i];
                let s = p.scores(x);
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for k in 0..classes {
                    let g = e[k] / z - if k == y { 1.0 } else { 0.0 };
                    let row = &mut p.w[k * (dim + 1)..(k + 1) * (dim + 1)];
                    for (wj, xj) in row.iter_mut().zip(x) {
                        *wj -= lr * g * *xj as f64;
                    }
                    row[dim] -= lr * g;
                }
            }
        }
        p
    }

    fn predict(&self, x: &[f32]) -> usize {
        let s = self.scores(x);
        (0..self.classes)
            .max_by(|a, b| s[*a].total_cmp(&s[*b]))
            .unwrap()
    }
}

#[test]
fn snippets_are_linearly_separable() {
    let cfg = GenConfig {
        num_train: 40,
        num_val: 20,
        ..GenConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let classes = cfg.num_classes + 1;
    let collect = |split| {
        let mut out = Vec::new();
        for v in ds.split(split) {
            for (t, y) in snippet_labels(v, cfg.num_classes).into_iter().enumerate() {
                out.push((v.features.row(t), y));
            }
        }
        out
    };
    let train = collect(Split::Train);
    let val = collect(Split::Val);
    let probe = LinearProbe::fit(&train, cfg.channels, classes, 2);
    let correct = val.iter().filter(|(x, y)| probe.predict(x) == *y).count();
    let acc = correct as f64 / val.len() as f64;
    let background =
        val.iter().filter(|(_, y)| *y == cfg.num_classes).count() as f64 / val.len() as f64;
    assert!(
        acc >= 0.9,
        "snippet accuracy {acc:.4} (background share {background:.3})"
    );
}

fn small() -> Dataset {
    generate(&GenConfig {
        num_train: 3,
        num_val: 2,
        min_sec: 20.0,
        max_sec: 60.0,
        ..GenConfig::default()
    })
    .unwrap()
}

#[test]
fn save_load_round_trip_is_exact() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), true).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    // no checksums written: still loads
    let dir2 = tempfile::tempdir().unwrap();
    ds.save(dir2.path(), false).unwrap();
    assert_eq!(Dataset::load(dir2.path()).unwrap(), ds);
}

#[test]
fn corruption_is_reported() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), true).unwrap();
    let id = ds.videos[1].id().to_string();
    let path = feature_path(dir.path(), &id);
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::Shape { name, .. }) => assert!(name.contains(&id)),
        other => panic!("expected a shape error, got {other:?}"),
    }

    let mut flipped = bytes.clone();
    flipped[0] ^= 1;
    fs::write(&path, &flipped).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::Data(msg)) => assert!(msg.contains("checksum") && msg.contains(&id)),
        other => panic!("expected a checksum error, got {other:?}"),
    }

    fs::remove_file(&path).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::MissingFile(p)) => assert_eq!(p, path),
        other => panic!("expected a missing-file error, got {other:?}"),
    }

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        Dataset::load(empty.path()),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn bad_manifest_version_is_rejected() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), false).unwrap();
    let m = dir.path().join("manifest.json");
    let text = fs::read_to_string(&m)
        .unwrap()
        .replacen("\"version\": 1", "\"version\": 9", 1);
    fs::write(&m, text).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
}
