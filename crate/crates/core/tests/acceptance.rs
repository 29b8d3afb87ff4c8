//! Acceptance criteria 1-9, run in order with one PASS/FAIL line each.

use std::collections::HashSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hsvseg::datamodel::{DatasetManifest, ModalityName};
use hsvseg::inference::{self, load_entry};
use hsvseg::metrics::{compute_metrics, confusion};
use hsvseg::models::checkpoint::resolve_reference;
use hsvseg::models::{PromptableConfig, UnetConfig};
use hsvseg::patching::{patchify, resize_patches, stitch, DEFAULT_CELL_SIZE, DEFAULT_PATCH_RES};
use hsvseg::preprocess::preprocess_frame;
use hsvseg::synth::{generate_dataset, generate_frame, DatasetSpec, SynthPreset, MANIFEST_FILE};
use hsvseg::training::{
    self, combined_loss_grad, dice_loss, samples_from_patches, PlateauScheduler, SchedulerConfig,
    TrainConfig, TrainOutput, TrainSample, BCE_DELTA, DEFAULT_DICE_EPSILON,
};
use hsvseg::{BinaryMask, Frame, Segmenter};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density: f64 = rng.random_range(0.0..1.0);
    let labels = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(density)));
    BinaryMask::new(labels).unwrap()
}

fn c1_patch_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut non_multiple = 0;
    for i in 0..500 {
        let (h, w) = if i % 50 == 0 {
            (100 * rng.random_range(1..=3), 100 * rng.random_range(1..=3))
        } else {
            (rng.random_range(1..=333), rng.random_range(1..=333))
        };
        non_multiple += usize::from(h % 100 != 0 || w % 100 != 0);
        let mask = random_mask(&mut rng, h, w);
        let frame = Frame::new(Array2::zeros((h, w))).unwrap();
        let set = ok(patchify(&frame, Some(&mask), DEFAULT_CELL_SIZE, false))?;
        let resized = ok(resize_patches(&set, DEFAULT_PATCH_RES))?;
        let cells: Vec<_> = resized
            .into_iter()
            .map(|p| (p.mask.unwrap(), p.row, p.col))
            .collect();
        let back = ok(stitch(&cells, &set.geometry))?;
        ensure!(back == mask, "mask {i} ({h}x{w}) changed in the round trip");
    }
    Ok(format!(
        "500 masks exact, {non_multiple} with a side not a multiple of 100"
    ))
}

fn c2_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let (pred, gt) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
        let set = |m: &BinaryMask| -> HashSet<(usize, usize)> {
            (0..16)
                .flat_map(|r| (0..16).map(move |c| (r, c)))
                .filter(|&(r, c)| m.get(r, c))
                .collect()
        };
        let (p, g) = (set(&pred), set(&gt));
        let all: HashSet<(usize, usize)> =
            (0..16).flat_map(|r| (0..16).map(move |c| (r, c))).collect();
        let tp = p.intersection(&g).count() as u64;
        let fp = p.difference(&g).count() as u64;
        let fn_ = g.difference(&p).count() as u64;
        let tn = all.len() as u64 - p.union(&g).count() as u64;
        let union = p.union(&g).count() as f64;
        let empty_both = p.is_empty() && g.is_empty();
        let frac = |num: f64, den: f64| {
            if den == 0.0 {
                if empty_both {
                    1.0
                } else {
                    0.0
                }
            } else {
                num / den
            }
        };
        let expected = [
            frac(tp as f64, union),
            frac(2.0 * tp as f64, (p.len() + g.len()) as f64),
            frac(tp as f64, p.len() as f64),
            frac(tp as f64, g.len() as f64),
            (tp + tn) as f64 / 256.0,
            if all.len() == g.len() {
                1.0
            } else {
                tn as f64 / (all.len() - g.len()) as f64
            },
        ];
        let c = ok(confusion(&pred, &gt))?;
        ensure!(
            (c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn),
            "pair {i}: counts differ"
        );
        let r = ok(compute_metrics(c))?;
        let got = [
            r.iou,
            r.f1,
            r.precision,
            r.recall,
            r.accuracy,
            r.specificity,
        ];
        for (k, (a, b)) in got.iter().zip(expected).enumerate() {
            ensure!(
                (a - b).abs() <= 1e-12,
                "pair {i}: score {k} is {a}, oracle {b}"
            );
        }
    }
    Ok("1000 pairs, counts equal, scores within 1e-12".into())
}

fn combined(p: &Array2<f32>, gt: &BinaryMask) -> f64 {
    let bce: f64 = p
        .iter()
        .zip(gt.labels())
        .map(|(&p, &g)| {
            let p = (p as f64).clamp(BCE_DELTA, 1.0 - BCE_DELTA);
            -(if g == 1 { p.ln() } else { (1.0 - p).ln() })
        })
        .sum::<f64>()
        / p.len() as f64;
    dice_loss(p.view(), gt, DEFAULT_DICE_EPSILON).unwrap() + bce
}

fn c3_loss_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-3f32;
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let p = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.05f32..0.95));
        let gt = random_mask(&mut rng, 8, 8);
        let (_, grad) = ok(combined_loss_grad(p.view(), &gt, DEFAULT_DICE_EPSILON))?;
        for idx in 0..64 {
            let (r, c) = (idx / 8, idx % 8);
            let (mut up, mut down) = (p.clone(), p.clone());
            up[[r, c]] += h;
            down[[r, c]] -= h;
            let step = up[[r, c]] as f64 - down[[r, c]] as f64;
            let numeric = (combined(&up, &gt) - combined(&down, &gt)) / step;
            let analytic = grad[[r, c]];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            worst = worst.max(rel);
            ensure!(
                rel <= 1e-3,
                "input {i}, element ({r},{c}): analytic {analytic}, numeric {numeric}"
            );
        }
    }
    Ok(format!("50 inputs, worst relative error {worst:.2e}"))
}

/// Patches of `frames` gas-like frames, preprocessed against their reference.
fn synthetic_samples(
    seed: u64,
    frames: usize,
    side: usize,
    cell: usize,
    res: usize,
    noise: f32,
) -> Vec<TrainSample> {
    let preset = SynthPreset::gas_like().with_noise(noise);
    let mut out = Vec::new();
    for i in 0..frames {
        let f = generate_frame(seed + i as u64, &preset, side, side).unwrap();
        let frame = preprocess_frame(&f.frame, Some(&f.reference)).unwrap();
        let set = patchify(&frame, Some(&f.mask), cell, true).unwrap();
        let patches = resize_patches(&set, res).unwrap();
        out.extend(samples_from_patches(&patches, 2, seed ^ i as u64));
    }
    out
}

fn foundation_checkpoint() -> (Segmenter, String) {
    match resolve_reference(hsvseg::models::DEFAULT_FOUNDATION_REF).ok() {
        Some(path) => (
            Segmenter::load(&path).unwrap(),
            format!("checkpoint {}", path.display()),
        ),
        None => (
            Segmenter::foundation(PromptableConfig { embed_dim: 16 }, 32, 7).unwrap(),
            "no registry checkpoint; seeded 32px stand-in".into(),
        ),
    }
}

fn c4_frozen_encoder() -> Outcome {
    let (mut seg, source) = foundation_checkpoint();
    let res = seg.patch_resolution();
    let samples = synthetic_samples(400, 10, 2 * res, res, res, 0.02);
    ensure!(samples.len() >= 20, "only {} samples", samples.len());
    let (train, val) = samples.split_at(20);
    let frozen = seg.frozen_digest();
    let trainable = ok(seg.trainable_parameters())?;
    let before: Vec<Vec<f32>> = trainable
        .iter()
        .map(|&id| seg.store().unwrap().value(id).iter().copied().collect())
        .collect();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    ok(training::train(
        &mut seg,
        train,
        &val[..val.len().min(4)],
        &config,
        &TrainOutput::default(),
    ))?;
    ensure!(
        seg.frozen_digest() == frozen,
        "frozen encoder digest changed"
    );
    let changed = trainable
        .iter()
        .zip(&before)
        .filter(|(&id, old)| {
            seg.store()
                .unwrap()
                .value(id)
                .iter()
                .zip(old.iter())
                .any(|(a, b)| a != b)
        })
        .count();
    ensure!(changed > 0, "no decoder weight moved");
    Ok(format!(
        "10 steps ({source}); encoder digest unchanged, {changed}/{} decoder tensors moved",
        trainable.len()
    ))
}

fn c5_scheduler() -> Outcome {
    let config = SchedulerConfig {
        factor: 0.5,
        patience: 3,
        min_lr: 1e-3,
    };
    let mut s = PlateauScheduler::new(0.1, config);
    for epoch in 0..config.patience {
        s.step(1.0);
        ensure!(s.lr() == 0.1, "lr changed early at epoch {epoch}");
    }
    s.step(1.0);
    ensure!(
        s.lr() == 0.1 * 0.5,
        "after patience+1 flat epochs lr is {}",
        s.lr()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = PlateauScheduler::new(0.1, config);
    for epoch in 0..100 {
        let lr = s.step(if rng.random_bool(0.2) {
            rng.random_range(0.0..1.0)
        } else {
            1.0
        });
        ensure!(lr >= config.min_lr, "lr {lr} below floor at epoch {epoch}");
    }
    Ok(format!(
        "one reduction by exactly {}; floor held over 100 epochs (final lr {:.1e})",
        config.factor,
        s.lr()
    ))
}

fn threshold_ious(root: &Path, noise: f32) -> Result<Vec<(ModalityName, f64)>, String> {
    let mut layout = DatasetSpec::new(42, 10, 256, 256);
    for preset in layout.presets.values_mut() {
        *preset = preset.with_noise(noise);
    }
    let dir = root.join(format!("noise{noise}"));
    ok(generate_dataset(&layout, &dir))?;
    let manifest = ok(DatasetManifest::load(dir.join(MANIFEST_FILE)))?;
    let oracle = ok(Segmenter::threshold(Default::default(), DEFAULT_PATCH_RES))?;
    let mut out = Vec::new();
    for entry in &manifest.entries {
        let (frame, gt) = ok(load_entry(&manifest, entry))?;
        let pred = ok(inference::segment_frame(&oracle, &frame))?;
        out.push((
            entry.modality,
            ok(hsvseg::metrics::evaluate_masks(&pred, &gt))?.iou,
        ));
    }
    Ok(out)
}

fn c6_synthetic_sanity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let clean = threshold_ious(dir.path(), 0.0)?;
    ensure!(clean.len() == 40, "expected 40 frames, got {}", clean.len());
    for (i, (m, iou)) in clean.iter().enumerate() {
        ensure!(*iou == 1.0, "noise-free {m} frame {i}: IoU {iou}");
    }
    let noisy = threshold_ious(dir.path(), 0.08)?;
    let gas: Vec<f64> = noisy
        .iter()
        .filter(|(m, _)| *m != ModalityName::Water)
        .map(|&(_, v)| v)
        .collect();
    let mean = gas.iter().sum::<f64>() / gas.len() as f64;
    ensure!(mean >= 0.90, "gas-like mean IoU at sigma 0.08 is {mean:.4}");
    Ok(format!(
        "40/40 noise-free frames at IoU 1; gas-like mean IoU {mean:.4} at sigma 0.08"
    ))
}

fn c7_unet_learns() -> Outcome {
    let res = 32;
    let mut train = synthetic_samples(700, 40, 128, 32, res, 0.02);
    ensure!(train.len() >= 200, "only {} training patches", train.len());
    train.truncate(200);
    let val = synthetic_samples(900, 6, 128, 32, res, 0.02);
    let mut seg = ok(Segmenter::unet(
        UnetConfig {
            depth: 2,
            base_width: 8,
        },
        res,
        7,
    ))?;
    let start = ok(training::validate(&seg, &val))?.iou;
    let config = TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let logs = ok(training::train(
        &mut seg,
        &train,
        &val,
        &config,
        &TrainOutput::default(),
    ))?;
    let end = logs.last().unwrap().val_iou;
    ensure!(end >= 0.7, "validation IoU {end:.4} after 5 epochs");
    ensure!(
        end > start,
        "validation IoU {end:.4} not above epoch-0 {start:.4}"
    );
    Ok(format!(
        "200 patches, {} val; IoU {start:.4} -> {end:.4}",
        val.len()
    ))
}

fn c8_report_fixture() -> Outcome {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dir = tempfile::tempdir().unwrap();
    let eval = dir.path().join(hsvseg::experiments::EVAL_DIR);
    fs::create_dir_all(&eval).unwrap();
    let csv = hsvseg::experiments::COMPARISON_FILE;
    ok(fs::copy(
        fixtures.join("published/eval").join(csv),
        eval.join(csv),
    ))?;
    let out = ok(hsvseg::experiments::report(dir.path()))?;
    let rendered = ok(fs::read(&out.table))?;
    let expected = ok(fs::read(fixtures.join(hsvseg::experiments::TABLE_FILE)))?;
    ensure!(
        rendered == expected,
        "rendered table differs from the fixture"
    );
    let text = String::from_utf8(rendered).unwrap();
    let values = text
        .split_whitespace()
        .filter(|t| t.starts_with("0."))
        .count();
    ensure!(values == 24, "table shows {values} values");
    for needle in ["0.0620   0.1165", "0.8384*  0.9120*"] {
        ensure!(text.contains(needle), "missing `{needle}`");
    }
    Ok("byte-identical, 24 values".into())
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let layout = DatasetSpec::new(42, 10, 64, 64);
    ok(generate_dataset(&layout, &dir.path().join("a")))?;
    ok(generate_dataset(&layout, &dir.path().join("b")))?;
    let (a, b) = (
        tree_bytes(&dir.path().join("a")),
        tree_bytes(&dir.path().join("b")),
    );
    ensure!(a == b, "synthetic datasets differ");

    let samples = synthetic_samples(11, 4, 64, 32, 32, 0.02);
    let (train, val) = samples.split_at(samples.len() - 4);
    let config = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut runs = Vec::new();
    for run in ["r1", "r2"] {
        let mut unet = ok(Segmenter::unet(
            UnetConfig {
                depth: 2,
                base_width: 4,
            },
            32,
            3,
        ))?;
        let mut foundation = ok(Segmenter::foundation(
            PromptableConfig { embed_dim: 8 },
            32,
            3,
        ))?;
        let mut outputs = Vec::new();
        for (name, seg) in [("unet", &mut unet), ("foundation", &mut foundation)] {
            let out_dir = dir.path().join(run).join(name);
            let logs = ok(training::train(
                seg,
                train,
                val,
                &config,
                &TrainOutput::in_dir(&out_dir),
            ))?;
            let losses: Vec<(u64, u64)> = logs
                .iter()
                .map(|l| (l.train_loss.to_bits(), l.val_loss.to_bits()))
                .collect();
            let ckpt = ok(fs::read(
                out_dir
                    .join("checkpoints/epoch_1")
                    .join(training::CHECKPOINT_FILE),
            ))?;
            outputs.push((seg.weights_digest(), losses, ckpt));
        }
        runs.push(outputs);
    }
    ensure!(runs[0] == runs[1], "training runs differ");
    Ok(format!(
        "{} dataset files identical; U-Net and promptable epoch-1 checkpoints identical",
        a.len()
    ))
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "patch round-trip",
            limit: Duration::from_secs(60),
            run: c1_patch_round_trip,
        },
        Criterion {
            id: 2,
            name: "metrics oracle",
            limit: Duration::from_secs(30),
            run: c2_metrics_oracle,
        },
        Criterion {
            id: 3,
            name: "loss gradients",
            limit: Duration::from_secs(60),
            run: c3_loss_gradients,
        },
        Criterion {
            id: 4,
            name: "frozen-encoder invariance",
            limit: Duration::MAX,
            run: c4_frozen_encoder,
        },
        Criterion {
            id: 5,
            name: "scheduler contract",
            limit: Duration::MAX,
            run: c5_scheduler,
        },
        Criterion {
            id: 6,
            name: "end-to-end synthetic sanity",
            limit: Duration::from_secs(120),
            run: c6_synthetic_sanity,
        },
        Criterion {
            id: 7,
            name: "learning smoke test",
            limit: Duration::from_secs(600),
            run: c7_unet_learns,
        },
        Criterion {
            id: 8,
            name: "report fixture",
            limit: Duration::MAX,
            run: c8_report_fixture,
        },
        Criterion {
            id: 9,
            name: "determinism",
            limit: Duration::MAX,
            run: c9_determinism,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| c.name.contains(f.as_str()) || *f == c.id.to_string())
        {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; exceeded {:?}", c.limit)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        failed += usize::from(outcome.is_err());
        println!(
            "criterion {} {tag} {:<28} {:>8.2}s  {detail}",
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
