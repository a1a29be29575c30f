//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed. Built with `harness = false` so the
//! report is visible under a plain `cargo test`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use prose::data::{self, generate_toy, DataError, FactorDataset, FactorSpec};
use prose::disentangle::{
    self, encode_checkpoint, metrics_csv, Backbone, ProseConfig, ProseModel, StepPlan, TrainOutcome,
    Trainer,
};
use prose::eval::{self, average_precision, dominant_channel, slerp_block, EvalOptions, EvalReport};
use prose::linalg::{orthonormality_error, qr_orthonormalize};
use prose::manifold::{cayley_step, cayley_vjp, orth_penalty, orth_penalty_grad, CayleyConfig};
use prose::nn::{Activation, Mlp};
use prose::{LatentBlocks, Matrix};

type Outcome = Result<String, String>;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cayley_trials(orthonormal: bool) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(if orthonormal { 1 } else { 2 });
    let cfg = CayleyConfig::with_tau(0.1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let g = gaussian(64, 8, &mut rng);
        let z = if orthonormal { qr_orthonormalize(&g).unwrap() } else { g };
        let j = gaussian(64, 8, &mut rng);
        let zb = LatentBlocks::new(z.clone()).unwrap();
        let next = cayley_step(&zb, &j, &cfg).map_err(|e| e.to_string())?;
        let err = if orthonormal {
            orthonormality_error(next.matrix())
        } else {
            next.gram().sub(&zb.gram()).unwrap().frobenius_norm()
        };
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    let within_time = !orthonormal || secs < 10.0;
    check(
        worst <= 1e-10 && within_time,
        format!("max error {worst:.2e} over 1000 trials in {secs:.2}s"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let d = rng.random_range(k..=16);
        let z = gaussian(d, k, &mut rng);
        let analytic = orth_penalty_grad(&LatentBlocks::new(z.clone()).unwrap());
        let mut fd = Matrix::zeros(d, k);
        for r in 0..d {
            for c in 0..k {
                let mut p = z.clone();
                p.set(r, c, z.get(r, c) + h);
                let up = orth_penalty(&LatentBlocks::new(p.clone()).unwrap());
                p.set(r, c, z.get(r, c) - h);
                let down = orth_penalty(&LatentBlocks::new(p).unwrap());
                fd.set(r, c, (up - down) / (2.0 * h));
            }
        }
        worst = worst.max(rel_err(fd.data(), analytic.data()));
    }
    check(worst <= 1e-6, format!("max relative error {worst:.2e} over 100 instances"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    let cfg = CayleyConfig::with_tau(0.1);
    let (mut worst_z, mut worst_j): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let k = rng.random_range(1..=3);
        let d = rng.random_range(k.max(2)..=8);
        let z = gaussian(d, k, &mut rng);
        let j = gaussian(d, k, &mut rng);
        let g = gaussian(d, k, &mut rng);
        let f = |z: &Matrix, j: &Matrix| {
            inner(&g, cayley_step(&LatentBlocks::new(z.clone()).unwrap(), j, &cfg).unwrap().matrix())
        };
        let (gz, gj) = cayley_vjp(&LatentBlocks::new(z.clone()).unwrap(), &j, &cfg, &g).unwrap();
        let mut fz = Matrix::zeros(d, k);
        let mut fj = Matrix::zeros(d, k);
        for r in 0..d {
            for c in 0..k {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp.set(r, c, z.get(r, c) + h);
                zm.set(r, c, z.get(r, c) - h);
                fz.set(r, c, (f(&zp, &j) - f(&zm, &j)) / (2.0 * h));
                let (mut jp, mut jm) = (j.clone(), j.clone());
                jp.set(r, c, j.get(r, c) + h);
                jm.set(r, c, j.get(r, c) - h);
                fj.set(r, c, (f(&z, &jp) - f(&z, &jm)) / (2.0 * h));
            }
        }
        worst_z = worst_z.max(rel_err(fz.data(), gz.data()));
        worst_j = worst_j.max(rel_err(fj.data(), gj.data()));
    }
    check(
        worst_z <= 1e-5 && worst_j <= 1e-5,
        format!("max relative error dZ {worst_z:.2e}, dJ {worst_j:.2e} over 50 instances"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let z = LatentBlocks::new(qr_orthonormalize(&gaussian(16, 4, &mut rng)).unwrap()).unwrap();
        let j = gaussian(16, 4, &mut rng);
        let moved: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&tau| {
                cayley_step(&z, &j, &CayleyConfig::with_tau(tau))
                    .unwrap()
                    .matrix()
                    .sub(z.matrix())
                    .unwrap()
                    .frobenius_norm()
            })
            .collect();
        ratios.push(moved[0] / moved[1]);
        ratios.push(moved[1] / moved[2]);
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check(
        lo >= 8.0 && hi <= 12.0,
        format!("per-decade ratios in [{lo:.3}, {hi:.3}] over 20 instances"),
    )
}

fn nudge(mlp: &mut Mlp, mut idx: usize, delta: f64) {
    for s in mlp.param_slices_mut() {
        if idx < s.len() {
            s[idx] += delta;
            return;
        }
        idx -= s.len();
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let acts = [Activation::Identity, Activation::Tanh, Activation::Sigmoid, Activation::Relu];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let depth = rng.random_range(1..=3);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let activations: Vec<Activation> = (0..depth).map(|_| acts[rng.random_range(0..4)]).collect();
        let mut mlp = Mlp::init(&widths, &activations, &mut rng);
        let batch = rng.random_range(1..=4);
        let x = gaussian(batch, widths[0], &mut rng);
        let g = gaussian(batch, widths[depth], &mut rng);
        let trace = mlp.forward(&x).unwrap();
        let (grads, gx) = mlp.backward(&trace, &g).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();
        let mut fd = Vec::with_capacity(analytic.len());
        let count = analytic.len();
        for i in 0..count {
            nudge(&mut mlp, i, h);
            let up = inner(&g, &mlp.predict(&x).unwrap());
            nudge(&mut mlp, i, -2.0 * h);
            let down = inner(&g, &mlp.predict(&x).unwrap());
            nudge(&mut mlp, i, h);
            fd.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&fd, &analytic));
        let mut fx = Vec::new();
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            fx.push((inner(&g, &mlp.predict(&xp).unwrap()) - inner(&g, &mlp.predict(&xm).unwrap())) / (2.0 * h));
        }
        worst = worst.max(rel_err(&fx, gx.data()));
    }
    check(worst <= 1e-5, format!("max relative error {worst:.2e} over 50 architectures"))
}

struct Pair {
    data: FactorDataset,
    model: ProseModel,
    prose: EvalReport,
    baseline: EvalReport,
    seconds: f64,
}

fn quads_pair() -> Result<Pair, String> {
    let start = Instant::now();
    let ds = generate_toy(&FactorSpec::quads(), 7).map_err(|e| e.to_string())?;
    let prose_cfg = ProseConfig {
        seed: 7,
        epochs: 50,
        lambda_orth: 1.0,
        tau: 0.1,
        cayley_enabled: true,
        ..ProseConfig::quads()
    };
    let baseline_cfg = ProseConfig {
        lambda_orth: 0.0,
        cayley_enabled: false,
        ..prose_cfg.clone()
    };
    let run = |cfg: &ProseConfig| -> Result<(ProseModel, EvalReport), String> {
        let out = disentangle::train(cfg, &ds).map_err(|e| e.to_string())?;
        let report = eval::evaluate(&out.checkpoint, &ds, EvalOptions::default()).map_err(|e| e.to_string())?;
        Ok((out.checkpoint.model, report))
    };
    let (model, prose) = run(&prose_cfg)?;
    let (_, baseline) = run(&baseline_cfg)?;
    Ok(Pair {
        data: ds,
        model,
        prose,
        baseline,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn criterion_7(pair: &Result<Pair, String>) -> Vec<(&'static str, Outcome)> {
    let p = match pair {
        Ok(p) => p,
        Err(e) => return vec![("7", Err(format!("training failed: {e}")))],
    };
    let (a, b) = (&p.prose, &p.baseline);
    let time = format!(" ({:.0}s for both runs)", p.seconds);
    vec![
        (
            "7a",
            check(
                a.mean_orth_deviation <= 0.1 * b.mean_orth_deviation,
                format!(
                    "orth deviation {:.4} vs baseline {:.4}{time}",
                    a.mean_orth_deviation, b.mean_orth_deviation
                ),
            ),
        ),
        (
            "7b",
            check(
                a.mean_matched_map() >= b.mean_matched_map(),
                format!(
                    "matched mAP {:.4} vs baseline {:.4}",
                    a.mean_matched_map(),
                    b.mean_matched_map()
                ),
            ),
        ),
        (
            "7c",
            check(
                a.mean_leakage() <= b.mean_leakage(),
                format!(
                    "mean leakage {:.4} vs baseline {:.4}",
                    a.mean_leakage(),
                    b.mean_leakage()
                ),
            ),
        ),
    ]
}

/// Colour transfer on the trained model: after swapping in the block
/// assigned to colour, each cell's dominant channel should be the donor's.
fn colour_transfer(pair: &Result<Pair, String>) -> Outcome {
    let p = pair.as_ref().map_err(|e| format!("training failed: {e}"))?;
    let ds = &p.data;
    let colour = ds.spec.factors.iter().position(|f| f.name == "color").ok_or("no color factor")?;
    let block = p.prose.assignment[colour];
    if block >= p.model.config.k {
        return Err("color factor has no assigned block".into());
    }
    // one test example per colour, with the shapes shifted between rows and columns
    let test = ds.indices(data::Split::Test);
    let pick = |shape_shift: usize| -> Vec<usize> {
        (0..3)
            .filter_map(|c| {
                test.iter()
                    .copied()
                    .find(|&i| ds.labels[i][colour] == c && ds.labels[i][0] == (c + shape_shift) % 3)
            })
            .collect()
    };
    let (rows, cols) = (pick(0), pick(1));
    let grid = eval::attribute_transfer_grid(&p.model, &ds.spec, &ds.batch(&rows), &ds.batch(&cols), block)
        .map_err(|e| e.to_string())?;
    let channels = ds.spec.channels;
    let mut hits = 0;
    for r in 0..rows.len() {
        for (c, &donor) in cols.iter().enumerate() {
            let cell = grid.cell(r + 1, c + 1).ok_or("empty grid cell")?;
            hits += usize::from(dominant_channel(cell, channels) == dominant_channel(ds.image(donor), channels));
        }
    }
    let cells = rows.len() * cols.len();
    check(
        cells == 9 && hits * 10 >= cells * 8,
        format!("block {block}: donor colour in {hits}/{cells} cells"),
    )
}

fn criterion_8() -> Outcome {
    let ds = generate_toy(&FactorSpec::quads(), 8).map_err(|e| e.to_string())?;
    let cfg = ProseConfig {
        epochs: 20,
        ..ProseConfig::beta_vae()
    };
    if (cfg.k, cfg.d, cfg.backbone) != (3, 4, Backbone::BetaVae) {
        return Err("preset is not the k=3, d=4 variational backbone".into());
    }
    // fixed probe batch and noise, scored before and after training
    let idx: Vec<usize> = ds.indices(data::Split::Train).into_iter().step_by(9).take(256).collect();
    let x = ds.batch(&idx);
    let plan = StepPlan::draw(&mut ChaCha8Rng::seed_from_u64(80), x.rows(), &cfg).map_err(|e| e.to_string())?;
    let initial = Trainer::new(cfg.clone(), ds.images.cols())
        .and_then(|t| t.loss_and_gradients(&x, &plan))
        .map_err(|e| e.to_string())?
        .0
        .total;
    let out = disentangle::train(&cfg, &ds).map_err(|e| e.to_string())?;
    let final_total = Trainer::from_checkpoint(&out.checkpoint)
        .loss_and_gradients(&x, &plan)
        .map_err(|e| e.to_string())?
        .0
        .total;
    let all_finite = out.metrics.iter().all(|m| m.total.is_finite());
    check(
        all_finite && out.metrics.len() == 20 && final_total < initial,
        format!(
            "total loss {initial:.5} -> {final_total:.5}; epoch totals {:.5} -> {:.5}",
            out.metrics[0].total,
            out.metrics[19].total
        ),
    )
}

fn criterion_9() -> Outcome {
    let a = average_precision(&[0.4, 0.3, 0.2, 0.1], &[true, true, false, false]).map_err(|e| e.to_string())?;
    let b = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).map_err(|e| e.to_string())?;
    let mut ok = a == 1.0 && b == (1.0 + 2.0 / 3.0) / 2.0;
    for n in [1usize, 2, 5, 10, 100] {
        let scores: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        let positives: Vec<bool> = (0..n).map(|i| i == n - 1).collect();
        ok &= average_precision(&scores, &positives).map_err(|e| e.to_string())? == 1.0 / n as f64;
    }
    check(ok, format!("perfect {a}, hand-ranked {b:.6}, last-of-n exact for n in 1..100"))
}

fn criterion_10() -> Outcome {
    // two 2x3 images, labels 4 and 9
    let mut images = vec![0, 0, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    images.extend([0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0]);
    let labels = vec![0, 0, 0x08, 0x01, 0, 0, 0, 2, 4, 9];
    let ds = data::parse_idx(&images, &labels).map_err(|e| e.to_string())?;
    let exact = ds.image(0) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
        && ds.image(1) == [1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        && ds.labels == vec![vec![4], vec![9]]
        && (ds.spec.height, ds.spec.width, ds.spec.channels) == (2, 3, 1);

    let mut bad_magic = images.clone();
    bad_magic[3] = 0x01;
    let magic = matches!(data::parse_idx(&bad_magic, &labels), Err(DataError::IdxMagic { .. }));
    let truncated = matches!(
        data::parse_idx(&images[..images.len() - 3], &labels),
        Err(DataError::IdxTruncated { .. })
    );
    let mut short_labels = labels.clone();
    short_labels[7] = 1;
    short_labels.pop();
    let count = matches!(
        data::parse_idx(&images, &short_labels),
        Err(DataError::IdxCount { images: 2, labels: 1 })
    );
    check(
        exact && magic && truncated && count,
        format!("pixels exact: {exact}; bad magic: {magic}; truncation: {truncated}; count mismatch: {count}"),
    )
}

fn small_run(seed: u64) -> Result<(TrainOutcome, Vec<u8>), String> {
    let ds = generate_toy(&FactorSpec::quads(), 3).map_err(|e| e.to_string())?;
    let cfg = ProseConfig {
        hidden: vec![32],
        epochs: 2,
        seed,
        ..ProseConfig::quads()
    };
    let out = disentangle::train(&cfg, &ds).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&out.checkpoint);
    Ok((out, bytes))
}

fn criterion_11() -> Outcome {
    let (out, _) = small_run(11)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    disentangle::save_checkpoint(&out.checkpoint, &path).map_err(|e| e.to_string())?;
    let back = disentangle::load_checkpoint(&path).map_err(|e| e.to_string())?;
    let bitwise = back == out.checkpoint && encode_checkpoint(&back) == std::fs::read(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let crc = matches!(
        disentangle::decode_checkpoint(&bytes),
        Err(disentangle::CheckpointError::Format(prose::codec::FormatError::Crc { .. }))
    );
    check(bitwise && crc, format!("bitwise round trip: {bitwise}; corrupted byte caught by CRC: {crc}"))
}

fn criterion_12() -> Outcome {
    let (a, ab) = small_run(12)?;
    let (b, bb) = small_run(12)?;
    let same_ckpt = ab == bb;
    let same_csv = metrics_csv(&a.metrics).into_bytes() == metrics_csv(&b.metrics).into_bytes();
    check(
        same_ckpt && same_csv,
        format!("checkpoint bytes equal: {same_ckpt} ({} bytes); metrics CSV equal: {same_csv}", ab.len()),
    )
}

fn criterion_13() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = rng.random_range(2..=64);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let (a, b) = (unit(&mut rng), unit(&mut rng));
        let t = rng.random_range(0.0..=1.0);
        let m = slerp_block(&a, &b, t).map_err(|e| e.to_string())?;
        let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((n - 1.0).abs());
    }
    check(worst <= 1e-12, format!("max |norm - 1| = {worst:.2e} over 1000 draws"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(&'static str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("criterion {id:>3}: PASS  {detail}"),
            Err(detail) => println!("criterion {id:>3}: FAIL  {detail}"),
        }
        results.push((id, outcome));
    };
    report("1", guarded(|| cayley_trials(true)));
    report("2", guarded(|| cayley_trials(false)));
    report("3", guarded(criterion_3));
    report("4", guarded(criterion_4));
    report("5", guarded(criterion_5));
    report("6", guarded(criterion_6));
    report("9", guarded(criterion_9));
    report("10", guarded(criterion_10));
    report("11", guarded(criterion_11));
    report("12", guarded(criterion_12));
    report("13", guarded(criterion_13));
    report("8", guarded(criterion_8));
    let pair = catch_unwind(quads_pair).unwrap_or_else(|_| Err("panicked".into()));
    for (id, outcome) in criterion_7(&pair) {
        report(id, outcome);
    }
    report("7t", guarded(|| colour_transfer(&pair)));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
