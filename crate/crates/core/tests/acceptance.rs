//! Acceptance criteria 1-10. Each test prints one `criterion N ... PASS|FAIL`
//! line before asserting. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines.

use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mcdenoise::gradcheck::check_gradients;
use mcdenoise::metrics::{d_number, dvh, dvh_error, isodose_dice, mse, DVH_BINS, DVH_MAX_DOSE};
use mcdenoise::model::{build, ModelKind, Network, ScaledConfig};
use mcdenoise::ops::{conv3d, voxel_shuffle, voxel_unshuffle, Conv, ConvSpec};
use mcdenoise::perf::{bench_modules, count_flops, module_flops, BenchConfig};
use mcdenoise::phantom::{generate_clean, generate_dataset, DatasetConfig, DoseVolume, Mask, NoiseModel, PhantomSpec};
use mcdenoise::tensor::{seeded_rng, SeededRng};
use mcdenoise::train::{denoise, n2n_equivalence_probe, n2n_loss, train, TrainConfig};
use mcdenoise::{Result, Tape, Tensor, Var};
use rand::Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:>2} {name:<34} {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_01_shuffle_identity() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let mut exact = true;
    for _ in 0..50 {
        let e: Vec<usize> = (0..3).map(|_| 2 * rng.random_range(1..=8)).collect();
        let c = rng.random_range(1..=3);
        let x = Tensor::randn(&[1, c, e[0], e[1], e[2]], 1.0, &mut rng).unwrap();
        let back = voxel_shuffle(&voxel_unshuffle(&x).unwrap()).unwrap();
        let u = voxel_unshuffle(&x).unwrap();
        let again = voxel_unshuffle(&voxel_shuffle(&u).unwrap()).unwrap();
        exact &= back == x && again == u;
    }
    let t = start.elapsed();
    report(1, "shuffle/unshuffle identity", exact && t < Duration::from_secs(10), &format!("50 tensors, {t:.2?}"));
}

fn project(tape: &mut Tape, y: Var, rng: &mut SeededRng) -> Result<Var> {
    let w = tape.constant(Tensor::randn(tape.value(y).shape(), 1.0, rng)?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn criterion_02_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    const EPS: f64 = 1e-6;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut rng = seeded_rng(202);
    let randn = |shape: &[usize], rng: &mut SeededRng| Tensor::randn(shape, 1.0, rng).unwrap();
    type Case = (&'static str, Vec<Tensor>, [usize; 3]);
    for kernel in ["conv3d", "axial", "slice", "instance_norm", "upsample", "relu", "n2n_loss"] {
        let mut max_err = 0.0f64;
        for inst in 0..10 {
            let seed: u64 = rng.random();
            let mut r = seeded_rng(seed);
            let ci = r.random_range(1..=2);
            let co = r.random_range(1..=2);
            let e = [r.random_range(2..=4), r.random_range(2..=4), r.random_range(2..=4)];
            let x = randn(&[1, ci, e[0], e[1], e[2]], &mut r);
            let stride = if inst % 2 == 0 { 1 } else { 2 };
            let case: Case = match kernel {
                "conv3d" => ("c", vec![x, randn(&[co, ci, 3, 3, 3], &mut r), randn(&[co], &mut r)], [stride; 3]),
                "axial" => ("c", vec![x, randn(&[co, ci, 3, 3, 1], &mut r), randn(&[co], &mut r)], [stride, stride, 1]),
                "slice" => ("c", vec![x, randn(&[co, ci, 1, 1, 3], &mut r), randn(&[co], &mut r)], [1, 1, stride]),
                "instance_norm" => ("n", vec![x, randn(&[ci], &mut r), randn(&[ci], &mut r)], [1; 3]),
                "relu" => ("r", vec![x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })], [1; 3]),
                "upsample" => ("u", vec![x], [1; 3]),
                _ => ("l", vec![x.clone(), randn(x.shape(), &mut r)], [1; 3]),
            };
            let (op, inputs, stride) = case;
            let proj_seed: u64 = r.random();
            let reports = check_gradients(
                &inputs,
                |t, v| {
                    let mut pr = seeded_rng(proj_seed);
                    match op {
                        "c" => {
                            let y = t.conv3d(v[0], v[1], Some(v[2]), stride)?;
                            project(t, y, &mut pr)
                        }
                        "n" => {
                            let y = t.instance_norm(v[0], v[1], v[2], 1e-5)?;
                            project(t, y, &mut pr)
                        }
                        "r" => {
                            let y = t.relu(v[0])?;
                            project(t, y, &mut pr)
                        }
                        "u" => {
                            let y = t.upsample_trilinear(v[0])?;
                            project(t, y, &mut pr)
                        }
                        _ => n2n_loss(t, v[0], v[1]),
                    }
                },
                EPS,
            )
            .unwrap();
            max_err = reports.iter().fold(max_err, |m, r| m.max(r.max_rel_err));
        }
        worst.push((kernel, max_err));
    }
    let t = start.elapsed();
    let pass = worst.iter().all(|(_, e)| *e < 1e-4) && t < Duration::from_secs(300);
    let detail: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    report(2, "gradient suite (rel err < 1e-4)", pass, &format!("{}; {t:.2?}", detail.join(", ")));
}

#[test]
fn criterion_03_separable_equivalence() {
    let _g = serial();
    let mut rng = seeded_rng(303);
    let mut worst = 0.0f64;
    for inst in 0..20 {
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let e = [rng.random_range(2..=7), rng.random_range(2..=7), rng.random_range(2..=7)];
        let down = inst % 2 == 1;
        let x = Tensor::randn(&[1, ci, e[0], e[1], e[2]], 1.0, &mut rng).unwrap();
        let a = Tensor::randn(&[1, ci, 3, 3, 1], 1.0, &mut rng).unwrap();
        let s = Tensor::randn(&[co, 1, 1, 1, 3], 1.0, &mut rng).unwrap();
        let mut k = Vec::with_capacity(co * ci * 27);
        for o in 0..co {
            for i in 0..ci {
                for h in 0..3 {
                    for w in 0..3 {
                        for d in 0..3 {
                            k.push(a.get(&[0, i, h, w, 0]).unwrap() * s.get(&[o, 0, 0, 0, d]).unwrap());
                        }
                    }
                }
            }
        }
        let axial = Conv::new(ConvSpec::axial(ci, 1, down), a, Tensor::zeros(&[1]).unwrap()).unwrap();
        let slice = Conv::new(ConvSpec::slice(1, co, down), s, Tensor::zeros(&[co]).unwrap()).unwrap();
        let full_spec = ConvSpec::regular(ci, co, if down { 2 } else { 1 });
        let full = Conv::new(full_spec, Tensor::from_vec(&[co, ci, 3, 3, 3], k).unwrap(), Tensor::zeros(&[co]).unwrap()).unwrap();
        let y1 = conv3d(&conv3d(&x, &axial).unwrap(), &slice).unwrap();
        let y2 = conv3d(&x, &full).unwrap();
        assert_eq!(y1.shape(), y2.shape());
        worst = worst.max(y1.max_abs_diff(&y2));
    }
    report(3, "axial+slice == rank-1 conv3d", worst < 1e-10, &format!("20 instances, max |diff| {worst:.1e}"));
}

#[test]
fn criterion_04_clinical_complexity() {
    let _g = serial();
    let start = Instant::now();
    let p = build(ModelKind::Proposed, &ScaledConfig::clinical_proposed()).unwrap();
    let u = build(ModelKind::UnetBaseline, &ScaledConfig::clinical_unet()).unwrap();
    let rp = count_flops(&p, [256, 256, 64]).unwrap();
    let ru = count_flops(&u, [256, 256, 64]).unwrap();
    let (fp, fu, pp, pu) = (rp.gflops(), ru.gflops(), rp.mparams(), ru.mparams());
    let t = start.elapsed();
    let pass = (fp - 55.0).abs() <= 0.15 * 55.0
        && (fu - 926.0).abs() <= 0.15 * 926.0
        && fu / fp >= 12.0
        && (pp - 12.0).abs() <= 1.2
        && (pu - 49.0).abs() <= 4.9
        && (3.0..=5.0).contains(&(pu / pp))
        && t < Duration::from_secs(10);
    let detail = format!(
        "{fp:.2}G/{pp:.2}M vs {fu:.2}G/{pu:.2}M, FLOPs x{:.1}, params x{:.2}, {t:.2?}",
        fu / fp,
        pu / pp
    );
    report(4, "clinical-size FLOPs/params", pass, &detail);
}

#[test]
fn criterion_05_equivalence_probe() {
    let _g = serial();
    let start = Instant::now();
    let r = n2n_equivalence_probe(1_000_000, 0.0, 505);
    let bias = 0.5;
    let b = n2n_equivalence_probe(1_000_000, bias, 506);
    let t = start.elapsed();
    let pass = r.gap_a < 5e-3
        && r.gap_b < 5e-3
        && b.gap_a < 5e-3
        && (b.gap_b - bias).abs() < 5e-3
        && t < Duration::from_secs(30);
    let detail = format!(
        "gaps a {:.1e} b {:.1e}; bias {bias} shifts b by {:.4}; {t:.2?}",
        r.gap_a, r.gap_b, b.gap_b
    );
    report(5, "noise-to-noise equivalence probe", pass, &detail);
}

#[test]
fn criterion_06_desk_training() {
    let _g = serial();
    let start = Instant::now();
    let extents = [32, 32, 16];
    let train_set = generate_dataset(&DatasetConfig::new(extents, 8, 1_000_000, 2, 600), None).unwrap();
    let held_out = generate_dataset(&DatasetConfig::new(extents, 2, 1_000_000, 15, 601), None).unwrap();
    let cfg = TrainConfig::desk();
    let graph = build(cfg.model, &cfg.scaled()).unwrap();
    let mut net = Network::init(graph, cfg.seed);
    train(&mut net, &train_set, &cfg).unwrap();

    let mut pass = true;
    let mut details = Vec::new();
    for case in &held_out {
        let d95_clean = d_number(&case.clean, &case.ptv, 95.0).unwrap();
        let (mut noisy_mse, mut den_mse, mut closer) = (0.0, 0.0, 0usize);
        for noisy in &case.noisy {
            let den = denoise(&net, noisy, cfg.normalization_dose).unwrap();
            noisy_mse += mse(noisy, &case.clean).unwrap();
            den_mse += mse(&den, &case.clean).unwrap();
            let dn = (d_number(noisy, &case.ptv, 95.0).unwrap() - d95_clean).abs();
            let dd = (d_number(&den, &case.ptv, 95.0).unwrap() - d95_clean).abs();
            closer += (dd < dn) as usize;
        }
        let ratio = den_mse / noisy_mse;
        let frac = closer as f64 / case.noisy.len() as f64;
        pass &= ratio <= 0.2 && frac >= 0.8;
        details.push(format!("case {}: MSE ratio {ratio:.3}, D95 closer {closer}/{}", case.id, case.noisy.len()));
    }
    let t = start.elapsed();
    pass &= t < Duration::from_secs(1800);
    report(6, "desk training on held-out cases", pass, &format!("{}; {t:.0?}", details.join("; ")));
}

fn random_volume(rng: &mut SeededRng) -> (DoseVolume, DoseVolume, Mask) {
    let e = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4)];
    let n = e.iter().product::<usize>();
    let mut vals = || (0..n).map(|_| rng.random_range(-0.1..1.4)).collect::<Vec<f64>>();
    let (a, b) = (vals(), vals());
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let k = rng.random_range(0..n);
    m[k] = true;
    let a = DoseVolume::new(e, [1.0; 3], a).unwrap();
    let b = DoseVolume::new(e, [1.0; 3], b).unwrap();
    let mask = Mask::from_fn(e, [1.0; 3], |[h, w, d]| m[(h * e[1] + w) * e[2] + d]);
    (a, b, mask)
}

fn oracle_dvh(v: &[f64], m: &[bool], edges: &[f64]) -> Vec<f64> {
    let inside: Vec<f64> = v.iter().zip(m).filter(|p| *p.1).map(|p| *p.0).collect();
    edges
        .iter()
        .map(|&e| inside.iter().filter(|&&d| e == 0.0 || d >= e).count() as f64 / inside.len() as f64)
        .collect()
}

fn oracle_d(v: &[f64], m: &[bool], p: u32) -> f64 {
    let inside: Vec<f64> = v.iter().zip(m).filter(|q| *q.1).map(|q| *q.0).collect();
    let n = inside.len();
    inside
        .iter()
        .copied()
        .filter(|&d| 100 * inside.iter().filter(|&&x| x >= d).count() >= p as usize * n)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn oracle_dice(a: &[f64], b: &[f64], t: f64) -> f64 {
    let sa: Vec<usize> = (0..a.len()).filter(|&i| a[i] > t).collect();
    let sb: Vec<usize> = (0..b.len()).filter(|&i| b[i] > t).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.iter().filter(|i| sb.contains(i)).count();
    2.0 * inter as f64 / (sa.len() + sb.len()) as f64
}

#[test]
fn criterion_07_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = seeded_rng(707);
    let (mut worst, mut ordered, mut dice_ok) = (0.0f64, true, true);
    for _ in 0..100 {
        let (a, b, m) = random_volume(&mut rng);
        let n = a.len() as f64;
        let mse_o = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        worst = worst.max((mse(&a, &b).unwrap() - mse_o).abs());

        let ca = dvh(&a, &m, DVH_BINS, DVH_MAX_DOSE, "s").unwrap();
        let cb = dvh(&b, &m, DVH_BINS, DVH_MAX_DOSE, "s").unwrap();
        let edges: Vec<f64> = (0..DVH_BINS).map(|i| i as f64 * DVH_MAX_DOSE / DVH_BINS as f64).collect();
        let (oa, ob) = (oracle_dvh(&a.values, &m.values, &edges), oracle_dvh(&b.values, &m.values, &edges));
        for (x, y) in ca.fractions.iter().zip(&oa).chain(cb.fractions.iter().zip(&ob)) {
            worst = worst.max((x - y).abs());
        }
        let err_o: f64 = oa.iter().zip(&ob).map(|(x, y)| (x - y).abs() * DVH_MAX_DOSE / DVH_BINS as f64).sum();
        worst = worst.max((dvh_error(&ca, &cb).unwrap() - err_o).abs());

        let ds: Vec<f64> = [95, 98, 99]
            .iter()
            .map(|&p| {
                let d = d_number(&a, &m, p as f64).unwrap();
                worst = worst.max((d - oracle_d(&a.values, &m.values, p)).abs());
                d
            })
            .collect();
        ordered &= ds[2] <= ds[1] && ds[1] <= ds[0];

        let reference = rng.random_range(0.5..1.5);
        for level in [10.0, 30.0, 50.0, 70.0, 80.0, 90.0] {
            let d = isodose_dice(&a, &b, level, reference).unwrap();
            let o = oracle_dice(&a.values, &b.values, level / 100.0 * reference);
            worst = worst.max((d - o).abs());
            dice_ok &= (0.0..=1.0).contains(&d) && d == isodose_dice(&b, &a, level, reference).unwrap();
        }
    }
    let t = start.elapsed();
    let pass = worst < 1e-10 && ordered && dice_ok && t < Duration::from_secs(60);
    report(
        7,
        "metric oracles",
        pass,
        &format!("100 volumes, max |diff| {worst:.1e}, D99<=D98<=D95 {ordered}, Dice symmetric {dice_ok}; {t:.2?}"),
    );
}

#[test]
fn criterion_08_noise_statistics() {
    let _g = serial();
    let spec = PhantomSpec::three_beam([64, 64, 32]);
    let clean = generate_clean(&spec).unwrap();
    let body = spec.body_mask();
    let model = NoiseModel::default();
    let noise = |h: u64, seed: u64| -> Vec<f64> {
        let v = model.apply(&clean, h, seed).unwrap();
        v.values.iter().zip(&clean.values).zip(&body.values).filter(|p| *p.1).map(|((a, b), _)| a - b).collect()
    };
    let stats = |e: &[f64]| {
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        (mean, e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let e1 = noise(1_000_000, 1);
    let (mean, var1) = stats(&e1);
    let n = e1.len() as f64;
    let mean_ok = mean.abs() < 5.0 * var1.sqrt() / n.sqrt();
    let (_, var2) = stats(&noise(2_000_000, 2));
    let (_, var4) = stats(&noise(4_000_000, 3));
    let (r2, r4) = (var1 / var2, var1 / var4);
    let scale_ok = (r2 / 2.0 - 1.0).abs() < 0.1 && (r4 / 4.0 - 1.0).abs() < 0.1;
    let e1b = noise(1_000_000, 4);
    let (mb, vb) = stats(&e1b);
    let cov = e1.iter().zip(&e1b).map(|(x, y)| (x - mean) * (y - mb)).sum::<f64>() / (n - 1.0);
    let corr = cov / (var1 * vb).sqrt();
    let pass = mean_ok && scale_ok && corr.abs() < 0.05;
    let detail = format!(
        "mean {mean:.2e} (bound {:.2e}), var ratios {r2:.3}/{r4:.3}, pair corr {corr:.1e}",
        5.0 * var1.sqrt() / n.sqrt()
    );
    report(8, "noise model statistics", pass, &detail);
}

#[test]
fn criterion_09_benchmark_ordering() {
    let _g = serial();
    let cfg = BenchConfig::default();
    let rows = bench_modules(&cfg).unwrap();
    let (regular, decoupled) = module_flops(cfg.channels, cfg.extents, false);
    let exact = 9 * decoupled == 4 * regular;
    let faster = rows[1].median_ms < rows[0].median_ms;
    let detail = format!(
        "{} {:.1} ms (IQR {:.1}) vs {} {:.1} ms (IQR {:.1}), {} repeats, FLOPs ratio {decoupled}/{regular}",
        rows[0].module, rows[0].median_ms, rows[0].iqr_ms, rows[1].module, rows[1].median_ms, rows[1].iqr_ms, cfg.repeats
    );
    report(9, "decoupled module faster, FLOPs 4/9", exact && faster && rows.len() == 2, &detail);
}

fn run_bin(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_mcdenoise"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "mcdenoise {args:?} failed with {status}");
}

/// Relative path and contents of every file below `dir` except run manifests.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.txt" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_reproducibility() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let root = tmp.path().join(tag);
        let p = |s: &str| root.join(s).display().to_string();
        run_bin(&["phantom", "--cases", "3", "--pairs", "2", "--extents", "32x32x16", "--seed", "7", "--out", &p("data")]);
        run_bin(&["train", "--data", &p("data"), "--holdout", "1", "--iterations", "100", "--seed", "3", "--out", &p("train")]);
        let ckpt = p("train/model.ddpk");
        let noisy = p("data/case_002/noisy_00.dvol");
        run_bin(&["denoise", "--checkpoint", &ckpt, "--input", &noisy, "--slices", "--out", &p("denoise")]);
        run_bin(&["eval", "--data", &p("data"), "--checkpoint", &ckpt, "--holdout", "1", "--out", &p("eval")]);
        run_bin(&["analyze", "--model", "unet", "--out", &p("analyze")]);
        snapshot(&root)
    };
    let (a, b) = (run("a"), run("b"));
    let kinds = ["ddpk", "dvol", "csv"].map(|k| a.iter().filter(|(n, _)| n.ends_with(k)).count());
    let identical = a == b && kinds.iter().all(|&k| k > 0);
    let detail = format!(
        "{} files compared ({} ddpk, {} dvol, {} csv)",
        a.len(),
        kinds[0],
        kinds[1],
        kinds[2]
    );
    report(10, "bit-identical reruns", identical, &detail);
}
