//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so `cargo test --test acceptance -- --nocapture`
//! doubles as a report.

use std::fs;
use std::time::{Duration, Instant};

use pilamim::data::{generate_synthetic_shapes, DatasetSpec, TASK_CLASS, TASK_COUNT, TASK_DIST};
use pilamim::eval::{ablation_report, rankme, rankme_with, FeatureKind, ProbeConfig, RankMeOptions};
use pilamim::model::{init_params, Encoder, Mode, ModelConfig, NamedTensors, Params, PositionalTables};
use pilamim::objective::{loss_cls, loss_latent, loss_pixel, total_loss, LossParts};
use pilamim::patching::{sample_mask, MaskPlan};
use pilamim::tensor::Matrix;
use pilamim::trainer::{
    ema_update, lambda_schedule, load_checkpoint, loss_and_grad, loss_only, pretrain, save_checkpoint,
    TrainConfig, TrainState,
};
use pilamim::Error;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id} [{verdict}] {name}: {detail}");
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

// ---------------------------------------------------------------- criterion 1

/// Finite-difference step.
const FD_H: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences at h = 1e-5
/// carry 1e-11 to 1e-10 of absolute round-off on an O(1) loss, and some
/// entries (attention key biases) have an exact zero gradient, so gradients
/// below the floor are compared on an absolute scale instead.
const REL_ERR_FLOOR: f64 = 1e-4;

fn gradcheck_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        enc_dim: 16,
        enc_heads: 2,
        dec_depth: 1,
        dec_dim: 8,
        dec_heads: 2,
        patch_size: 2,
        image_size: 4,
        channels: 3,
        mask_ratio: 0.5,
        mode,
        ..ModelConfig::desk()
    }
}

fn max_gradcheck_error(mode: Mode, seed: u64) -> (f64, usize) {
    let cfg = gradcheck_config(mode);
    assert_eq!((cfg.n_patches(), cfg.patch_dim()), (4, 12));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&cfg, &mut rng).unwrap();
    // Move every tensor away from its init (unit norms, zero biases) so each
    // gradient path is exercised.
    for (_, t) in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let target: Encoder = init_params(&cfg, &mut rng).unwrap().encoder;
    let tables = PositionalTables::new(&cfg).unwrap();
    let patches = Matrix::from_fn(4, 12, |_, _| rng.gen::<f64>());
    let plan = MaskPlan::from_masked(4, &[0, 3]).unwrap();

    let (_, grads) = loss_and_grad(&params, &target, &cfg, &tables, &patches, &plan).unwrap();
    let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = shapes.iter().sum();
    let picks = sample(&mut rng, total, 200.min(total)).into_vec();

    let mut worst = 0.0f64;
    for flat in &picks {
        let (mut ti, mut off) = (0, *flat);
        while off >= shapes[ti] {
            off -= shapes[ti];
            ti += 1;
        }
        let analytic = grads.tensors()[ti].1.data()[off];
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.tensors_mut()[ti].1.data_mut()[off] += delta;
            loss_only(&p, &target, &cfg, &tables, &patches, &plan).unwrap().total
        };
        let numeric = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max(rel);
    }
    (worst, picks.len())
}

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for (i, mode) in Mode::ALL.into_iter().enumerate() {
        let (err, n) = max_gradcheck_error(mode, 100 + i as u64);
        ok &= err < 1e-5 && n == 200;
        details.push(format!("{mode} max rel err {err:.2e} over {n} params"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    report(
        1,
        "gradient correctness",
        ok,
        &format!("{}; {:.1}s", details.join(", "), elapsed.as_secs_f64()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_masked_loss_exclusivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = true;
    let mut responsive = true;
    let mut trials = 0;
    while trials < 100 {
        let n = rng.gen_range(2..=64);
        let dx = rng.gen_range(1..=16);
        let dt = rng.gen_range(1..=16);
        let ratio = rng.gen_range(0.05..0.95);
        // Ratios that round to an empty or full mask are rejected by design.
        let Ok(plan) = sample_mask(n, ratio, &mut rng) else {
            continue;
        };
        trials += 1;
        let xhat = random_matrix(&mut rng, n, dx);
        let x = random_matrix(&mut rng, n, dx);
        let that = random_matrix(&mut rng, n + 1, dt);
        let t = random_matrix(&mut rng, n + 1, dt);
        let lp = loss_pixel(&xhat, &x, &plan).unwrap();
        let ll = loss_latent(&that, &t, &plan).unwrap();
        let lc = loss_cls(that.row(0), t.row(0)).unwrap();

        let mut x2 = x.clone();
        let mut xhat2 = xhat.clone();
        let mut t2 = t.clone();
        let mut that2 = that.clone();
        for &v in plan.visible() {
            x2.row_mut(v).iter_mut().for_each(|e| *e += 100.0 * rng.gen::<f64>());
            xhat2.row_mut(v).iter_mut().for_each(|e| *e -= 50.0);
            t2.row_mut(v + 1).iter_mut().for_each(|e| *e += 100.0 * rng.gen::<f64>());
            that2.row_mut(v + 1).iter_mut().for_each(|e| *e *= -3.0);
        }
        // L_latent never reads the [CLS] row.
        t2.row_mut(0).iter_mut().for_each(|e| *e += 7.0);
        ok &= loss_pixel(&xhat2, &x2, &plan).unwrap() == lp;
        ok &= loss_pixel(&xhat, &x2, &plan).unwrap() == lp;
        ok &= loss_latent(&that2, &t2, &plan).unwrap() == ll;
        ok &= loss_latent(&that, &t2, &plan).unwrap() == ll;
        // L_cls never reads patch rows.
        let mut t3 = t.clone();
        for &m in plan.masked() {
            t3.row_mut(m + 1).iter_mut().for_each(|e| *e += 1.0);
        }
        ok &= loss_cls(that.row(0), t3.row(0)).unwrap() == lc;

        // Sanity: the losses do respond at masked indices.
        let m = plan.masked()[0];
        let mut x4 = x.clone();
        x4.row_mut(m)[0] += 1.0;
        let mut t4 = t.clone();
        t4.row_mut(m + 1)[0] += 1.0;
        responsive &= loss_pixel(&xhat, &x4, &plan).unwrap() != lp;
        responsive &= loss_latent(&that, &t4, &plan).unwrap() != ll;
    }
    report(
        2,
        "masked-loss exclusivity",
        ok && responsive,
        &format!("{trials} trials, visible/[CLS] perturbations exact: {ok}, masked perturbations detected: {responsive}"),
    );
    assert!(ok && responsive);
}

// ---------------------------------------------------------------- criterion 3

fn small_encoder(rng: &mut ChaCha8Rng) -> Encoder {
    Encoder::init(rng, 12, 8, 1, 2)
}

#[test]
fn criterion_3_ema_invariants() {
    let total = 12_345;
    let endpoints = lambda_schedule(0, total, 0.996, 1.0) == 0.996 && lambda_schedule(total, total, 0.996, 1.0) == 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut convex = true;
    let mut target = small_encoder(&mut rng);
    for _ in 0..1000 {
        let mut context = small_encoder(&mut rng);
        for (_, t) in context.tensors_mut() {
            t.scale(rng.gen_range(0.1..10.0));
        }
        let lambda = rng.gen_range(0.0..=1.0);
        let before = target.clone();
        ema_update(&mut target, &context, lambda).unwrap();
        for (((_, a), (_, b)), (_, c)) in before.tensors().iter().zip(target.tensors()).zip(context.tensors()) {
            for ((&old, &new), &ctx) in a.data().iter().zip(b.data()).zip(c.data()) {
                convex &= new >= old.min(ctx) && new <= old.max(ctx);
            }
        }
    }

    // The trainer's only write to the target is the EMA: replaying the EMA
    // on the pre-step target reproduces it bit for bit, in every mode.
    let mut stop_gradient = true;
    let batch = generate_synthetic_shapes(3, 4, 16).unwrap();
    for mode in Mode::ALL {
        let model = ModelConfig {
            enc_depth: 1,
            enc_dim: 16,
            enc_heads: 2,
            dec_depth: 1,
            dec_dim: 8,
            dec_heads: 2,
            patch_size: 8,
            image_size: 16,
            mode,
            ..ModelConfig::desk()
        };
        let train = TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 4,
            ..TrainConfig::desk()
        };
        let mut st = TrainState::new(model, train, 1).unwrap();
        for _ in 0..3 {
            let before = st.target.clone();
            let lambda = st.lambda_at(st.step);
            st.train_step(&batch).unwrap();
            let mut replay = before;
            ema_update(&mut replay, &st.context.encoder, lambda).unwrap();
            stop_gradient &= replay == st.target;
        }
    }
    let ok = endpoints && convex && stop_gradient;
    report(
        3,
        "EMA invariants",
        ok,
        &format!("lambda endpoints {endpoints}, convexity over 1000 updates {convex}, target written only by EMA {stop_gradient}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_loss_fixtures() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    // Patch indices are 0-based here; the fixtures' M = {1} and M = {1, 2}
    // are the first and first two patches.
    let one = MaskPlan::from_masked(2, &[0]).unwrap();
    let two = MaskPlan::from_masked(3, &[0, 1]).unwrap();
    let zeros2 = Matrix::zeros(2, 2);
    let p1 = loss_pixel(&Matrix::from_vec(2, 2, vec![1.0, 1.0, 9.0, 9.0]), &zeros2, &one).unwrap();
    let p2 = loss_pixel(
        &Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]),
        &Matrix::zeros(3, 2),
        &two,
    )
    .unwrap();
    let l1 = loss_latent(
        &Matrix::from_vec(3, 2, vec![9.0, 9.0, 3.0, 4.0, 9.0, 9.0]),
        &Matrix::zeros(3, 2),
        &one,
    )
    .unwrap();
    let c1 = loss_cls(&[1.0, 1.0, 1.0, 1.0], &[0.0; 4]).unwrap();
    let parts = LossParts {
        l_pixel: Some(1.0),
        l_latent: Some(2.0),
        l_cls: Some(0.5),
    };
    let total = total_loss(parts, Mode::Pilamim).unwrap().total;
    let got = [p1, p2, l1, c1, total];
    let want = [1.0, 0.5, 12.5, 1.0, 3.5];
    let ok = got.iter().zip(want).all(|(&g, w)| close(g, w));
    report(4, "masked-MSE fixtures", ok, &format!("got {got:?}, want {want:?}"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

const OVERFIT_LR: f64 = 2e-3;

#[test]
fn criterion_5_overfit_one_batch() {
    let batch = generate_synthetic_shapes(5, 32, 32).unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    for mode in Mode::ALL {
        let start = Instant::now();
        let model = ModelConfig {
            mode,
            ..ModelConfig::desk()
        };
        assert_eq!((model.enc_dim, model.enc_depth, model.dec_dim, model.dec_depth), (128, 4, 64, 2));
        let train = TrainConfig {
            epochs: 200,
            warmup_epochs: 0,
            batch_size: 32,
            base_lr: OVERFIT_LR,
            ..TrainConfig::desk()
        };
        let mut st = TrainState::new(model, train, 1).unwrap();
        let first = st.train_step(&batch).unwrap().loss.total;
        let mut last = first;
        for _ in 1..200 {
            last = st.train_step(&batch).unwrap().loss.total;
        }
        let elapsed = start.elapsed();
        let ratio = last / first;
        ok &= ratio < 0.5 && elapsed < Duration::from_secs(300);
        details.push(format!("{mode} {first:.4}->{last:.4} (x{ratio:.3}, {:.0}s)", elapsed.as_secs_f64()));
    }
    report(5, "overfit one batch", ok, &details.join(", "));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

/// Model used for the end-to-end desk run: 64 patches like the toy config,
/// narrower so that all four modes fit the time budget on one core.
fn e2e_model(mode: Mode) -> ModelConfig {
    ModelConfig {
        enc_depth: 2,
        enc_dim: 64,
        enc_heads: 4,
        dec_depth: 1,
        dec_dim: 32,
        dec_heads: 4,
        mode,
        ..ModelConfig::desk()
    }
}

#[test]
fn criterion_6_desk_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = DatasetSpec::synthetic(0, 2000, 32);
    let train = TrainConfig {
        epochs: 50,
        ..TrainConfig::desk()
    };
    let mut states = Vec::new();
    for mode in Mode::ALL {
        let out = pretrain(&e2e_model(mode), &train, &data, dir.path().join(mode.as_str())).unwrap();
        assert_eq!(out.metrics.len(), 50);
        states.push((mode.as_str().to_string(), out.state));
    }
    let eval = DatasetSpec::synthetic(1, 2000, 32).load().unwrap();
    let entries: Vec<(&str, &TrainState)> = states.iter().map(|(id, s)| (id.as_str(), s)).collect();
    let tasks = [TASK_CLASS, TASK_COUNT, TASK_DIST];
    let rep = ablation_report(&entries, &eval, &tasks, FeatureKind::Cls, &ProbeConfig::desk()).unwrap();
    rep.write(dir.path()).unwrap();
    let text = rep.to_text();
    println!("{text}");

    let thresholds = [(TASK_CLASS, 0.30), (TASK_COUNT, 0.22), (TASK_DIST, 0.30)];
    let mut ok = true;
    let mut misses = Vec::new();
    for (id, _) in &states {
        for (task, bar) in thresholds {
            let acc = rep.accuracy(id, task).unwrap();
            if !(acc > bar) {
                ok = false;
                misses.push(format!("{id}/{task} {acc:.3} <= {bar}"));
            }
        }
    }
    let cells = rep.rows.iter().filter(|r| r.metric == "probe_accuracy").count();
    let rank_cells = rep.rows.iter().filter(|r| r.metric == "rankme").count();
    let table2 = text.lines().any(|l| l.starts_with("without [CLS] loss") && !l.contains(" - "))
        && text.lines().any(|l| l.starts_with("with [CLS] loss") && !l.contains(" - "));
    let elapsed = start.elapsed();
    ok &= cells == 12 && rank_cells == 4 && table2 && elapsed < Duration::from_secs(150 * 60);
    report(
        6,
        "desk end-to-end",
        ok,
        &format!(
            "{cells} accuracy cells, {rank_cells} RankMe cells, [CLS] rows present {table2}, below-threshold {:?}, {:.0}s",
            misses,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_rankme_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dir: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
    let rank1 = Matrix::from_fn(500, 32, |r, c| (r as f64 * 0.37).sin() * dir[c]);
    let s1 = rankme(&rank1).unwrap();

    let gauss = random_matrix(&mut rng, 10_000, 64);
    let sg = rankme(&gauss).unwrap();

    // Random orthogonal matrix from the QR factorization of a Gaussian one.
    let q = nalgebra::DMatrix::from_fn(64, 64, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    let rotated = Matrix::from_fn(2000, 64, |r, c| (0..64).map(|k| gauss.get(r, k) * q[(k, c)]).sum());
    let base = rankme(&gauss.select_rows(&(0..2000).collect::<Vec<_>>())).unwrap();
    let sr = rankme(&rotated).unwrap();
    let rot_diff = (sr - base).abs();

    let ident = Matrix::from_fn(16, 16, |r, c| if r == c { 1.0 } else { 0.0 });
    let si = rankme_with(&ident, RankMeOptions { center: false, ..Default::default() }).unwrap();

    let ok = s1 <= 1.001 && sg >= 57.6 && rot_diff < 1e-6 && (si - 16.0).abs() < 1e-4;
    report(
        7,
        "RankMe sanity",
        ok,
        &format!("rank-1 {s1:.6}, gaussian 10000x64 {sg:.3}, rotation diff {rot_diff:.2e}, 16x16 identity {si:.6}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 8

fn forward_bits(params: &Params, target: &Encoder, cfg: &ModelConfig, patches: &Matrix, plan: &MaskPlan) -> Vec<u64> {
    let tables = PositionalTables::new(cfg).unwrap();
    let (loss, grads) = loss_and_grad(params, target, cfg, &tables, patches, plan).unwrap();
    let visible = patches.select_rows(plan.visible());
    let (z, _) = params.encoder.forward(&visible, plan.visible(), &tables.encoder).unwrap();
    let mut bits: Vec<u64> = z.data().iter().map(|v| v.to_bits()).collect();
    for dec in [&params.pixel_decoder, &params.latent_decoder].into_iter().flatten() {
        let (out, _) = dec.forward(&z, plan, &tables.decoder).unwrap();
        bits.extend(out.data().iter().map(|v| v.to_bits()));
    }
    bits.push(loss.total.to_bits());
    for (_, g) in grads.tensors() {
        bits.extend(g.data().iter().map(|v| v.to_bits()));
    }
    bits
}

#[test]
fn criterion_8_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bitwise = true;
    let mut state_equal = true;
    for mode in Mode::ALL {
        let model = ModelConfig {
            enc_depth: 1,
            enc_dim: 32,
            enc_heads: 4,
            dec_depth: 1,
            dec_dim: 16,
            dec_heads: 2,
            patch_size: 8,
            image_size: 32,
            mode,
            ..ModelConfig::desk()
        };
        let train = TrainConfig {
            epochs: 5,
            warmup_epochs: 1,
            batch_size: 4,
            ..TrainConfig::desk()
        };
        let mut st = TrainState::new(model.clone(), train, 2).unwrap();
        let batch = generate_synthetic_shapes(8, 4, 32).unwrap();
        for _ in 0..3 {
            st.train_step(&batch).unwrap();
        }
        let path = dir.path().join(format!("{mode}.bin"));
        save_checkpoint(&st, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        state_equal &= back.context == st.context
            && back.target == st.target
            && back.optimizer == st.optimizer
            && back.step == st.step
            && back.rng == st.rng;
        let n = model.n_patches();
        for _ in 0..20 {
            let patches = Matrix::from_fn(n, model.patch_dim(), |_, _| rng.gen::<f64>());
            let plan = sample_mask(n, model.mask_ratio, &mut rng).unwrap();
            bitwise &= forward_bits(&st.context, &st.target, &model, &patches, &plan)
                == forward_bits(&back.context, &back.target, &model, &patches, &plan);
        }
    }

    let good = dir.path().join(format!("{}.bin", Mode::Pilamim));
    let bytes = fs::read(&good).unwrap();
    let write = |name: &str, b: &[u8]| {
        let p = dir.path().join(name);
        fs::write(&p, b).unwrap();
        p
    };
    let truncated = matches!(
        load_checkpoint(write("trunc.bin", &bytes[..bytes.len() - 9])),
        Err(Error::CorruptFile(_))
    );
    let header_cut = matches!(load_checkpoint(write("head.bin", &bytes[..20])), Err(Error::CorruptFile(_)));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let magic = matches!(load_checkpoint(write("magic.bin", &bad_magic)), Err(Error::CorruptFile(_)));
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("pilamim-checkpoint-v1").unwrap();
    let mut bad_version = bytes.clone();
    bad_version[at + "pilamim-checkpoint-v".len()] = b'9';
    let version = matches!(
        load_checkpoint(write("version.bin", &bad_version)),
        Err(Error::VersionMismatch { .. })
    );
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0u8; 8]);
    let trailing = matches!(load_checkpoint(write("extra.bin", &extra)), Err(Error::CorruptFile(_)));
    let errors = truncated && header_cut && magic && version && trailing;

    let ok = bitwise && state_equal && errors;
    report(
        8,
        "checkpoint round-trip",
        ok,
        &format!(
            "4 modes x 20 inputs bitwise {bitwise}, state equal {state_equal}, truncated {truncated}, short header {header_cut}, bad magic {magic}, version {version}, trailing bytes {trailing}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig {
        enc_depth: 1,
        enc_dim: 32,
        enc_heads: 4,
        dec_depth: 1,
        dec_dim: 16,
        dec_heads: 2,
        ..ModelConfig::desk()
    };
    let train = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 16,
        seed: 9,
        ..TrainConfig::desk()
    };
    let data = DatasetSpec::synthetic(9, 48, 32);
    let run = |name: &str, threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| pretrain(&model, &train, &data, dir.path().join(name)).unwrap());
        fs::read(out.metrics_path).unwrap()
    };
    let a = run("a", 1);
    let b = run("b", 1);
    let c = run("c", 3);
    let ok = a == b && a == c && !a.is_empty();
    report(
        9,
        "determinism",
        ok,
        &format!("metrics identical across repeat run {} and across 1 vs 3 workers {}", a == b, a == c),
    );
    assert!(ok);
}
