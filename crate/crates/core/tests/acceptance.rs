//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,3` restricts the run to the listed criteria
//! (criterion 7 reuses the model trained for 5 and trains it if needed).

use std::path::Path;
use std::time::Instant;

use ddfflow::flow::{instance_optimise, interpolate, sample, sample_traced, velocity, SamplerConfig};
use ddfflow::fvol;
use ddfflow::losses::{reg_loss, reg_loss_and_grad, reg_loss_grad_ddf, LossConfig};
use ddfflow::metrics::{dice, dice_foreground, ejection_fraction, jacobian_stats, myocardial_thickness};
use ddfflow::network::{backward, checkpoint, forward, init_params, Model, NetworkConfig, NetworkParameters, Workspace};
use ddfflow::synth::{generate_dataset, PhantomCase, PhantomConfig};
use ddfflow::train::{ema_update, fit, train_step, FitOptions, ImagePair, TrainConfig, TrainState};
use ddfflow::volume::{jacobian_map, sample_noise_field, warp_image, warp_labels};
use ddfflow::{Class, Dims, DisplacementField, LabelMap, Spacing, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-scale training schedule for criterion 5.
const DESK_EPOCHS: usize = 6;
const DESK_LR: f64 = 1e-3;
const DESK_BUDGET_SECONDS: f64 = 45.0 * 60.0;

type Outcome = Result<String, String>;

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_field(d: Dims, spacing: Spacing, scale: f64, seed: u64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DisplacementField::from_fn(d, spacing, |_, _, _| {
        [
            scale * rng.gen_range(-1.0..1.0),
            scale * rng.gen_range(-1.0..1.0),
            scale * rng.gen_range(-1.0..1.0),
        ]
    })
}

fn smooth_image(d: Dims, phase: f64) -> Volume {
    Volume::from_fn(d, Spacing::isotropic(), |x, y, z| {
        (0.7 * x as f64 + phase).sin() * (0.5 * y as f64).cos() + 0.2 * z as f64
    })
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        n_scales: 2,
        channels: vec![4, 4],
        corr_radius: 1,
        time_embed_dim: 8,
        mlp_hidden: 6,
        seed: 0,
    }
}

/// Initialised weights with random heads, so predictions depend on every input.
fn live_params(cfg: &NetworkConfig, seed: u64) -> NetworkParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_params(cfg, &mut rng).expect("valid config");
    for e in p.entries().to_vec() {
        if e.name.ends_with(".bias") || e.name.contains(".fc2.") {
            for v in &mut p.values_mut()[e.range] {
                *v = 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    p
}

fn pair_of(case: &PhantomCase) -> ImagePair {
    ImagePair {
        fixed: case.ed_image.clone(),
        moving: case.es_image.clone(),
    }
}

fn small_phantoms(n: usize, seed: u64) -> Vec<PhantomCase> {
    let cfg = PhantomConfig {
        dims: Dims::new(32, 32, 4),
        spacing: Spacing([3.0, 3.0, 3.15]),
        ..PhantomConfig::default()
    };
    generate_dataset(&cfg, n, &mut ChaCha8Rng::seed_from_u64(seed)).expect("small phantoms fit")
}

// 1 -------------------------------------------------------------------------

fn algebraic_sampler() -> Outcome {
    let d = Dims::new(16, 16, 8);
    let sp = Spacing([1.5, 1.5, 3.15]);
    let mut worst_velocity: f64 = 0.0;
    for seed in 0..5 {
        let psi1 = random_field(d, sp, 4.0, seed);
        let eps = sample_noise_field(d, sp, &mut ChaCha8Rng::seed_from_u64(100 + seed));
        check(interpolate(&psi1, &eps, 0.0).map_err(err)? == eps, || "interpolate(t=0) != eps".into())?;
        check(interpolate(&psi1, &eps, 1.0).map_err(err)? == psi1, || "interpolate(t=1) != psi1".into())?;
        let truth = psi1.axpy(-1.0, &eps);
        for k in 0..20 {
            let t = k as f64 / 20.0;
            let psi_t = interpolate(&psi1, &eps, t).map_err(err)?;
            let v = velocity(&psi1, &psi_t, t).map_err(err)?;
            worst_velocity = worst_velocity.max(v.max_abs_diff(&truth));
        }
    }
    check(worst_velocity <= 1e-6, || format!("velocity off the straight path by {worst_velocity:e}"))?;

    let img = Dims::new(8, 8, 4);
    let (fixed, moving) = (smooth_image(img, 0.0), smooth_image(img, 0.8));
    let mut model = Model::new(live_params(&tiny_net(), 3));
    let loss = LossConfig::default();

    let euler = SamplerConfig { seed: 9, ..SamplerConfig::plain(1) };
    let (out, trace) = sample_traced(&mut model, &fixed, &moving, &euler, &loss).map_err(err)?;
    let raw = model.predict(&fixed, &moving, &trace.initial_noise, 0.0).map_err(err)?;
    check(out == raw, || "N=1 Euler output differs from the raw prediction".into())?;

    let ig = SamplerConfig { seed: 9, ..SamplerConfig::with_steps(4) };
    let (_, trace) = sample_traced(&mut model, &fixed, &moving, &ig, &loss).map_err(err)?;
    check(trace.steps[1].entering == trace.steps[0].prediction, || "IG step-1 state != step-0 prediction".into())?;

    let sde = SamplerConfig { eta: 0.0, use_heun: false, use_guidance: false, seed: 4, ..SamplerConfig::with_steps(5) };
    let ode = SamplerConfig { use_sde: false, ..sde.clone() };
    let a = sample(&mut model, &fixed, &moving, &sde, &loss).map_err(err)?;
    let b = sample(&mut model, &fixed, &moving, &ode, &loss).map_err(err)?;
    check(a == b, || "eta=0 SDE path differs from the ODE path".into())?;
    Ok(format!("max velocity error {worst_velocity:.1e}; N=1, IG and eta=0 checks bitwise"))
}

// 2 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let d = Dims::new(8, 8, 4);
    let (fixed, moving) = (smooth_image(d, 0.0), smooth_image(d, 0.3));
    // Loss gradient entries go down to ~1e-6; at h = 1e-6 the difference
    // quotient is dominated by roundoff of the O(1) loss value.
    let h_loss = 1e-5;
    let mut loss_worst: f64 = 0.0;
    for (seed, loss) in [
        (1, LossConfig::default()),
        (2, LossConfig { ncc_window: 5, grad_weight: 0.5, ..LossConfig::default() }),
    ] {
        let ddf = random_field(d, Spacing::isotropic(), 0.8, seed);
        let g = reg_loss_grad_ddf(&moving, &fixed, &ddf, &loss).map_err(err)?;
        for i in 0..ddf.data.len() {
            let (mut p, mut m) = (ddf.clone(), ddf.clone());
            p.data[i] += h_loss;
            m.data[i] -= h_loss;
            let fd = (reg_loss(&moving, &fixed, &p, &loss).map_err(err)? - reg_loss(&moving, &fixed, &m, &loss).map_err(err)?)
                / (2.0 * h_loss);
            loss_worst = loss_worst.max((fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-6));
        }
    }
    check(loss_worst < 1e-4, || format!("loss gradient relative error {loss_worst:e}"))?;

    let p = live_params(&tiny_net(), 12);
    let psi = random_field(d, Spacing::isotropic(), 1.5, 13);
    let upstream = random_field(d, Spacing::isotropic(), 1.0, 14);
    let t = 0.35;
    let mut ws = Workspace::new();
    let objective = |q: &NetworkParameters, ws: &mut Workspace| -> Result<f64, String> {
        let out = forward(q, &fixed, &moving, &psi, t, ws).map_err(err)?;
        Ok(out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum())
    };
    objective(&p, &mut ws)?;
    let grads = backward(&p, &fixed, &moving, &ws, &upstream).map_err(err)?;
    let h = 1e-6;
    let mut param_worst: f64 = 0.0;
    for i in 0..p.count() {
        let mut q = p.clone();
        q.values_mut()[i] += h;
        let up = objective(&q, &mut ws)?;
        q.values_mut()[i] -= 2.0 * h;
        let down = objective(&q, &mut ws)?;
        let fd = (up - down) / (2.0 * h);
        let an = grads.values()[i];
        param_worst = param_worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    check(param_worst < 1e-3, || format!("parameter gradient relative error {param_worst:e}"))?;
    Ok(format!(
        "loss grad rel err {loss_worst:.1e} (< 1e-4), {} parameter grads rel err {param_worst:.1e} (< 1e-3)",
        p.count()
    ))
}

// 3 -------------------------------------------------------------------------

fn warp_and_jacobian() -> Outcome {
    let d = Dims::new(12, 10, 6);
    let sp = Spacing([1.5, 1.5, 3.15]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Volume::from_fn(d, sp, |_, _, _| rng.gen_range(-1.0..1.0));
    let warped = warp_image(&image, &DisplacementField::zeros(d, sp)).map_err(err)?;
    check(warped == image, || "identity warp is not bitwise identity".into())?;

    let a = [[1.1, 0.2, -0.05], [-0.1, 0.9, 0.15], [0.05, 0.1, 1.2]];
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let affine = DisplacementField::from_fn(d, sp, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let mut u = [0.3, -0.7, 0.2];
        for (r, ur) in u.iter_mut().enumerate() {
            *ur += (0..3).map(|c| (a[r][c] - f64::from(u8::from(r == c))) * p[c]).sum::<f64>();
        }
        u
    });
    let j = jacobian_map(&affine);
    let mut worst: f64 = 0.0;
    for z in 1..d.nz - 1 {
        for y in 1..d.ny - 1 {
            for x in 1..d.nx - 1 {
                worst = worst.max((j.at(x, y, z) - det).abs());
            }
        }
    }
    check(worst <= 1e-10, || format!("affine Jacobian off det(A) by {worst:e}"))?;

    let cases = generate_dataset(&PhantomConfig::default(), 4, &mut ChaCha8Rng::seed_from_u64(33)).map_err(err)?;
    let min_j = cases
        .iter()
        .flat_map(|c| jacobian_map(&c.gt_field).data)
        .fold(f64::INFINITY, f64::min);
    check(min_j > 0.0, || format!("phantom ground-truth Jacobian reaches {min_j}"))?;

    let sigma = Spacing([1.5, 1.5, 3.15]).noise_sigma();
    check(
        sigma[0] == 5.0 && sigma[1] == 5.0 && (sigma[2] - 2.3810).abs() < 5e-5,
        || format!("noise sigma {sigma:?}"),
    )?;
    Ok(format!(
        "affine |J - det A| {worst:.1e}; min phantom J {min_j:.3}; sigma ({}, {}, {:.4})",
        sigma[0], sigma[1], sigma[2]
    ))
}

// 4 -------------------------------------------------------------------------

fn training_contracts() -> Outcome {
    let cases = small_phantoms(10, 44);
    let pairs: Vec<ImagePair> = cases.iter().map(pair_of).collect();
    let (train_set, val_set) = pairs.split_at(8);
    let net = NetworkConfig { mlp_hidden: 8, ..tiny_net() };
    let init = init_params(&net, &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;

    // Each step must change the teacher by exactly one EMA update.
    let reflow = TrainConfig { warmup_epochs: 0, augment: false, ..TrainConfig::default() };
    let mut state = TrainState::new(init.clone(), &reflow);
    for pair in train_set {
        let mut expected = state.teacher.clone();
        train_step(&mut state, pair, &reflow).map_err(err)?;
        ema_update(&mut expected, &state.student, reflow.ema_mu).map_err(err)?;
        check(state.teacher == expected, || "teacher moved by more than its EMA update".into())?;
    }
    check(state.student != init, || "student did not move".into())?;

    let cfg = TrainConfig { warmup_epochs: 2, ..TrainConfig::default() };
    let mut state = TrainState::new(init.clone(), &cfg);
    for epoch in 1..=3 {
        state.epoch = epoch;
        let before = state.teacher_calls();
        for pair in train_set {
            train_step(&mut state, pair, &cfg).map_err(err)?;
        }
        let calls = state.teacher_calls() - before;
        let expected = if epoch <= 2 { 0 } else { train_set.len() };
        check(calls == expected, || format!("epoch {epoch}: {calls} teacher calls, expected {expected}"))?;
    }

    let mu = 0.99;
    let target = live_params(&net, 2);
    let start = init.clone();
    let mut teacher = start.clone();
    let mut worst: f64 = 0.0;
    for k in 1..=200 {
        ema_update(&mut teacher, &target, mu).map_err(err)?;
        let decay = mu.powi(k);
        for ((t, s), t0) in teacher.values().iter().zip(target.values()).zip(start.values()) {
            worst = worst.max(((t - s) - decay * (t0 - s)).abs());
        }
    }
    check(worst <= 1e-6, || format!("EMA decay off 0.99^k by {worst:e}"))?;

    let run = |dir: &Path| -> Result<(Vec<u8>, Vec<u8>), String> {
        let cfg = TrainConfig { epochs: 3, warmup_epochs: 2, lr: 1e-3, ..TrainConfig::default() };
        let opts = FitOptions { checkpoint_dir: Some(dir), on_epoch: None };
        fit(init.clone(), train_set, val_set, &cfg, opts).map_err(err)?;
        let read = |f: &str| std::fs::read(dir.join(f)).map_err(err);
        Ok((read("student.frwt")?, read("teacher.frwt")?))
    };
    let tmp = tempfile::tempdir().map_err(err)?;
    let a = run(&tmp.path().join("a"))?;
    let b = run(&tmp.path().join("b"))?;
    check(a == b, || "fixed-seed runs produced different checkpoints".into())?;
    Ok(format!(
        "teacher moved only by EMA; warmup teacher calls 0; EMA error {worst:.1e}; {} byte checkpoints identical",
        a.0.len()
    ))
}

// 6 -------------------------------------------------------------------------

fn annulus(d: Dims, sp: Spacing, center: (f64, f64), r_in: f64, r_out: f64) -> LabelMap {
    LabelMap::from_fn(d, sp, |x, y, _| {
        let r = (x as f64 * sp.0[0] - center.0).hypot(y as f64 * sp.0[1] - center.1);
        if r < r_in {
            Class::Lv
        } else if r < r_out {
            Class::Myo
        } else {
            Class::Background
        }
    })
}

fn clinical_metrics() -> Outcome {
    let cases = generate_dataset(&PhantomConfig::default(), 20, &mut ChaCha8Rng::seed_from_u64(66)).map_err(err)?;
    let mut worst_dice = [1.0f64; 3];
    let mut ef_err = 0.0;
    for case in &cases {
        let warped = warp_labels(&case.es_labels, &case.gt_field).map_err(err)?;
        for (k, class) in Class::FOREGROUND.into_iter().enumerate() {
            worst_dice[k] = worst_dice[k].min(dice(&warped, &case.ed_labels, class));
        }
        // The warped ES segmentation stands in for ED.
        let estimate = ejection_fraction(&warped, &case.es_labels, Class::Lv).map_err(err)?;
        let analytic = (estimate - case.truth.ef_lv).abs();
        ef_err += analytic / cases.len() as f64;
    }
    check(worst_dice.iter().all(|&v| v >= 0.93), || format!("ground-truth Dice {worst_dice:?}"))?;
    check(ef_err <= 2.0, || format!("LVEF MAE {ef_err:.3} pp"))?;

    let mut mt_worst: f64 = 0.0;
    let d = Dims::new(64, 64, 4);
    for (sp, c, r_in, r_out) in [
        (Spacing([1.5, 1.5, 3.15]), (47.3, 48.1), 13.0, 24.0),
        (Spacing([1.5, 1.5, 3.15]), (45.0, 50.2), 17.5, 27.0),
        (Spacing([1.0, 1.0, 1.0]), (31.6, 32.4), 9.0, 16.5),
        (Spacing([1.25, 1.25, 2.0]), (40.0, 39.0), 12.0, 20.0),
    ] {
        let mt = myocardial_thickness(&annulus(d, sp, c, r_in, r_out)).map_err(err)?;
        mt_worst = mt_worst.max((mt - (r_out - r_in)).abs());
    }
    check(mt_worst <= 0.25, || format!("MT off by {mt_worst:.3} mm"))?;
    Ok(format!(
        "min Dice RV/Myo/LV {:.3}/{:.3}/{:.3}; LVEF MAE {ef_err:.2} pp; MT error {mt_worst:.3} mm",
        worst_dice[0], worst_dice[1], worst_dice[2]
    ))
}

// 8 -------------------------------------------------------------------------

fn golden(name: &str) -> Result<Vec<u8>, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn formats() -> Outcome {
    let sp = Spacing([1.5, 1.5, 3.15]);
    let bytes = golden("volume.fvol")?;
    let v = fvol::decode_volume(&bytes).map_err(err)?;
    check(v.data == [0.0, 0.5, -1.25, 2.0, 3.75, -0.0625] && v.dims == Dims::new(3, 2, 1), || "golden volume content".into())?;
    check(v.spacing.0.map(|s| s as f32) == sp.0.map(|s| s as f32), || "golden volume spacing".into())?;
    check(fvol::encode_volume(&v) == bytes, || "volume re-encode differs from golden".into())?;

    let bytes = golden("field.fvol")?;
    let f = fvol::decode_field(&bytes).map_err(err)?;
    check(f.at(1, 0, 0) == [-1.0, 0.5, 4.0] && f.spacing.0 == [2.0, 1.0, 0.5], || "golden field content".into())?;
    check(fvol::encode_field(&f) == bytes, || "field re-encode differs from golden".into())?;

    let bytes = golden("labels.fvol")?;
    let l = fvol::decode_labels(&bytes).map_err(err)?;
    check(l.data == [0, 1, 2, 3] && l.at(1, 1, 0) == Class::Lv.code(), || "golden label content".into())?;
    check(fvol::encode_labels(&l) == bytes, || "labels re-encode differs from golden".into())?;

    let bytes = golden("tiny.frwt")?;
    let cfg = NetworkConfig {
        n_scales: 2,
        channels: vec![1, 2],
        corr_radius: 1,
        time_embed_dim: 2,
        mlp_hidden: 2,
        seed: 7,
    };
    let mut params = NetworkParameters::zeros(&cfg).map_err(err)?;
    for (i, v) in params.values_mut().iter_mut().enumerate() {
        *v = (i as f64 - 100.0) * 0.125;
    }
    check(checkpoint::encode(&params) == bytes, || "FRWT encoding differs from golden".into())?;
    check(checkpoint::decode(&bytes).map_err(err)? == params, || "FRWT golden decodes differently".into())?;

    // File round trips on realistic content.
    let tmp = tempfile::tempdir().map_err(err)?;
    let case = &generate_dataset(&PhantomConfig::default(), 1, &mut ChaCha8Rng::seed_from_u64(8)).map_err(err)?[0];
    let files: [(&str, Vec<u8>); 3] = [
        ("image", fvol::encode_volume(&case.es_image)),
        ("field", fvol::encode_field(&case.gt_field)),
        ("labels", fvol::encode_labels(&case.ed_labels)),
    ];
    for (name, encoded) in files {
        let path = tmp.path().join(name);
        fvol::write_atomic(&path, &encoded).map_err(err)?;
        let read = std::fs::read(&path).map_err(err)?;
        let again = match name {
            "image" => fvol::encode_volume(&fvol::read_volume(&path).map_err(err)?),
            "field" => fvol::encode_field(&fvol::read_field(&path).map_err(err)?),
            _ => fvol::encode_labels(&fvol::read_labels(&path).map_err(err)?),
        };
        check(read == encoded && again == encoded, || format!("{name} FVOL round trip differs"))?;
    }
    let net = init_params(&NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).map_err(err)?;
    let path = tmp.path().join("net.frwt");
    checkpoint::save(&path, &net).map_err(err)?;
    let back = checkpoint::load(&path).map_err(err)?;
    check(back == net && checkpoint::encode(&back) == std::fs::read(&path).map_err(err)?, || "FRWT round trip differs".into())?;
    Ok(format!("4 golden files match; FVOL/FRWT round trips byte-identical ({} parameters)", net.count()))
}

// 5 and 7 --------------------------------------------------------------------

struct Desk {
    model: NetworkParameters,
    test: Vec<PhantomCase>,
    train_seconds: f64,
}

fn train_desk() -> Result<Desk, String> {
    let cases = generate_dataset(&PhantomConfig::default(), 200, &mut ChaCha8Rng::seed_from_u64(2024)).map_err(err)?;
    let pairs: Vec<ImagePair> = cases.iter().map(pair_of).collect();
    let net = NetworkConfig::default();
    let init = init_params(&net, &mut ChaCha8Rng::seed_from_u64(net.seed)).map_err(err)?;
    let cfg = TrainConfig { epochs: DESK_EPOCHS, lr: DESK_LR, ..TrainConfig::default() };
    let started = Instant::now();
    let mut log = |r: &ddfflow::train::EpochRecord| {
        println!(
            "    epoch {:>2}: train {:.5} val {:.5} ({:.0} s)",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        );
    };
    let opts = FitOptions { checkpoint_dir: None, on_epoch: Some(&mut log) };
    let outcome = fit(init, &pairs[..160], &pairs[160..180], &cfg, opts).map_err(err)?;
    let train_seconds = started.elapsed().as_secs_f64();
    Ok(Desk {
        model: outcome.student,
        test: cases[180..].to_vec(),
        train_seconds,
    })
}

fn mean_dice(model: &mut Model, cases: &[PhantomCase], cfg: &SamplerConfig) -> Result<(f64, f64), String> {
    let loss = LossConfig::default();
    let (mut d, mut j) = (0.0, 0.0);
    for (k, case) in cases.iter().enumerate() {
        let sc = SamplerConfig { seed: cfg.seed + k as u64, ..cfg.clone() };
        let (fixed, moving) = case.es_to_ed();
        let field = sample(model, fixed, moving, &sc, &loss).map_err(err)?;
        let warped = warp_labels(&case.es_labels, &field).map_err(err)?;
        d += dice_foreground(&warped, &case.ed_labels) / cases.len() as f64;
        j += jacobian_stats(&field).pct_nonpositive / cases.len() as f64;
    }
    Ok((d, j))
}

fn desk_scale(desk: &Desk) -> Outcome {
    let mut model = Model::new(desk.model.clone());
    let (d1, _) = mean_dice(&mut model, &desk.test, &SamplerConfig::with_steps(1))?;
    let (d2, _) = mean_dice(&mut model, &desk.test, &SamplerConfig::with_steps(2))?;
    let (d10, j10) = mean_dice(&mut model, &desk.test, &SamplerConfig::with_steps(10))?;
    let off = SamplerConfig { use_guidance: false, ..SamplerConfig::with_steps(10) };
    let (d10_off, _) = mean_dice(&mut model, &desk.test, &off)?;
    let zero: f64 = desk.test.iter().map(|c| dice_foreground(&c.es_labels, &c.ed_labels)).sum::<f64>() / desk.test.len() as f64;
    let summary = format!(
        "train {:.0} s; Dice zero-field {zero:.4}, N=1 {d1:.4}, N=2 {d2:.4}, N=10 {d10:.4} (guidance off {d10_off:.4}); %J<=0 at N=10 {j10:.3}",
        desk.train_seconds
    );
    let mut failures = Vec::new();
    if desk.train_seconds > DESK_BUDGET_SECONDS {
        failures.push(format!("training took {:.0} s > {DESK_BUDGET_SECONDS} s", desk.train_seconds));
    }
    if d1 < 0.80 {
        failures.push(format!("(a) N=1 Dice {d1:.4} < 0.80"));
    }
    if d2 < d1 - 0.005 {
        failures.push(format!("(b) N=2 Dice {d2:.4} < N=1 {d1:.4} - 0.005"));
    }
    if d10 < d2 - 0.005 {
        failures.push(format!("(b) N=10 Dice {d10:.4} < N=2 {d2:.4} - 0.005"));
    }
    if j10 > 2.0 {
        failures.push(format!("(c) %J<=0 {j10:.3} > 2"));
    }
    if d10 - d10_off < -0.002 {
        failures.push(format!("(d) guidance changes Dice by {:.4}", d10 - d10_off));
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

fn instance_optimisation(desk: &Desk) -> Outcome {
    let mut model = Model::new(desk.model.clone());
    let loss = LossConfig::default();
    let mut notes = Vec::new();
    for steps in [1, 2] {
        let (mut before, mut after) = (0.0, 0.0);
        let cases = &desk.test[..5];
        for (k, case) in cases.iter().enumerate() {
            let (fixed, moving) = case.es_to_ed();
            let sc = SamplerConfig { seed: k as u64, ..SamplerConfig::with_steps(steps) };
            let init = sample(&mut model, fixed, moving, &sc, &loss).map_err(err)?;
            let (refined, trajectory) = instance_optimise(fixed, moving, &init, 10, 0.01, &loss).map_err(err)?;
            check(trajectory.len() == 11, || "trajectory length".into())?;
            let (first, _) = reg_loss_and_grad(moving, fixed, &init, &loss).map_err(err)?;
            check(first == trajectory[0], || "trajectory does not start at the initial loss".into())?;
            if let Some(w) = trajectory.windows(2).find(|w| w[1] > w[0]) {
                return Err(format!("N={steps} case {}: loss rose {} -> {}", case.id, w[0], w[1]));
            }
            let dice_of = |f: &DisplacementField| -> Result<f64, String> {
                Ok(dice_foreground(&warp_labels(&case.es_labels, f).map_err(err)?, &case.ed_labels))
            };
            before += dice_of(&init)? / cases.len() as f64;
            after += dice_of(&refined)? / cases.len() as f64;
        }
        check(after - before >= -0.002, || format!("N={steps}: Dice {before:.4} -> {after:.4}"))?;
        notes.push(format!("N={steps}: Dice {before:.4} -> {after:.4}"));
    }
    Ok(format!("losses non-increasing; {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    // Any argument that is not a flag acts as a libtest name filter; skip then.
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return;
    }

    let mut failed = 0;
    let mut report = |k: usize, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {k} PASS {name} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {k} FAIL {name} [{secs:.1} s]: {detail}");
            }
        }
    };
    let quick: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "algebraic sampler suite", algebraic_sampler),
        (2, "gradient correctness", gradients),
        (3, "warp/Jacobian oracles", warp_and_jacobian),
        (4, "training loop contracts", training_contracts),
        (6, "clinical-metric oracle", clinical_metrics),
        (8, "format round-trips", formats),
    ];
    for (k, name, f) in quick {
        if wanted(k) {
            let started = Instant::now();
            report(k, name, started, f());
        }
    }
    if wanted(5) || wanted(7) {
        let started = Instant::now();
        println!("training the desk-scale model ({DESK_EPOCHS} epochs, lr {DESK_LR})");
        match train_desk() {
            Ok(desk) => {
                if wanted(5) {
                    report(5, "desk-scale end-to-end", started, desk_scale(&desk));
                }
                if wanted(7) {
                    let started = Instant::now();
                    report(7, "instance optimisation", started, instance_optimisation(&desk));
                }
            }
            Err(e) => {
                for k in [5, 7].into_iter().filter(|&k| wanted(k)) {
                    report(k, "desk-scale training", started, Err(e.clone()));
                }
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
