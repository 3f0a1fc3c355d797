use super::*;
use crate::network::{init_params, NetworkConfig};
use crate::volume::{Dims, Spacing};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::Rng;

struct Constant {
    field: DisplacementField,
    calls: usize,
}

impl FieldPredictor for Constant {
    fn predict_field(&mut self, _: &Volume, _: &Volume, _: &DisplacementField, _: f64) -> Result<DisplacementField> {
        self.calls += 1;
        Ok(self.field.clone())
    }
}

/// Pulls the state halfway towards a fixed target; the output depends on the
/// input so Heun and Euler differ.
struct Shrink {
    target: DisplacementField,
}

impl FieldPredictor for Shrink {
    fn predict_field(&mut self, _: &Volume, _: &Volume, psi: &DisplacementField, t: f64) -> Result<DisplacementField> {
        Ok(psi.scale(0.5 * (1.0 - t)).axpy(1.0, &self.target.scale(0.5 + 0.5 * t)))
    }
}

fn blob(dims: Dims, spacing: Spacing, cx: f64, cy: f64, r: f64) -> Volume {
    Volume::from_fn(dims, spacing, |x, y, _| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        0.1 + 0.8 / (1.0 + ((d - r) / 1.5).exp())
    })
}

fn pair(dims: Dims) -> (Volume, Volume) {
    let s = Spacing::new(1.5, 1.5, 3.0).unwrap();
    let c = dims.nx as f64 / 2.0;
    (blob(dims, s, c, c, 7.0), blob(dims, s, c + 1.5, c - 1.0, 6.0))
}

fn random_field(dims: Dims, scale: f64, seed: u64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DisplacementField::from_fn(dims, Spacing::isotropic(), |_, _, _| {
        [scale * rng.gen_range(-1.0..1.0), scale * rng.gen_range(-1.0..1.0), scale * rng.gen_range(-1.0..1.0)]
    })
}

fn smooth_field(dims: Dims, amp: f64) -> DisplacementField {
    DisplacementField::from_fn(dims, Spacing::new(1.5, 1.5, 3.0).unwrap(), |x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        [amp * (0.2 * y).sin(), amp * (0.15 * x).cos(), 0.1 * amp * (0.3 * z).sin()]
    })
}

#[test]
fn interpolation_endpoints_are_exact() {
    let d = Dims::new(4, 4, 2);
    let (a, e) = (random_field(d, 3.0, 1), random_field(d, 2.0, 2));
    assert_eq!(interpolate(&a, &e, 0.0).unwrap(), e);
    assert_eq!(interpolate(&a, &e, 1.0).unwrap(), a);
    let four = DisplacementField::constant(d, Spacing::isotropic(), [4.0, 0.0, 0.0]);
    let zero = DisplacementField::zeros(d, Spacing::isotropic());
    assert_eq!(
        interpolate(&four, &zero, 0.25).unwrap(),
        DisplacementField::constant(d, Spacing::isotropic(), [1.0, 0.0, 0.0])
    );
    assert!(interpolate(&a, &e, 1.5).is_err());
}

#[test]
fn velocity_examples_and_domain() {
    let d = Dims::new(3, 3, 3);
    let (a, b) = (random_field(d, 1.0, 3), random_field(d, 1.0, 4));
    assert_eq!(velocity(&a, &b, 0.0).unwrap(), a.axpy(-1.0, &b));
    assert!(velocity(&a, &a, 0.3).unwrap().data.iter().all(|&v| v == 0.0));
    let one = DisplacementField::constant(d, Spacing::isotropic(), [1.0; 3]);
    let zero = DisplacementField::zeros(d, Spacing::isotropic());
    assert_eq!(
        velocity(&one, &zero, 0.5).unwrap(),
        DisplacementField::constant(d, Spacing::isotropic(), [2.0; 3])
    );
    assert!(matches!(velocity(&a, &b, 1.0), Err(Error::TimeDomain { .. })));
    assert!(matches!(velocity(&a, &b, 1.2), Err(Error::TimeDomain { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn straight_paths_have_constant_velocity(seed in 0u64..10_000, t in 0.0f64..0.999) {
        let d = Dims::new(3, 2, 2);
        let (psi1, eps) = (random_field(d, 10.0, seed), random_field(d, 10.0, seed + 1));
        let psi_t = interpolate(&psi1, &eps, t).unwrap();
        let v = velocity(&psi1, &psi_t, t).unwrap();
        let truth = psi1.axpy(-1.0, &eps);
        prop_assert!(v.max_abs_diff(&truth) < 1e-6);
    }

    #[test]
    fn churn_stays_within_the_cap(t in 0.0f64..1.0, eta in 0.0f64..100.0, n in 1usize..50) {
        let (sigma, sigma_hat) = churn_sigma(t, eta, n);
        prop_assert!(sigma_hat >= sigma);
        prop_assert!(sigma_hat <= sigma * std::f64::consts::SQRT_2 + 1e-12);
    }
}

#[test]
fn churn_examples() {
    assert_eq!(churn_sigma(0.3, 0.0, 10), (0.7, 0.7));
    let (s, sh) = churn_sigma(0.5, 1e6, 10);
    assert_eq!(s, 0.5);
    assert!((sh - 0.5 * std::f64::consts::SQRT_2).abs() < 1e-15);
    let (_, sh) = churn_sigma(1.0 - 1e-12, 1e6, 10);
    assert!(sh < 1e-11);
}

#[test]
fn noise_injection() {
    let d = Dims::new(4, 4, 2);
    let (psi, eps) = (random_field(d, 1.0, 5), random_field(d, 1.0, 6));
    assert_eq!(inject_noise(&psi, 0.4, 0.4, &eps).unwrap(), psi);
    let out = inject_noise(&psi, 0.5, 0.5 * std::f64::consts::SQRT_2, &eps).unwrap();
    assert!(out.max_abs_diff(&psi.axpy(0.5, &eps)) < 1e-12);
    assert!(inject_noise(&psi, 0.5, 0.4, &eps).is_err());
}

#[test]
fn constant_predictor_is_integrated_exactly() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let target = random_field(d, 4.0, 7);
    let loss = LossConfig::default();
    for n in [1, 2, 3, 10] {
        let mut euler = Constant { field: target.clone(), calls: 0 };
        let out = sample(&mut euler, &f, &m, &SamplerConfig::plain(n), &loss).unwrap();
        assert!(out.max_abs_diff(&target) < 1e-6, "euler n={n}");
        assert_eq!(euler.calls, n);

        let cfg = SamplerConfig {
            use_heun: true,
            ..SamplerConfig::plain(n)
        };
        let mut heun = Constant { field: target.clone(), calls: 0 };
        let (out_heun, trace) = sample_traced(&mut heun, &f, &m, &cfg, &loss).unwrap();
        assert!(out_heun.max_abs_diff(&out) < 1e-6, "heun n={n}");
        assert_eq!(heun.calls, 2 * n - 1);
        let (_, euler_trace) = sample_traced(&mut euler, &f, &m, &SamplerConfig::plain(n), &loss).unwrap();
        for (a, b) in trace.steps.iter().zip(&euler_trace.steps) {
            assert!(a.next.max_abs_diff(&b.next) < 1e-6);
        }
    }
}

#[test]
fn single_plain_step_returns_the_prediction_from_noise() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let mut model = Shrink { target: random_field(d, 2.0, 8) };
    let (out, trace) = sample_traced(&mut model, &f, &m, &SamplerConfig::plain(1), &LossConfig::default()).unwrap();
    let expected = model.predict_field(&f, &m, &trace.initial_noise, 0.0).unwrap();
    assert_eq!(out, expected);
    assert_eq!(trace.steps[0].entering, trace.initial_noise);
}

#[test]
fn initial_guess_replaces_the_state_before_churn() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let mut model = Shrink { target: random_field(d, 2.0, 9) };
    let cfg = SamplerConfig {
        use_guidance: false,
        ..SamplerConfig::with_steps(2)
    };
    let (_, trace) = sample_traced(&mut model, &f, &m, &cfg, &LossConfig::default()).unwrap();
    assert_eq!(trace.steps[1].entering, trace.steps[0].prediction);
    assert_ne!(trace.steps[1].churned, trace.steps[1].entering);

    let no_ig = SamplerConfig { use_ig: false, ..cfg };
    let (_, trace) = sample_traced(&mut model, &f, &m, &no_ig, &LossConfig::default()).unwrap();
    assert_ne!(trace.steps[1].entering, trace.steps[0].prediction);
}

#[test]
fn heun_differs_from_euler_on_state_dependent_predictors() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let mut model = Shrink { target: random_field(d, 2.0, 10) };
    let loss = LossConfig::default();
    let euler = sample(&mut model, &f, &m, &SamplerConfig::plain(3), &loss).unwrap();
    let heun_cfg = SamplerConfig {
        use_heun: true,
        ..SamplerConfig::plain(3)
    };
    let heun = sample(&mut model, &f, &m, &heun_cfg, &loss).unwrap();
    assert!(heun.max_abs_diff(&euler) > 1e-6);
}

#[test]
fn sde_is_seeded_and_reduces_to_ode_without_churn() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let mut model = Shrink { target: random_field(d, 2.0, 11) };
    let loss = LossConfig::default();
    let cfg = SamplerConfig {
        use_guidance: false,
        ..SamplerConfig::with_steps(4)
    };
    let a = sample(&mut model, &f, &m, &cfg, &loss).unwrap();
    let b = sample(&mut model, &f, &m, &cfg, &loss).unwrap();
    assert_eq!(a, b);
    let other_seed = SamplerConfig { seed: 1, ..cfg.clone() };
    assert_ne!(sample(&mut model, &f, &m, &other_seed, &loss).unwrap(), a);

    let sde = SamplerConfig { eta: 0.0, ..cfg.clone() };
    let ode = SamplerConfig {
        eta: 0.0,
        use_sde: false,
        ..cfg
    };
    assert_eq!(
        sample(&mut model, &f, &m, &sde, &loss).unwrap(),
        sample(&mut model, &f, &m, &ode, &loss).unwrap()
    );
}

#[test]
fn sampler_time_grid_stays_below_one() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let mut model = Shrink { target: random_field(d, 1.0, 12) };
    let (_, trace) = sample_traced(&mut model, &f, &m, &SamplerConfig::with_steps(7), &LossConfig::default()).unwrap();
    assert_eq!(trace.steps.len(), 7);
    assert!(trace.steps.iter().all(|s| s.t < 1.0));
    assert_eq!(trace.steps[6].t, 6.0 / 7.0);
}

#[test]
fn invalid_sampler_configs_are_rejected() {
    let d = Dims::new(8, 8, 4);
    let (f, m) = pair(d);
    let mut model = Shrink { target: random_field(d, 1.0, 13) };
    let loss = LossConfig::default();
    for cfg in [
        SamplerConfig::with_steps(0),
        SamplerConfig { eta: -1.0, ..SamplerConfig::default() },
        SamplerConfig { lambda_g: f64::NAN, ..SamplerConfig::default() },
    ] {
        assert!(sample(&mut model, &f, &m, &cfg, &loss).is_err());
    }
    assert_eq!(SamplerConfig::default().eta, 10.0 * (std::f64::consts::SQRT_2 - 1.0));
}

#[test]
fn guidance_is_off_at_zero_weight_and_descends_at_default_weight() {
    let d = Dims::new(32, 32, 8);
    let (f, m) = pair(d);
    let cfg = NetworkConfig::default();
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut model = Model::new(params);
    let loss = LossConfig::default();
    let psi = smooth_field(d, 1.0);
    let plain = model.predict(&f, &m, &psi, 0.2).unwrap();
    let unguided = guided_forward(&mut model, &f, &m, &psi, 0.2, 0.0, &loss).unwrap();
    assert_eq!(plain, unguided);

    let guided = guided_forward(&mut model, &f, &m, &psi, 0.2, 0.05, &loss).unwrap();
    assert_eq!(guided.dims, d);
    let before = reg_loss(&m, &f, &plain, &loss).unwrap();
    let after = reg_loss(&m, &f, &guided, &loss).unwrap();
    assert!(after <= before + 1e-6, "{after} > {before}");
    assert!(after < before);
}

#[test]
fn instance_optimisation_descends_monotonically() {
    let d = Dims::new(32, 32, 8);
    let (f, m) = pair(d);
    let loss = LossConfig::default();
    let start = smooth_field(d, 0.5);

    let (same, traj) = instance_optimise(&f, &m, &start, 0, 0.01, &loss).unwrap();
    assert_eq!(same, start);
    assert_eq!(traj.len(), 1);
    let (frozen, _) = instance_optimise(&f, &m, &start, 5, 0.0, &loss).unwrap();
    assert_eq!(frozen, start);

    let (_, traj) = instance_optimise(&f, &m, &start, 10, 0.01, &loss).unwrap();
    assert_eq!(traj.len(), 11);
    for w in traj.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{traj:?}");
    }
    assert!(traj[10] < traj[0]);
}
