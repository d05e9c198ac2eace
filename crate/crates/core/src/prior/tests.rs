use approx::assert_relative_eq;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::body::{default_asset, BodyParams, PARAM_DIM};
use crate::losses::{PairFlat, PairPrior};

struct Stub {
    norm: ParamNormalizer,
    kind: StubKind,
}

enum StubKind {
    Zero,
    Echo,
    Constant(Vec<f64>),
}

impl Stub {
    fn new(kind: StubKind) -> Self {
        Stub { norm: ParamNormalizer::identity(), kind }
    }
}

impl Denoise for Stub {
    fn normalizer(&self) -> &ParamNormalizer {
        &self.norm
    }

    fn predict_batch(&self, x_t: &Array2<f64>, _t: &[usize]) -> Array2<f64> {
        match &self.kind {
            StubKind::Zero => Array2::zeros(x_t.raw_dim()),
            StubKind::Echo => x_t.clone(),
            StubKind::Constant(c) => Array2::from_shape_fn(x_t.raw_dim(), |(_, j)| c[j]),
        }
    }
}

fn random_params(rng: &mut ChaCha8Rng) -> BodyParams {
    let mut flat = [0.0; PARAM_DIM];
    for v in &mut flat {
        *v = rng.random_range(-1.0..1.0);
    }
    BodyParams::from_flat(&flat, rng.random_range(0.0..1.0))
}

fn random_flat(rng: &mut ChaCha8Rng) -> PairFlat {
    [random_params(rng).to_flat(), random_params(rng).to_flat()]
}

#[test]
fn schedule_products() {
    let one = make_schedule(1, 0.5, 0.5).unwrap();
    assert_eq!(one.sigma_prime, vec![1.0, 0.5]);
    let two = DiffusionSchedule::from_rates(vec![0.5, 0.5]).unwrap();
    assert_eq!(two.sigma_prime[2], 0.25);

    let s = DiffusionSchedule::default();
    assert_eq!(s.steps(), 100);
    assert_eq!(s.sigma_prime[0], 1.0);
    assert_relative_eq!(s.rate(1), 1e-4);
    assert_relative_eq!(s.rate(100), 0.02);
    let mut acc = 1.0;
    for t in 1..=100 {
        acc *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 99.0);
        assert_relative_eq!(s.sigma_prime[t], acc, max_relative = 1e-12);
        assert!(s.sigma_prime[t] < s.sigma_prime[t - 1]);
    }
    assert!(s.sigma_prime[100] > 0.0);
}

#[test]
fn schedule_rejects_bad_rates() {
    assert!(make_schedule(0, 1e-4, 0.02).is_err());
    assert!(make_schedule(10, 0.0, 0.02).is_err());
    assert!(make_schedule(10, 0.03, 0.02).is_err());
    assert!(make_schedule(10, 1e-4, 1.0).is_err());
    assert!(DiffusionSchedule::from_rates(vec![]).is_err());
}

#[test]
fn diffuse_formula() {
    let s = DiffusionSchedule::from_rates(vec![0.75]).unwrap();
    assert_eq!(diffuse(&[1.0], 1, &[0.0], &s), vec![0.5]);
    assert_relative_eq!(diffuse(&[1.0], 1, &[1.0], &s)[0], 0.5 + 0.75f64.sqrt(), epsilon = 1e-12);
    let x0 = vec![0.1, -3.7, 1e-300];
    let out = diffuse(&x0, 0, &[5.0, 5.0, 5.0], &DiffusionSchedule::default());
    assert_eq!(out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), x0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn normalizer_floors_constant_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<Vec<f64>> = (0..10).map(|_| pair_to_raw(&[random_params(&mut rng), BodyParams::default()])).collect();
    let n = ParamNormalizer::fit(&raw).unwrap();
    assert!(n.std[PARAM_DIM..].iter().all(|s| *s == 1.0));
    assert!(n.std[..PARAM_DIM].iter().all(|s| *s > 0.1));
    assert!(ParamNormalizer::fit(&[]).is_err());
}

#[test]
fn time_embedding_layout() {
    let e = time_embedding(0, 8);
    assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let e = time_embedding(3, 4);
    assert_relative_eq!(e[0], 3f64.sin());
    assert_relative_eq!(e[1], (3.0 * 0.01f64).sin());
    assert_relative_eq!(e[3], (3.0 * 0.01f64).cos());
}

fn small_model(seed: u64) -> Denoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Vec<f64>> = (0..8).map(|_| pair_to_raw(&[random_params(&mut rng), random_params(&mut rng)])).collect();
    Denoiser::new(ParamNormalizer::fit(&raw).unwrap(), 2, 8, 4, seed)
}

#[test]
fn network_backward_matches_finite_differences() {
    check_backward(small_model(3));
    let mut skip = small_model(3);
    skip.signal = DiffusionSchedule::default().sigma_prime;
    check_backward(skip);
}

#[test]
fn skip_form_is_near_identity_at_low_noise() {
    let mut model = small_model(5);
    let schedule = DiffusionSchedule::default();
    model.signal = schedule.sigma_prime.clone();
    let x: Vec<f64> = (0..PRIOR_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
    let raw = Array2::from_shape_vec((1, PRIOR_DIM), x.clone()).unwrap();
    let mut direct = model.clone();
    direct.signal.clear();
    let net = direct.predict(&x, 1);
    let a: f64 = schedule.sigma_prime[1];
    let want: Vec<f64> = x.iter().zip(&net).map(|(xi, n)| a.sqrt() * xi + (1.0 - a).sqrt() * n).collect();
    let got = model.predict_batch(&raw, &[1]);
    for (g, w) in got.iter().zip(&want) {
        assert_relative_eq!(*g, *w, epsilon = 1e-12);
    }
    let ckpt = Checkpoint::new(make_schedule(50, 1e-4, 0.02).unwrap(), model, &TrainReport { loss_curve: vec![1.0] });
    assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
}

fn check_backward(model: Denoiser) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_fn((3, PRIOR_DIM), |_| rng.random_range(-1.0..1.0));
    let t = [1, 40, 100];
    let w = Array2::from_shape_fn((3, PRIOR_DIM), |_| rng.random_range(-1.0..1.0));
    let f = |m: &Denoiser| (m.predict_batch(&x, &t) * &w).sum();
    let (_, tape) = model.forward_tape(&x, &t);
    let grads = model.backward(&tape, &w);
    let h = 1e-5;
    for (li, (r, c)) in [(0, (3, 5)), (0, (7, PRIOR_DIM + 1)), (1, (2, 2)), (2, (100, 6))] {
        let mut plus = model.clone();
        plus.layers[li].weight[(r, c)] += h;
        let mut minus = model.clone();
        minus.layers[li].weight[(r, c)] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert_relative_eq!(grads[li].weight[(r, c)], fd, max_relative = 1e-6, epsilon = 1e-9);
    }
    for (li, r) in [(0, 1), (2, 50)] {
        let mut plus = model.clone();
        plus.layers[li].bias[r] += h;
        let mut minus = model.clone();
        minus.layers[li].bias[r] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert_relative_eq!(grads[li].bias[r], fd, max_relative = 1e-6, epsilon = 1e-9);
    }
}

fn fixed_batch(rows: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        x0: Array2::from_shape_fn((rows, PRIOR_DIM), |_| rng.random_range(-0.3..0.3)),
        t: vec![5; rows],
        eps: Array2::zeros((rows, PRIOR_DIM)),
        sigma: vec![[0.0, 0.0]; rows],
    }
}

#[test]
fn group_loss_matches_hand_computation() {
    let batch = fixed_batch(2, 5);
    let mut pred = batch.x0.clone();
    pred[(0, 0)] += 1.0; // phi of person a: group of 3
    pred[(1, 3)] += 2.0; // theta of person a: group of 63
    pred[(1, PARAM_DIM + 70)] += 1.0; // beta of person b: group of 10
    let cfg = TrainConfig { lambda_v2v: 0.0, lambda_beta: 0.5, ..Default::default() };
    let (loss, grad) = batch_loss(&pred, &batch, &ParamNormalizer::identity(), &cfg, default_asset(), true);
    let want = (1.0 / 3.0 + 4.0 / 63.0 + 0.5 / 10.0) / 2.0;
    assert_relative_eq!(loss, want, max_relative = 1e-12);
    let g = grad.unwrap();
    assert_relative_eq!(g[(0, 0)], 2.0 / 3.0 / 2.0, max_relative = 1e-12);
    assert_eq!(g[(0, 1)], 0.0);
}

#[test]
fn surface_loss_gradient_matches_finite_differences() {
    let asset = default_asset();
    let batch = fixed_batch(1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pred = &batch.x0 + &Array2::from_shape_fn((1, PRIOR_DIM), |_| rng.random_range(-0.1..0.1));
    let cfg = TrainConfig { lambda_phi: 0.0, lambda_theta: 0.0, lambda_beta: 0.0, lambda_gamma: 0.0, ..Default::default() };
    let norm = ParamNormalizer { mean: vec![0.1; PRIOR_DIM], std: vec![0.5; PRIOR_DIM] };
    let (loss, grad) = batch_loss(&pred, &batch, &norm, &cfg, asset, true);
    assert!(loss > 0.0);
    let grad = grad.unwrap();
    let h = 1e-5;
    for k in [0, 1, 10, 40, 70, 77, PARAM_DIM + 2, PARAM_DIM + 20, PARAM_DIM + 78] {
        let mut p = pred.clone();
        p[(0, k)] += h;
        let lp = batch_loss(&p, &batch, &norm, &cfg, asset, false).0;
        p[(0, k)] -= 2.0 * h;
        let lm = batch_loss(&p, &batch, &norm, &cfg, asset, false).0;
        assert_relative_eq!(grad[(0, k)], (lp - lm) / (2.0 * h), max_relative = 1e-4, epsilon = 1e-10);
    }
}

fn dataset(pairs: Vec<[BodyParams; 2]>, source: &str) -> Vec<TrainingPair> {
    pairs.into_iter().map(|params| TrainingPair { params, source: source.into() }).collect()
}

#[test]
fn training_preconditions() {
    let asset = default_asset();
    let s = DiffusionSchedule::default();
    let cfg = TrainConfig::default();
    assert!(matches!(train(&[], &s, &cfg, asset), Err(PriorError::DatasetTooSmall { found: 0, .. })));
    let few = dataset(vec![[BodyParams::default(), BodyParams::default()]; 10], "a");
    assert!(matches!(train(&few, &s, &cfg, asset), Err(PriorError::DatasetTooSmall { found: 10, .. })));
    let data = dataset(vec![[BodyParams::default(), BodyParams::default()]; 64], "a");
    let absent = TrainConfig { source_weights: [("b".to_string(), 1.0)].into(), ..cfg.clone() };
    assert!(matches!(train(&data, &s, &absent, asset), Err(PriorError::Config(_))));
    let odd = TrainConfig { embed_dim: 3, ..cfg };
    assert!(odd.validate().is_err());
}

#[test]
fn overfits_a_repeated_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pair = [random_params(&mut rng), random_params(&mut rng)];
    let data = dataset(vec![pair; 64], "only");
    let cfg = TrainConfig { steps: 500, batch_size: 16, hidden_width: 64, skip_connection: false, ..Default::default() };
    let (model, report) = train(&data, &DiffusionSchedule::default(), &cfg, default_asset()).unwrap();
    assert!(model.signal.is_empty());
    let c = &report.loss_curve;
    assert_eq!(c.len(), 500);
    assert!(c[499] < 0.1 * c[0], "loss {} -> {}", c[0], c[499]);
}

#[test]
fn training_is_deterministic_and_mixes_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = dataset((0..40).map(|_| [random_params(&mut rng), random_params(&mut rng)]).collect(), "a");
    data.extend(dataset((0..40).map(|_| [random_params(&mut rng), random_params(&mut rng)]).collect(), "b"));
    let cfg = TrainConfig { steps: 5, batch_size: 8, hidden_width: 16, source_weights: [("a".to_string(), 0.4), ("b".to_string(), 0.6)].into(), ..Default::default() };
    let s = DiffusionSchedule::default();
    let (m1, r1) = train(&data, &s, &cfg, default_asset()).unwrap();
    let (m2, r2) = train(&data, &s, &cfg, default_asset()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
}

#[test]
fn loss_reduction_uses_windows() {
    let report = TrainReport { loss_curve: (0..40).map(|i| if i < 2 { 10.0 } else if i >= 38 { 1.0 } else { 5.0 }).collect() };
    assert_relative_eq!(report.loss_reduction(), 0.9);
}

#[test]
fn sampling_with_zero_stub_returns_zero() {
    let s = DiffusionSchedule::default();
    assert!(sample(&Stub::new(StubKind::Zero), &s, 3).iter().all(|v| *v == 0.0));
}

#[test]
fn sampling_is_seeded() {
    let model = small_model(10);
    let s = DiffusionSchedule::default();
    assert_eq!(sample(&model, &s, 1), sample(&model, &s, 1));
    assert_ne!(sample(&model, &s, 1), sample(&model, &s, 2));
}

#[test]
fn guidance_zero_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let flat = random_flat(&mut rng);
    assert_eq!(guidance_value_grad(&flat, &flat, &GuidanceWeights::default(), None), 0.0);
    let s = DiffusionSchedule::default();
    let model = small_model(12);
    assert_eq!(guidance_loss(&flat, &model, &s, &GuidanceWeights::zero(), &mut rng), 0.0);
}

#[test]
fn guidance_against_constant_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c: Vec<f64> = (0..PRIOR_DIM).map(|i| i as f64 * 0.01).collect();
    let stub = Stub::new(StubKind::Constant(c.clone()));
    let flat = random_flat(&mut rng);
    let gw = GuidanceWeights { lambda_phi_hat: 1.0, lambda_theta_hat: 2.0, lambda_beta_hat: 0.5, lambda_gamma_hat: 3.0, t_guid: 10 };
    let got = guidance_loss(&flat, &stub, &DiffusionSchedule::default(), &gw, &mut rng);
    let mut want = 0.0;
    for p in 0..2 {
        for k in 0..PARAM_DIM {
            let l = match k {
                0..3 => 1.0,
                3..66 => 2.0,
                66..76 => 0.5,
                _ => 3.0,
            };
            want += l * (flat[p][k] - c[p * PARAM_DIM + k]).powi(2);
        }
    }
    assert_relative_eq!(got, want, max_relative = 1e-12);
}

#[test]
fn guidance_prior_holds_target_per_step() {
    let s = DiffusionSchedule::default();
    let model = small_model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let flat = random_flat(&mut rng);
    let mut prior = GuidancePrior::new(&model, &s, GuidanceWeights::default(), ChaCha8Rng::seed_from_u64(1));
    assert_eq!(prior.value_grad(&flat, None), 0.0);
    prior.begin_step(&flat);
    let v1 = prior.value_grad(&flat, None);
    assert_eq!(v1, prior.value_grad(&flat, None));
    prior.begin_step(&flat);
    assert_ne!(v1, prior.value_grad(&flat, None));
    let mut off = GuidancePrior::new(&model, &s, GuidanceWeights::zero(), ChaCha8Rng::seed_from_u64(1));
    off.begin_step(&flat);
    assert_eq!(off.value_grad(&flat, None), 0.0);
}

#[test]
fn guidance_weights_validated() {
    let s = DiffusionSchedule::default();
    assert!(GuidanceWeights::default().validate(&s).is_ok());
    assert!(GuidanceWeights { t_guid: 0, ..Default::default() }.validate(&s).is_err());
    assert!(GuidanceWeights { t_guid: 101, ..Default::default() }.validate(&s).is_err());
    assert!(GuidanceWeights { lambda_beta_hat: -1.0, ..Default::default() }.validate(&s).is_err());
    assert!(serde_json::from_str::<GuidanceWeights>(r#"{"t_guid": 5, "extra": 1}"#).is_err());
}

#[test]
fn checkpoint_round_trip_and_version() {
    let model = small_model(16);
    let ckpt = Checkpoint::new(DiffusionSchedule::default(), model, &TrainReport { loss_curve: vec![3.0, 1.0] });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.json");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let mut v: serde_json::Value = serde_json::from_str(&ckpt.to_json()).unwrap();
    v["schema_version"] = 99.into();
    assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(PriorError::SchemaVersion { found: 99, .. })));

    let mut bad = ckpt.clone();
    bad.denoiser.layers.pop();
    assert!(matches!(Checkpoint::from_json(&bad.to_json()), Err(PriorError::Checkpoint(_))));
    let mut bad = ckpt;
    bad.schedule.sigma_prime[3] = 0.5;
    assert!(matches!(Checkpoint::from_json(&bad.to_json()), Err(PriorError::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn encode_decode_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = ParamNormalizer {
            mean: (0..PRIOR_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            std: (0..PRIOR_DIM).map(|_| rng.random_range(0.01..2.0)).collect(),
        };
        let pair = [random_params(&mut rng), random_params(&mut rng)];
        let back = norm.decode(&norm.encode(&pair), [pair[0].sigma, pair[1].sigma]);
        for (a, b) in pair.iter().zip(&back) {
            for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert_eq!(a.sigma, b.sigma);
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (current, target) = (random_flat(&mut rng), random_flat(&mut rng));
        let gw = GuidanceWeights { lambda_phi_hat: 0.7, lambda_theta_hat: 1.0, lambda_beta_hat: 2.0, lambda_gamma_hat: 0.3, t_guid: 10 };
        let mut grad = [[0.0; PARAM_DIM]; 2];
        guidance_value_grad(&current, &target, &gw, Some(&mut grad));
        let h = 1e-5;
        for (p, k) in [(0, 1), (0, 30), (1, 70), (1, 78)] {
            let mut c = current;
            c[p][k] += h;
            let vp = guidance_value_grad(&c, &target, &gw, None);
            c[p][k] -= 2.0 * h;
            let vm = guidance_value_grad(&c, &target, &gw, None);
            let fd = (vp - vm) / (2.0 * h);
            prop_assert!((grad[p][k] - fd).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
    }
}

mod guided_fit {
    use super::*;
    use crate::keypoints::DEFAULT_KP_CONF_MIN;
    use crate::losses::{LossWeights, Objective, Stage};
    use crate::optimize::{fit_two_stage, OptimConfig};
    use crate::synth::{corrupt, default_scene, CorruptionConfig};

    fn short() -> OptimConfig {
        OptimConfig { stage1_steps: 40, stage2_steps: 20, ..Default::default() }
    }

    #[test]
    fn echo_prior_fit_lowers_keypoint_loss() {
        let asset = default_asset();
        let scene = default_scene("handshake", 2).unwrap();
        let obs = corrupt(&scene, &CorruptionConfig::default(), asset, 3).unwrap();
        let stub = Stub::new(StubKind::Echo);
        let s = DiffusionSchedule::default();
        let kps = [&obs.keypoints[0], &obs.keypoints[1]];
        let w = LossWeights::default();
        let fit = fit_with_prior(&obs.init, kps, &scene.camera, &stub, &s, &w, &GuidanceWeights::default(), &short(), asset, DEFAULT_KP_CONF_MIN).unwrap();
        let objective = Objective {
            asset,
            camera: &scene.camera,
            keypoints: kps,
            conf_min: DEFAULT_KP_CONF_MIN,
            contact: None,
            theta_init: [obs.init.params[0].theta_flat(), obs.init.params[1].theta_flat()],
            sigma: [0.0, 0.0],
            weights: LossWeights { lambda_j: 1.0, ..LossWeights::zero() },
        };
        let lj = |p: &[BodyParams; 2]| objective.evaluate(Stage::One, &[p[0].to_flat(), p[1].to_flat()], None, false).unwrap().terms.j;
        assert!(lj(&fit.params) <= lj(&obs.init.params));
        let first = fit.trace.first().unwrap().total;
        assert!(fit.trace.last().unwrap().total <= first);
    }

    #[test]
    fn zero_guidance_matches_unguided_fit() {
        let asset = default_asset();
        let scene = default_scene("hug", 4).unwrap();
        let obs = corrupt(&scene, &CorruptionConfig::default(), asset, 5).unwrap();
        let model = small_model(17);
        let s = DiffusionSchedule::default();
        let kps = [&obs.keypoints[0], &obs.keypoints[1]];
        let w = LossWeights::default();
        let cfg = short();
        let guided = fit_with_prior(&obs.init, kps, &scene.camera, &model, &s, &w, &GuidanceWeights::zero(), &cfg, asset, DEFAULT_KP_CONF_MIN).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let start = [obs.init.params[0].to_flat(), obs.init.params[1].to_flat()];
        let anchor = denoise_at(&start, &model, &s, 10, &mut rng);
        let objective = Objective {
            asset,
            camera: &scene.camera,
            keypoints: kps,
            conf_min: DEFAULT_KP_CONF_MIN,
            contact: None,
            theta_init: [anchor[0][3..66].to_vec(), anchor[1][3..66].to_vec()],
            sigma: [0.0, 0.0],
            weights: LossWeights { lambda_c: 0.0, lambda_gmm: 0.0, lambda_beta: 0.0, ..w },
        };
        let plain = fit_two_stage(&objective, &obs.init.params, None, &cfg).unwrap();
        assert_eq!(guided.params, plain.params);
        assert_eq!(guided.trace, plain.trace);
    }
}
