mod common;

use augdiff::diffusion::{
    diffusion_loss, forward_noise, sample, train, Example, NoisePredictor, NoiseSchedule, SampleOptions,
    ScheduleConfig, TrainBatch, TrainConfig,
};
use augdiff::prompt::{render, ClassLabel, PromptSpec};
use augdiff::rng::RngStream;
use augdiff::tensor::optim::AdamConfig;
use augdiff::tensor::{no_grad, Tensor};
use common::{forward_moment_scores, phantom_set, tiny_model, DeltaOracle, StubPredictor};
use proptest::prelude::*;

fn schedule(t: usize) -> NoiseSchedule {
    NoiseSchedule::linear(&ScheduleConfig { timesteps: t, ..ScheduleConfig::default() }).unwrap()
}

#[test]
fn linear_schedule_invariants() {
    for t in [100, 250, 1000] {
        let s = schedule(t);
        assert_eq!(s.len(), t);
        let b = s.betas();
        assert!((b[0] - 1e-4).abs() < 1e-12 && (b[t - 1] - 0.02).abs() < 1e-12);
        let step = (0.02 - 1e-4) / (t - 1) as f64;
        for i in 1..t {
            assert!((b[i] - b[i - 1] - step).abs() < 1e-12);
        }
        let mut prod = 1.0;
        for (i, &bi) in b.iter().enumerate() {
            assert_eq!(s.alphas()[i], 1.0 - bi);
            prod *= 1.0 - bi;
            assert!((s.alpha_bars()[i] - prod).abs() < 1e-12);
            assert!(s.alpha_bars()[i] > 0.0 && s.alpha_bars()[i] < 1.0);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn schedule_rejects_bad_configs() {
    for cfg in [
        ScheduleConfig { timesteps: 0, ..ScheduleConfig::default() },
        ScheduleConfig { beta_start: 0.0, ..ScheduleConfig::default() },
        ScheduleConfig { beta_start: 0.03, beta_end: 0.02, ..ScheduleConfig::default() },
        ScheduleConfig { beta_end: 1.0, ..ScheduleConfig::default() },
    ] {
        assert!(NoiseSchedule::linear(&cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn forward_noise_matches_closed_form() {
    let s = schedule(250);
    let z0 = Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
    let eps = Tensor::new(&[2, 2], vec![0.0, 2.0, -1.0, 1.0]).unwrap();
    let zt = forward_noise(&z0, &[0, 249], &eps, &s).unwrap();
    let (a0, a1) = (s.alpha_bars()[0], s.alpha_bars()[249]);
    let expect = [
        a0.sqrt(),
        -a0.sqrt() + 2.0 * (1.0 - a0).sqrt(),
        0.5 * a1.sqrt() - (1.0 - a1).sqrt(),
        (1.0 - a1).sqrt(),
    ];
    for (got, want) in zt.data().iter().zip(expect) {
        assert!((f64::from(*got) - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(forward_noise(&z0, &[0, 250], &eps, &s).is_err());
    assert!(forward_noise(&z0, &[0], &eps, &s).is_err());
}

#[test]
fn forward_noise_moments_within_three_standard_errors() {
    let s = schedule(250);
    for t in [1, 125, 249] {
        let (m, v) = forward_moment_scores(&s, t, 10_000, 5);
        assert!(m < 3.0 && v < 3.0, "t={t}: mean z {m:.2}, variance z {v:.2}");
    }
}

proptest! {
    #[test]
    fn forward_noise_is_linear(
        a in -2.0f32..2.0, b in -2.0f32..2.0,
        x in prop::collection::vec(-1.0f32..1.0, 6),
        y in prop::collection::vec(-1.0f32..1.0, 6),
        e in prop::collection::vec(-3.0f32..3.0, 6),
        f in prop::collection::vec(-3.0f32..3.0, 6),
        t in 0usize..250,
    ) {
        let s = schedule(250);
        let fwd = |z: &[f32], n: &[f32]| {
            forward_noise(&Tensor::new(&[1, 6], z.to_vec()).unwrap(), &[t], &Tensor::new(&[1, 6], n.to_vec()).unwrap(), &s)
                .unwrap()
                .to_vec()
        };
        let comb = |p: &[f32], q: &[f32]| p.iter().zip(q).map(|(p, q)| a * p + b * q).collect::<Vec<_>>();
        let lhs = fwd(&comb(&x, &y), &comb(&e, &f));
        let rhs = comb(&fwd(&x, &e), &fwd(&y, &f));
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() < 1e-5);
        }
    }
}

fn stub_batch(n: usize, side: usize, offset: f32) -> (StubPredictor, TrainBatch) {
    let model = tiny_model(side, 1);
    let mut rng = RngStream::new(3, "stub");
    let noise = Tensor::randn(&[n, 1, side, side], 1.0, &mut rng);
    let z0 = Tensor::randn(&[n, 1, side, side], 1.0, &mut rng);
    let cond = model.encode_prompts(&vec!["benign".to_owned(); n]).unwrap();
    let stub = StubPredictor { eps: noise.clone(), offset, shape: [1, side, side], model };
    (stub, TrainBatch { z0, cond, t: vec![3; n], noise })
}

#[test]
fn loss_of_exact_noise_is_zero_and_offset_is_squared() {
    let s = schedule(100);
    let (stub, batch) = stub_batch(3, 8, 0.0);
    assert_eq!(diffusion_loss(&stub, &batch, &s).unwrap().item(), 0.0);
    for c in [0.5f32, -1.5] {
        let (stub, batch) = stub_batch(3, 8, c);
        let l = diffusion_loss(&stub, &batch, &s).unwrap().item();
        assert!((f64::from(l) - f64::from(c * c)).abs() < 1e-6, "{l}");
    }
}

#[test]
fn loss_equals_manual_composition() {
    let model = tiny_model(8, 2);
    let mut rng = RngStream::new(4, "compose");
    let z0 = Tensor::randn(&[2, 1, 8, 8], 0.5, &mut rng);
    let noise = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng);
    let t = vec![10, 90];
    let cond = model.encode_prompts(&["benign".into(), "malignant".into()]).unwrap();
    let batch = TrainBatch { z0: z0.clone(), cond: cond.clone(), t: t.clone(), noise: noise.clone() };
    let loss = no_grad(|| diffusion_loss(&model, &batch, &model.schedule)).unwrap().item();
    let zt = forward_noise(&z0, &t, &noise, &model.schedule).unwrap();
    let pred = no_grad(|| model.predict_noise(&zt, &t, &cond)).unwrap();
    let manual = pred.data().iter().zip(noise.data()).map(|(p, n)| f64::from(p - n).powi(2)).sum::<f64>() / 128.0;
    assert!((f64::from(loss) - manual).abs() < 1e-6 * manual.max(1.0));
}

fn toy_examples(n: usize, side: usize) -> Vec<Example> {
    let set = phantom_set(n, side, 9, &[ClassLabel::Benign, ClassLabel::Malignant]);
    set.images
        .into_iter()
        .zip(set.labels)
        .map(|(image, l)| Example {
            image,
            prompt: render(&PromptSpec::new("", ClassLabel::from_index(l).unwrap()).unwrap()),
        })
        .collect()
}

fn quick(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, optimizer: AdamConfig { lr, ..AdamConfig::adamw() }, seed: 21 }
}

#[test]
fn zero_epochs_leave_weights_untouched() {
    let mut model = tiny_model(8, 3);
    let before = model.digest();
    let report = train(&mut model, None, &toy_examples(2, 8), &quick(0, 1e-3)).unwrap();
    assert!(report.loss_curve.is_empty());
    assert_eq!(report.steps, 0);
    assert_eq!(model.digest(), before);
}

#[test]
fn training_is_deterministic_and_changes_weights() {
    let data = toy_examples(4, 8);
    let run = || {
        let mut model = tiny_model(8, 3);
        let report = train(&mut model, None, &data, &quick(2, 1e-3)).unwrap();
        (model.digest(), report)
    };
    let (d1, r1) = run();
    let (d2, r2) = run();
    assert_eq!(d1, d2);
    assert_eq!(r1, r2);
    assert_eq!(r1.steps, 4);
    assert_ne!(d1, tiny_model(8, 3).digest());
}

#[test]
fn training_reduces_loss_on_a_tiny_set() {
    let mut model = tiny_model(8, 5);
    let data = toy_examples(4, 8);
    let report = train(&mut model, None, &data, &quick(150, 3e-3)).unwrap();
    let first = report.loss_curve[..5].iter().sum::<f64>() / 5.0;
    let last = report.loss_curve[report.loss_curve.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.25 * first, "loss {first:.4} -> {last:.4}");
}

#[test]
fn training_rejects_bad_inputs() {
    let mut model = tiny_model(8, 3);
    assert!(train(&mut model, None, &[], &quick(1, 1e-3)).is_err());
    let bad = vec![Example { image: vec![0.0; 3], prompt: "benign".into() }];
    assert!(train(&mut model, None, &bad, &quick(1, 1e-3)).is_err());
    let mut zero_batch = quick(1, 1e-3);
    zero_batch.batch_size = 0;
    assert!(train(&mut model, None, &toy_examples(1, 8), &zero_batch).is_err());
}

#[test]
fn sampling_is_deterministic_and_chunk_invariant() {
    let model = tiny_model(8, 6);
    let cond = model.encode_prompts(&["benign".into()]).unwrap();
    let a = sample(&model, &model.schedule, &cond, 3, 42, SampleOptions { stride: 10, chunk: 3 }).unwrap();
    let b = sample(&model, &model.schedule, &cond, 3, 42, SampleOptions { stride: 10, chunk: 1 }).unwrap();
    let c = sample(&model, &model.schedule, &cond, 3, 43, SampleOptions { stride: 10, chunk: 3 }).unwrap();
    assert_eq!(a.shape(), &[3, 1, 8, 8]);
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn different_prompts_give_different_samples() {
    let model = tiny_model(8, 6);
    let opts = SampleOptions { stride: 10, chunk: 4 };
    let benign = model.encode_prompts(&["benign".into()]).unwrap();
    let malignant = model.encode_prompts(&["malignant".into()]).unwrap();
    let a = sample(&model, &model.schedule, &benign, 2, 1, opts).unwrap();
    let b = sample(&model, &model.schedule, &malignant, 2, 1, opts).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn exact_noise_oracle_recovers_constant_image() {
    let model = tiny_model(8, 1);
    for t in [100, 250] {
        let oracle = DeltaOracle { value: 0.3, shape: [1, 8, 8], schedule: schedule(t), model: model.clone() };
        let cond = oracle.encode_prompts(&["benign".into()]).unwrap();
        for stride in [1, 7] {
            let out = sample(&oracle, &oracle.schedule, &cond, 4, 8, SampleOptions { stride, chunk: 4 }).unwrap();
            let worst = out.data().iter().map(|v| (v - 0.3).abs()).fold(0.0f32, f32::max);
            assert!(worst < 1e-3, "T={t} stride={stride}: {worst}");
        }
    }
}

#[test]
fn sampling_rejects_bad_arguments() {
    let model = tiny_model(8, 1);
    let cond = model.encode_prompts(&["benign".into(), "malignant".into()]).unwrap();
    let ok = SampleOptions::default();
    assert!(sample(&model, &model.schedule, &cond, 3, 0, ok).is_err());
    assert!(sample(&model, &model.schedule, &cond, 0, 0, ok).is_err());
    assert!(sample(&model, &model.schedule, &cond, 2, 0, SampleOptions { stride: 0, chunk: 1 }).is_err());
}
