//! Acceptance suite: one PASS/FAIL line per criterion. The end-to-end toy
//! experiment runs last because it dominates the runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use maskdiff::curation::{cosine_similarity, erode_mask, filter_pairs, FeatureVector, PatchMeanExtractor, Verdict};
use maskdiff::diffusion::{
    build_denoiser, ddpm_step, make_schedule, q_sample, Checkpoint, Conditioning, DenoiserSpec, NoiseSchedule,
    ScheduleKind, WeightMode,
};
use maskdiff::finetune::{finetune, masked_loss, FinetuneConfig, MaskMode, TriggerToken};
use maskdiff::mask_gen::{sample_masks, train_mask_model, MaskGates, MaskModelConfig};
use maskdiff::pipeline::dataset::{synth_toy_dataset_with_backgrounds, toy_ellipse, toy_sample};
use maskdiff::pipeline::{run_pipeline, synth_toy_dataset, PipelineConfig, Split};
use maskdiff::rng::{item_seed, seeded};
use maskdiff::sampler::{blend_step, generate, preserve_background, GuidanceRequest};
use maskdiff::seg::{dice_score, focal_dice_loss_and_grad, iou_score, train_segmenter, SegConfig};
use maskdiff::{BinaryMask, ImageMaskPair, ImageTensor, PairSource};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn linear(steps: usize, lo: f64, hi: f64) -> NoiseSchedule {
    make_schedule(steps, lo, hi, ScheduleKind::Linear, WeightMode::Uniform).unwrap()
}

fn uniform_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn normal_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(c, h, w, maskdiff::rng::normal_vec(rng, c * h * w)).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random_bool(density) as u8).collect()).unwrap()
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- math

fn diffusion_math() {
    let mut rng = seeded(11);
    for _ in 0..200 {
        let steps = rng.random_range(1..300);
        let a = rng.random_range(1e-5..0.5);
        let b = rng.random_range(a..0.999);
        let s = linear(steps, a, b);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "alpha_bars not decreasing for T={steps} {a}..{b}");
    }

    let single = linear(1, 0.5, 0.5);
    assert_eq!(single.alphas(), &[0.5]);
    assert_eq!(single.alpha_bars(), &[0.5]);

    let full = linear(1000, 1e-4, 0.02);
    let mut prod = 1.0f64;
    for t in 0..1000 {
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0);
    }
    assert!((full.alpha_bars()[999] - prod).abs() < 1e-10);

    // q_sample: degenerate cases and linearity.
    let s = linear(50, 1e-3, 0.05);
    let x0 = uniform_image(&mut rng, 1, 8, 8);
    let eps = normal_image(&mut rng, 1, 8, 8);
    let zero = ImageTensor::zeros_like(&x0);
    let t = 30;
    let (ca, cb) = (s.alpha_bars()[t].sqrt(), (1.0 - s.alpha_bars()[t]).sqrt());
    let only_x = q_sample(&x0, t, &zero, &s).unwrap();
    assert!(only_x.data().iter().zip(x0.data()).all(|(o, x)| *o == (ca * *x as f64) as f32));
    let only_e = q_sample(&zero, t, &eps, &s).unwrap();
    assert!(only_e.data().iter().zip(eps.data()).all(|(o, e)| *o == (cb * *e as f64) as f32));
    for k in [-2.0f32, 0.3, 1.7] {
        let scale = |im: &ImageTensor| ImageTensor::new(1, 8, 8, im.data().iter().map(|v| v * k).collect()).unwrap();
        let lhs = q_sample(&scale(&x0), t, &scale(&eps), &s).unwrap();
        let rhs = scale(&q_sample(&x0, t, &eps, &s).unwrap());
        assert!(max_abs(lhs.data(), rhs.data()) <= 1e-6);
    }
    // ᾱ = 0.25 from a one-step schedule with β = 0.75.
    let quarter = linear(1, 0.75, 0.75);
    let one = ImageTensor::filled(1, 1, 1, 1.0);
    let v = q_sample(&one, 0, &one, &quarter).unwrap().data()[0] as f64;
    assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-6, "{v}");

    // ddpm_step closed forms.
    let x_t = uniform_image(&mut rng, 1, 8, 8);
    let out = ddpm_step(&x_t, &zero, t, &s, None).unwrap();
    let inv = 1.0 / s.alphas()[t].sqrt();
    assert!(out.data().iter().zip(x_t.data()).all(|(o, x)| *o == (inv * *x as f64) as f32));
    // α_t = 0.99 with ᾱ_t = 0.5: the step before must have ᾱ = 0.5 / 0.99.
    let custom = NoiseSchedule::from_betas(vec![1.0 - 0.5 / 0.99, 0.01], WeightMode::Uniform).unwrap();
    assert!((custom.alphas()[1] - 0.99).abs() < 1e-15 && (custom.alpha_bars()[1] - 0.5).abs() < 1e-15);
    let v = ddpm_step(&one, &one, 1, &custom, None).unwrap().data()[0] as f64;
    // Evaluates to 0.990824.
    let expected = (1.0 - 0.01 / 0.5f64.sqrt()) / 0.99f64.sqrt();
    assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");

    // Perfect-ε round trip, T = 10.
    let s = linear(10, 1e-4, 0.02);
    let x0 = uniform_image(&mut rng, 1, 16, 16);
    let eps = normal_image(&mut rng, 1, 16, 16);
    let mut x = q_sample(&x0, 9, &eps, &s).unwrap();
    for t in (0..10).rev() {
        let (a, b) = (s.alpha_bars()[t].sqrt(), (1.0 - s.alpha_bars()[t]).sqrt());
        let oracle = x.data().iter().zip(x0.data()).map(|(xt, x0)| ((*xt as f64 - a * *x0 as f64) / b) as f32).collect();
        let oracle = ImageTensor::new(1, 16, 16, oracle).unwrap();
        x = ddpm_step(&x, &oracle, t, &s, None).unwrap();
    }
    let err = max_abs(x.data(), x0.data());
    assert!(err <= 1e-4, "round trip error {err}");
}

// ---------------------------------------------------------------- blending

fn tiny_spec() -> DenoiserSpec {
    DenoiserSpec {
        levels: 2,
        channel_widths: vec![8, 16],
        conditioning: Conditioning::TriggerToken,
        timestep_embedding_dim: 16,
        input_channels: 1,
        output_channels: 1,
        patch: 2,
    }
}

fn toy_pairs(seed: u64, n: usize, size: usize) -> Vec<ImageMaskPair> {
    (0..n)
        .map(|i| {
            let s = toy_sample(item_seed(seed, i), size);
            ImageMaskPair::new(format!("p{i}"), s.image, s.mask, PairSource::Real).unwrap()
        })
        .collect()
}

fn tiny_finetune(seed: u64) -> (Checkpoint, TriggerToken) {
    let spec = tiny_spec();
    let base = build_denoiser(&spec, seed).unwrap();
    let token = TriggerToken::new("qzx", spec.embedding_dim()).unwrap();
    let config = FinetuneConfig {
        iterations: 30,
        batch_size: 2,
        learning_rate: 1e-3,
        mask_mode: MaskMode::Lesion,
        seed,
        schedule: maskdiff::diffusion::ScheduleParams::linear(20),
        image_size: 32,
    };
    let trained = finetune(&toy_pairs(seed, 6, 32), &base, &token, &config).unwrap();
    let token = trained.checkpoint.token.clone().unwrap();
    (trained.checkpoint, token)
}

fn blending() {
    let mut rng = seeded(21);
    let s = linear(20, 1e-3, 0.1);
    let (h, w) = (8, 8);
    for t in [0usize, 7, 19] {
        let x_t = normal_image(&mut rng, 1, h, w);
        let eps_hat = normal_image(&mut rng, 1, h, w);
        let z = normal_image(&mut rng, 1, h, w);
        let bg = uniform_image(&mut rng, 1, h, w);
        let preserved = preserve_background(&bg, t as i64 - 1, &s, &z).unwrap();
        let step = ddpm_step(&x_t, &eps_hat, t, &s, Some(&z)).unwrap();
        let ones = blend_step(&x_t, &eps_hat, &BinaryMask::ones(h, w), &preserved, t, &s, Some(&z)).unwrap();
        assert_eq!(ones.data(), step.data());
        let zeros = blend_step(&x_t, &eps_hat, &BinaryMask::zeros(h, w), &preserved, t, &s, Some(&z)).unwrap();
        assert_eq!(zeros.data(), preserved.data());
        for _ in 0..20 {
            let m = random_mask(&mut rng, h, w, 0.5);
            let got = blend_step(&x_t, &eps_hat, &m, &preserved, t, &s, Some(&z)).unwrap();
            for i in 0..h * w {
                let want = if m.data()[i] == 1 { step.data()[i] } else { preserved.data()[i] };
                assert_eq!(got.data()[i].to_bits(), want.to_bits(), "pixel {i} at t={t}");
            }
        }
    }
    // preserved content at t = -1 is the background itself.
    let bg = uniform_image(&mut rng, 1, h, w);
    assert_eq!(preserve_background(&bg, -1, &s, &ImageTensor::zeros_like(&bg)).unwrap(), bg);

    let (model, token) = tiny_finetune(5);
    let schedule = model.schedule.unwrap().build().unwrap();
    for i in 0..50 {
        let bg = toy_sample(item_seed(99, i), 32).healthy;
        let mask = toy_ellipse(&mut rng, 32);
        let req = GuidanceRequest { background: bg.clone(), mask: mask.clone(), model: &model, token: &token, seed: i as u64, stochastic: true };
        let out = generate(&req, &schedule).unwrap();
        for p in 0..32 * 32 {
            if mask.data()[p] == 0 {
                assert_eq!(out.image.data()[p].to_bits(), bg.data()[p].to_bits(), "mask {i} pixel {p}");
            }
        }
        assert!(out.image.is_normalized());
    }
}

// ---------------------------------------------------------------- loss

fn loss() {
    let mut rng = seeded(31);
    let s = linear(10, 1e-3, 0.05);
    let x0 = uniform_image(&mut rng, 1, 8, 8);
    let other = uniform_image(&mut rng, 1, 8, 8);
    assert_eq!(masked_loss(&x0, &BinaryMask::zeros(8, 8), &other, 3, &s).unwrap(), 0.0);
    assert_eq!(masked_loss(&x0, &random_mask(&mut rng, 8, 8, 0.5), &x0, 3, &s).unwrap(), 0.0);

    let a = ImageTensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
    let b = ImageTensor::new(1, 2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
    let m = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
    let one_step = make_schedule(1, 0.5, 0.5, ScheduleKind::Linear, WeightMode::Uniform).unwrap();
    assert_eq!(masked_loss(&a, &m, &b, 0, &one_step).unwrap(), 0.5);

    for _ in 0..50 {
        let mask = random_mask(&mut rng, 8, 8, 0.4);
        let pred = uniform_image(&mut rng, 1, 8, 8);
        let base = masked_loss(&x0, &mask, &pred, 4, &s).unwrap();
        let mut perturbed = pred.clone();
        for (i, v) in perturbed.data_mut().iter_mut().enumerate() {
            if mask.data()[i] == 0 {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        assert!((masked_loss(&x0, &mask, &perturbed, 4, &s).unwrap() - base).abs() <= 1e-12);
        let k = rng.random_range(0.1..10.0);
        let scaled = masked_loss(&x0, &mask, &pred, 4, &s.with_scaled_weights(k)).unwrap();
        assert!((scaled - k * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
    }
}

// ---------------------------------------------------------------- curation

fn erode_oracle(m: &BinaryMask, radius: usize, iterations: usize) -> BinaryMask {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let r = radius as i64;
    let mut cur = m.clone();
    for _ in 0..iterations {
        cur = BinaryMask::from_fn(m.height(), m.width(), |y, x| {
            let (y, x) = (y as i64, x as i64);
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    yy >= 0 && yy < h && xx >= 0 && xx < w && cur.get(yy as usize, xx as usize) == 1
                })
            })
        });
    }
    cur
}

/// Independent patch-mean embedding used by the filter oracle.
fn oracle_embed(im: &ImageTensor) -> Vec<f64> {
    let (h, w) = (im.height(), im.width());
    let mut v = Vec::new();
    for gy in 0..8 {
        for gx in 0..8 {
            let (ys, xs) = (gy * h / 8..(gy + 1) * h / 8, gx * w / 8..(gx + 1) * w / 8);
            let n = (ys.len() * xs.len()) as f64;
            let s: f64 = ys.flat_map(|y| xs.clone().map(move |x| (y, x))).map(|(y, x)| im.get(0, y, x) as f64).sum();
            v.push(s / n);
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

fn curation() {
    let mut rng = seeded(41);
    for i in 0..100 {
        let density = rng.random_range(0.5..0.97);
        let m = random_mask(&mut rng, 32, 32, density);
        let (r, it) = (1 + i % 3, 1 + i % 2);
        let got = erode_mask(&m, r, it);
        assert_eq!(got, erode_oracle(&m, r, it), "mask {i} r={r} it={it}");
        assert!(got.is_subset_of(&m));
        let sub = BinaryMask::new(32, 32, m.data().iter().map(|&v| v & rng.random_bool(0.9) as u8).collect()).unwrap();
        assert!(erode_mask(&sub, r, it).is_subset_of(&got));
    }
    let fv = |v: &[f64]| FeatureVector { values: v.to_vec(), extractor_id: "t".into() };
    assert!((cosine_similarity(&fv(&[0.3, -2.0, 5.0]), &fv(&[0.3, -2.0, 5.0])).unwrap() - 1.0).abs() < 1e-9);
    assert!(cosine_similarity(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap().abs() < 1e-9);
    assert!((cosine_similarity(&fv(&[1.0, 1.0]), &fv(&[1.0, 0.0])).unwrap() - 0.5f64.sqrt()).abs() < 1e-9);

    // Filter partition against an all-pairs oracle on 20 pairs.
    let refs: Vec<ImageTensor> = (0..6).map(|i| toy_sample(item_seed(7, i), 64).image).collect();
    let mut pairs = toy_pairs(8, 12, 64);
    for (i, r) in refs.iter().take(4).enumerate() {
        pairs.push(ImageMaskPair::new(format!("copy{i}"), r.clone(), BinaryMask::zeros(64, 64), PairSource::Synthetic).unwrap());
    }
    for i in 0..4 {
        pairs.push(ImageMaskPair::new(format!("noise{i}"), uniform_image(&mut rng, 1, 64, 64), BinaryMask::zeros(64, 64), PairSource::Synthetic).unwrap());
    }
    let (lo, hi) = (0.5, 0.95);
    let out = filter_pairs(pairs.clone(), &refs, lo, hi, &PatchMeanExtractor::new(1)).unwrap();
    let ref_emb: Vec<Vec<f64>> = refs.iter().map(oracle_embed).collect();
    let mut want_kept = Vec::new();
    for (p, entry) in pairs.iter().zip(&out.report.entries) {
        let e = oracle_embed(&p.image);
        let best = ref_emb.iter().map(|r| oracle_cos(&e, r)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(entry.pair_id, p.id);
        assert!((entry.similarity - best).abs() < 1e-9, "{}: {} vs {best}", p.id, entry.similarity);
        let verdict = if best < lo { Verdict::TooDissimilar } else if best > hi { Verdict::TooSimilar } else { Verdict::Kept };
        assert_eq!(entry.verdict, verdict);
        if verdict == Verdict::Kept {
            want_kept.push(p.id.clone());
        }
    }
    let kept: Vec<String> = out.kept.iter().map(|p| p.id.clone()).collect();
    assert_eq!(kept, want_kept);
    assert_eq!(out.kept.len() + out.rejected.len(), pairs.len());
    assert!(out.report.is_consistent());
}

// ---------------------------------------------------------------- metrics

fn metrics() {
    let mut rng = seeded(51);
    for _ in 0..1000 {
        let (pd, td) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = random_mask(&mut rng, 16, 16, pd * pd);
        let t = random_mask(&mut rng, 16, 16, td * td);
        let d = dice_score(&p, &t).unwrap();
        assert!((iou_score(&p, &t).unwrap() - d / (2.0 - d)).abs() <= 1e-9);
    }
    let cfg = SegConfig::default();
    for _ in 0..5 {
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<u8> = (0..64).map(|_| rng.random_bool(0.3) as u8).collect();
        let (_, grad) = focal_dice_loss_and_grad(&pred, &target, &cfg);
        let h = 1e-6;
        for i in 0..64 {
            let (mut up, mut down) = (pred.clone(), pred.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (focal_dice_loss_and_grad(&up, &target, &cfg).0 - focal_dice_loss_and_grad(&down, &target, &cfg).0) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "pixel {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }
}

// ---------------------------------------------------------------- determinism

fn determinism() {
    let (a, ta) = tiny_finetune(61);
    let (b, tb) = tiny_finetune(61);
    assert_eq!(a.weights_digest(), b.weights_digest(), "fine-tune");
    assert_eq!(ta, tb);

    let schedule = a.schedule.unwrap().build().unwrap();
    let bg = toy_sample(3, 32).healthy;
    let mask = toy_ellipse(&mut seeded(4), 32);
    for stochastic in [false, true] {
        let req = GuidanceRequest { background: bg.clone(), mask: mask.clone(), model: &a, token: &ta, seed: 9, stochastic };
        let (x, y) = (generate(&req, &schedule).unwrap(), generate(&req, &schedule).unwrap());
        assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "generation stochastic={stochastic}");
    }

    let masks: Vec<BinaryMask> = (0..8).map(|i| toy_ellipse(&mut seeded(i), 32)).collect();
    let cfg = MaskModelConfig {
        spec: MaskModelConfig::fixed_spec(4, 32),
        iterations: 10,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 62,
        image_size: 32,
        schedule: maskdiff::diffusion::ScheduleParams::linear(20),
    };
    let (m1, m2) = (train_mask_model(&masks, &cfg).unwrap(), train_mask_model(&masks, &cfg).unwrap());
    assert_eq!(m1.checkpoint.weights_digest(), m2.checkpoint.weights_digest(), "mask model");
    let ms = cfg.schedule.build().unwrap();
    let gates = MaskGates { min_area: 0.0, max_area: 1.0, ..MaskGates::default() };
    for stochastic in [false, true] {
        let g = MaskGates { stochastic, ..gates };
        let s1 = sample_masks(&m1.checkpoint, 4, &g, 63, &ms, 32).unwrap();
        let s2 = sample_masks(&m1.checkpoint, 4, &g, 63, &ms, 32).unwrap();
        assert_eq!(s1, s2, "mask sampling stochastic={stochastic}");
    }

    let pairs = toy_pairs(64, 12, 32);
    let seg = SegConfig { epochs: 2, batch_size: 4, image_size: 32, seed: 65, channel_widths: vec![8, 16], ..SegConfig::default() };
    let r1 = train_segmenter(&pairs[..8], &pairs[8..], &seg).unwrap();
    let r2 = train_segmenter(&pairs[..8], &pairs[8..], &seg).unwrap();
    assert_eq!(r1.checkpoint.weights_digest(), r2.checkpoint.weights_digest(), "segmenter");
    assert_eq!(r1.trace, r2.trace);
}

// ---------------------------------------------------------------- filter smoke

fn filter_smoke() {
    let ds = synth_toy_dataset(71, 80, 64).unwrap();
    let train = ds.split(Split::Train);
    let refs: Vec<ImageTensor> = train.iter().map(|p| p.image.clone()).collect();
    let mut rng = seeded(72);
    let mut batch = toy_pairs(73, 40, 64);
    for i in 0..20 {
        let im = uniform_image(&mut rng, 1, 64, 64);
        batch.push(ImageMaskPair::new(format!("noise{i}"), im, BinaryMask::zeros(64, 64), PairSource::Synthetic).unwrap());
    }
    for (i, p) in train.iter().take(20).enumerate() {
        batch.push(ImageMaskPair::new(format!("copy{i}"), p.image.clone(), p.mask.clone(), PairSource::Synthetic).unwrap());
    }
    let out = filter_pairs(batch, &refs, 0.5, 0.95, &PatchMeanExtractor::new(1)).unwrap();
    let hits = |prefix: &str, v: Verdict| out.report.entries.iter().filter(|e| e.pair_id.starts_with(prefix) && e.verdict == v).count();
    let (noise, copies) = (hits("noise", Verdict::TooDissimilar), hits("copy", Verdict::TooSimilar));
    let stand_ins = hits("p", Verdict::Kept);
    println!("    noise rejected {noise}/20, copies rejected {copies}/20, stand-ins kept {stand_ins}/40");
    assert!(noise >= 18 && copies >= 18);
}

// ---------------------------------------------------------------- end to end

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn end_to_end() {
    let (mut base, mut aug) = (Vec::new(), Vec::new());
    for seed in [1u64, 2, 3] {
        let started = Instant::now();
        let ds = synth_toy_dataset_with_backgrounds(seed, 80, 64, 50).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = run_pipeline(&PipelineConfig::toy(seed), &ds, dir.path()).unwrap();
        let (b, a) = (m.baseline.unwrap().test.dice, m.augmented.unwrap().test.dice);
        let c = m.curation.unwrap();
        println!(
            "    seed {seed}: baseline {b:.4}  augmented {a:.4}  delta {:+.4}  kept {}/{}  ({:.0} s)",
            a - b,
            c.kept,
            c.generated,
            started.elapsed().as_secs_f64()
        );
        base.push(b);
        aug.push(a);
    }
    let (mb, ma) = (median(base.clone()), median(aug.clone()));
    println!("    median baseline {mb:.4}  median augmented {ma:.4}");
    assert!(ma >= mb, "median augmented below baseline");
    let worst = base.iter().zip(&aug).map(|(b, a)| a - b).fold(f64::INFINITY, f64::min);
    assert!(worst >= -0.01, "a seed lost {worst:.4} Dice");
}

// ---------------------------------------------------------------- harness

type Criterion = (&'static str, fn(), Duration);

fn main() {
    let criteria: [Criterion; 8] = [
        ("diffusion math", diffusion_math, Duration::from_secs(10)),
        ("background-preserving blending", blending, Duration::from_secs(30)),
        ("masked loss", loss, Duration::from_secs(5)),
        ("curation", curation, Duration::from_secs(30)),
        ("metrics", metrics, Duration::MAX),
        ("determinism", determinism, Duration::MAX),
        ("filter efficacy smoke", filter_smoke, Duration::MAX),
        ("end-to-end toy experiment", end_to_end, Duration::from_secs(30 * 60)),
    ];
    // Optional substring filters, e.g. `cargo test --test acceptance -- math`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<Criterion> =
        criteria.into_iter().filter(|c| filters.is_empty() || filters.iter().any(|f| c.0.contains(f.as_str()))).collect();
    let total = selected.len();
    let mut failed = 0;
    for (name, run, budget) in selected {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let elapsed = started.elapsed();
        let verdict = match outcome {
            Err(_) => "FAIL",
            Ok(()) if elapsed > budget => {
                println!("    over budget: {:.1} s > {:.0} s", elapsed.as_secs_f64(), budget.as_secs_f64());
                "FAIL"
            }
            Ok(()) => "PASS",
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} {name} ({:.1} s)", elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", total - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
