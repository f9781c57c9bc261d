use std::sync::Arc;

use mspred_core::autograd::Tape;
use mspred_core::config::RunConfig;
use mspred_core::datagen::{
    generate_sequence, init_trajectory, project_center, read_container, render_sequence, step_trajectory,
    write_container, Canvas, DatasetSpec, DigitGlyphSet, TargetSpec, GLYPH_SIZE,
};
use mspred_core::metrics::{lpips, mse, psnr_from_mse, ssim, IdentityPlugin, PSNR_CAP};
use mspred_core::model::{Emissions, ModelConfig, MsPred, RolloutOptions};
use mspred_core::schedule::TickSchedule;
use mspred_core::training::{compute_loss, Batch, LossNorm, LossWeights};
use mspred_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn glyphs() -> &'static DigitGlyphSet {
    use std::sync::OnceLock;
    static G: OnceLock<DigitGlyphSet> = OnceLock::new();
    G.get_or_init(|| DigitGlyphSet::synthetic(5, 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aligned_schedules_follow_closed_forms(p1 in 2usize..7, dp in 1usize..6, m in 0usize..3, n in 1usize..7) {
        let p2 = p1 + dp;
        let c = 1 + m * p1 * p2;
        let s = TickSchedule::new([1, p1, p2], c, n).unwrap();
        let periods = [1, p1, p2];
        prop_assert_eq!(s.emissions(0), (1..=n).map(|k| c + k).collect::<Vec<_>>());
        for (l, &p) in periods.iter().enumerate().skip(1) {
            prop_assert_eq!(s.emissions(l), (1..=n).map(|k| c + p * k).collect::<Vec<_>>());
        }
        prop_assert_eq!(s.total_steps(), c + p2 * n);
        for (l, &p) in periods.iter().enumerate() {
            prop_assert_eq!(s.tick_count(l), (c + p * n - 1) / p + 1);
        }
    }

    #[test]
    fn short_sequences_are_rejected(p1 in 2usize..6, dp in 1usize..4, c in 1usize..20, n in 1usize..6, short in 1usize..5) {
        let s = TickSchedule::new([1, p1, p1 + dp], c, n).unwrap();
        let need = s.total_steps();
        prop_assert!(s.check_sequence_length(need).is_ok());
        let err = s.check_sequence_length(need.saturating_sub(short)).unwrap_err();
        prop_assert!(err.to_string().contains(&need.to_string()));
    }

    #[test]
    fn metric_identities_and_symmetry(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let x = random(&[3, h, w], seed);
        let y = random(&[3, h, w], seed ^ 0x9e37);
        prop_assert_eq!(mse(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(psnr_from_mse(0.0, 1.0), PSNR_CAP);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(lpips(&x, &x, &IdentityPlugin).unwrap(), 0.0);
        prop_assert!((mse(&x, &y).unwrap() - mse(&y, &x).unwrap()).abs() <= 1e-9);
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() <= 1e-9);
        prop_assert!(ssim(&x, &y).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_decreases_with_error(a in 1e-8f64..1.0, b in 1e-8f64..1.0) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a, 1.0) >= psnr_from_mse(b, 1.0));
        prop_assert!(psnr_from_mse(a, 1.0) <= PSNR_CAP);
    }

    #[test]
    fn loss_decomposes(seed in any::<u64>(), l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, b in 1usize..3) {
        let sched = TickSchedule::new([1, 2, 3], 2, 2).unwrap();
        let steps = sched.total_steps();
        let batch = Batch {
            frames: random(&[b, steps, 3, 4, 4], seed),
            mid: random(&[b, steps, 1, 1, 1], seed + 1),
            high: random(&[b, steps, 2], seed + 2),
        };
        let tape = Tape::<f64>::new();
        let shapes = [vec![b, 3, 4, 4], vec![b, 1, 1, 1], vec![b, 2]];
        let emit = |l: usize| {
            sched.emissions(l).into_iter().map(|t| (t, tape.constant(random(&shapes[l], seed + 10 + t as u64)))).collect()
        };
        let em = Emissions { frames: emit(0), mid: emit(1), high: emit(2) };
        let w = LossWeights::new(l1, l2).unwrap();
        let loss = compute_loss(&em, &batch, &sched, w, LossNorm::Squared).unwrap();
        let total = loss.total.value().data()[0];
        prop_assert!((total - (loss.frame + l1 * loss.mid + l2 * loss.high)).abs() <= 1e-9 * total.max(1.0));
    }

    #[test]
    fn trajectories_keep_speed_and_stay_inside(seed in any::<u64>(), size in 28usize..80) {
        let canvas = Canvas::square(size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = init_trajectory(&mut rng, canvas, GLYPH_SIZE).unwrap();
        let speed = s.speed();
        prop_assert!((2.0..=5.0).contains(&speed));
        let limit = (size - GLYPH_SIZE) as f64;
        for _ in 0..120 {
            s = step_trajectory(s, canvas, GLYPH_SIZE);
            prop_assert!((s.speed() - speed).abs() <= 1e-6);
            prop_assert!((0.0..=limit).contains(&s.x) && (0.0..=limit).contains(&s.y));
        }
    }

    #[test]
    fn frames_are_pixelwise_max_of_digits(seed in any::<u64>()) {
        let canvas = Canvas::square(48);
        let targets = TargetSpec::for_canvas(canvas, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = glyphs();
        let digits: Vec<_> =
            (0..2).map(|_| (rng.gen_range(0..g.len()), init_trajectory(&mut rng, canvas, GLYPH_SIZE).unwrap())).collect();
        let both = render_sequence(g, &digits, 6, canvas, targets);
        let a = render_sequence(g, &digits[..1], 6, canvas, targets);
        let b = render_sequence(g, &digits[1..], 6, canvas, targets);
        let expect = a.frames.zip_map(&b.frames, f32::max);
        prop_assert_eq!(&both.frames, &expect);
        // background outside both glyph boxes stays exactly zero
        for t in 0..6 {
            for y in 0..48 {
                for x in 0..48 {
                    let inside = both.centers[t].iter().any(|c| {
                        let (ox, oy) = ((c[0] - 14.0).round(), (c[1] - 14.0).round());
                        (ox..ox + 28.0).contains(&(x as f64)) && (oy..oy + 28.0).contains(&(y as f64))
                    });
                    if !inside {
                        prop_assert_eq!(both.frames.data()[(t * 3 * 48 + y) * 48 + x], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn targets_agree_with_centers(seed in any::<u64>(), index in 0u64..50) {
        let spec = DatasetSpec::new(seed, 1, 20);
        let seq = generate_sequence(&spec, glyphs(), index).unwrap();
        let (hh, hw) = (spec.targets.height, spec.targets.width);
        for t in 0..20 {
            let heat = &seq.mid_targets.data()[t * hh * hw..(t + 1) * hh * hw];
            let peak = heat.iter().enumerate().fold((0, f32::MIN), |m, (i, &v)| if v > m.1 { (i, v) } else { m }).0;
            let (pr, pc) = ((peak / hw) as f64, (peak % hw) as f64);
            let cells: Vec<_> = seq.centers[t].iter().map(|&c| project_center(c, spec.canvas, spec.targets)).collect();
            // overlapping bumps saturate the clamp and flatten the peak
            let apart = cells.iter().all(|a| cells.iter().all(|b| a == b || (a.0 - b.0).hypot(a.1 - b.1) >= 4.0));
            let near = !apart || cells.iter().any(|&(u, v)| (pc - u).abs() <= 1.0 && (pr - v).abs() <= 1.0);
            prop_assert!(near, "t={} peak=({},{}) cells={:?}", t, pc, pr, cells);
            for v in &seq.high_targets.data()[t * 4..(t + 1) * 4] {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_spec_and_index(seed in any::<u64>(), index in 0u64..1000) {
        let spec = DatasetSpec::new(seed, 1, 8);
        prop_assert_eq!(generate_sequence(&spec, glyphs(), index).unwrap(), generate_sequence(&spec, glyphs(), index).unwrap());
    }

    #[test]
    fn numeric_config_keys_round_trip(hidden in 1usize..512, lr in 1e-6f64..1.0, steps in 1u64..100_000, l1 in 0.0f64..5.0) {
        let mut cfg = RunConfig::default();
        cfg.set_str(&format!("model.hidden={hidden}")).unwrap();
        cfg.set_str(&format!("optim.lr={lr:e}")).unwrap();
        cfg.set_str(&format!("optim.steps={steps}")).unwrap();
        cfg.set_str(&format!("loss.lambda1={l1:e}")).unwrap();
        let back = RunConfig::from_toml_str(&cfg.resolved()).unwrap();
        prop_assert_eq!(back.digest(), cfg.digest());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected(section in "[a-z]{1,8}", key in "[a-z_]{1,12}") {
        let name = format!("{section}.{key}");
        prop_assume!(!RunConfig::keys().contains(&name));
        let err = RunConfig::default().set_str(&format!("{name}=1")).unwrap_err();
        prop_assert!(err.to_string().contains(&name));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// A level's recurrent state changes between `t - 1` and `t` exactly when it ticks at `t`.
    #[test]
    fn level_state_changes_iff_active(p1 in 2usize..4, dp in 1usize..3, c in 1usize..6, n in 1usize..3, seed in any::<u64>()) {
        let cfg = ModelConfig {
            periods: [1, p1, p1 + dp],
            seed_frames: c,
            iterations: n,
            frame_size: (16, 16),
            ..ModelConfig::tiny()
        };
        let model = MsPred::<f64>::new(cfg, seed).unwrap();
        let sched = model.schedule();
        let frames = random(&[1, c, 3, 16, 16], seed);
        let tape = Tape::with_params(model.params());
        let (_, trace) = model.rollout_with(&tape, &frames, RolloutOptions { digests: true }).unwrap();
        prop_assert_eq!(trace.steps.len(), sched.total_steps());
        let mut prev: Option<[u64; 3]> = None;
        for step in &trace.steps {
            let d = step.state_digests.unwrap();
            for l in 0..3 {
                prop_assert_eq!(step.ticked[l], sched.active(l, step.t));
                if let Some(p) = prev {
                    prop_assert_eq!(p[l] != d[l], sched.active(l, step.t), "level {} at t={}", l, step.t);
                }
            }
            prev = Some(d);
        }
    }

    #[test]
    fn containers_round_trip(seed in any::<u64>(), n in 1usize..4) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let mut spec = DatasetSpec::new(seed, n, 57);
        spec.canvas = Canvas::square(32);
        spec.targets = TargetSpec::for_canvas(spec.canvas, 1.5);
        let g = Arc::new(glyphs().clone());
        let seqs: Vec<_> = (0..n as u64).map(|i| generate_sequence(&spec, &g, i).unwrap()).collect();
        let digest = write_container(&path, &spec, &seqs).unwrap();
        prop_assert_eq!(digest.len(), 64);
        let (header, back) = read_container(&path).unwrap();
        prop_assert_eq!(header.spec(), spec);
        prop_assert_eq!(back, seqs);
    }
}
