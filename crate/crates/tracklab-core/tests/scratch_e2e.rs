use std::time::Instant;
use tracklab_core::masking::MaskStrategy;
use tracklab_core::training::pretrain::{pretrain, PretrainPlan};

fn arm(motion: bool, clips: usize, epochs: usize) -> PretrainPlan {
    let mut plan = PretrainPlan::default();
    plan.data.clip_count = clips;
    plan.train.epochs = epochs;
    plan.train.warmup_epochs = 0;
    plan.train.checkpoint_every = 0;
    if motion {
        plan.loss.lambda = 1.0;
        plan.masking.strategy = MaskStrategy::MotionBins;
        plan.masking.motion_ratio = 0.5;
        plan.tracking.upsample = 2;
    } else {
        plan.loss.lambda = 0.0;
        plan.loss.motion_enabled = false;
        plan.model.motion_enabled = false;
        plan.masking.strategy = MaskStrategy::RandomTube;
    }
    plan
}

#[test]
fn e2e_steps() {
    for (label, motion) in [("arm_a pixel-only", false), ("arm_b pixel+motion", true)] {
        let plan = arm(motion, 512, 1);
        let dir = std::env::temp_dir().join(format!("scratch_e2e_{motion}"));
        let _ = std::fs::remove_dir_all(&dir);
        let t0 = Instant::now();
        let out = pretrain(&plan, &dir, None, None).unwrap();
        let wall = t0.elapsed().as_secs_f64();
        println!(
            "{label}: {} steps in {:.1}s = {:.1} ms/step",
            out.steps,
            wall,
            wall * 1e3 / out.steps as f64
        );
    }
}

#[test]
fn phase_breakdown() {
    use tracklab_core::model::params::GradStore;
    use tracklab_core::training::data::{assemble_batch, clip_bundle};
    use tracklab_core::training::optim::{motion_branch_tensor, AdamW};
    use tracklab_core::training::step::step_forward_backward;

    for (label, motion) in [("arm_a", false), ("arm_b", true)] {
        let plan = arm(motion, 512, 1);
        let resolved = plan.resolve().unwrap();
        let tracking = if resolved.need_tracks { Some(&resolved.plan.tracking) } else { None };
        let lambda = if motion { 1.0 } else { 0.0 };

        let reps = 3usize;
        let mut t_clip = 0.0;
        let mut t_bundle = 0.0;
        let mut t_asm = 0.0;
        let mut t_step = 0.0;
        let mut t_adam = 0.0;
        let mut t_zero = 0.0;

        let mut params = resolved.model.init_params(1);
        let mut adam = AdamW::new(&params, 0.9, 0.95, 0.05);
        let active: Vec<bool> =
            (0..params.len()).map(|i| motion || !motion_branch_tensor(params.name(i))).collect();
        let mut grads = GradStore::<f32>::zeroed(&params);
        // warm
        for r in 0..reps + 1 {
            let t0 = Instant::now();
            let clips: Vec<_> =
                (0..32).map(|i| resolved.plan.data.clip(r * 32 + i).unwrap()).collect();
            let t1 = Instant::now();
            let bundles: Vec<_> = clips
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    clip_bundle(c, r * 32 + i, &resolved.plan.tokenizer, tracking, None).unwrap()
                })
                .collect();
            let t2 = Instant::now();
            let seeds: Vec<u64> = (0..32).map(|i| (r * 32 + i) as u64).collect();
            let batch =
                assemble_batch(bundles, &resolved.targeter, &resolved.plan.masking, &seeds)
                    .unwrap();
            let t3 = Instant::now();
            let _ =
                step_forward_backward(&resolved.model, &params, &batch, lambda, &mut grads)
                    .unwrap();
            let t4 = Instant::now();
            adam.step(&mut params, &grads, 1e-4, &active);
            let t5 = Instant::now();
            grads.zero_all();
            let t6 = Instant::now();
            if r > 0 {
                t_clip += (t1 - t0).as_secs_f64();
                t_bundle += (t2 - t1).as_secs_f64();
                t_asm += (t3 - t2).as_secs_f64();
                t_step += (t4 - t3).as_secs_f64();
                t_adam += (t5 - t4).as_secs_f64();
                t_zero += (t6 - t5).as_secs_f64();
            }
        }
        let k = 1e3 / reps as f64;
        println!(
            "{label}: clips {:.1} bundles {:.1} assemble {:.1} step {:.1} adam {:.1} zero {:.1} ms",
            t_clip * k, t_bundle * k, t_asm * k, t_step * k, t_adam * k, t_zero * k
        );
    }
}
