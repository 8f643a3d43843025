//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::model::params::{GradStore, Params};

pub const ADAM_EPS: f64 = 1e-8;

/// Piecewise learning rate: linear from 0 over `warmup` steps, reaching
/// `base` exactly at step `warmup`, then cosine decay to 0 at `total`.
/// The two pieces agree at the junction.
pub fn learning_rate(base: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let t = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW over a parameter arena. Moment state is stored in f32 so
/// checkpoints round-trip it bit-exactly; the per-element update itself
/// runs in f64. Weight decay is decoupled and skipped for tensors the
/// arena marks no-decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(p: &Params<f32>, beta1: f64, beta2: f64, weight_decay: f64) -> AdamW {
        let m: Vec<Vec<f32>> = (0..p.len()).map(|i| vec![0.0; p.data(i).len()]).collect();
        let v = m.clone();
        AdamW { beta1, beta2, weight_decay, t: 0, m, v }
    }

    pub fn moment1(&self, tensor: usize) -> &[f32] {
        &self.m[tensor]
    }

    pub fn moment2(&self, tensor: usize) -> &[f32] {
        &self.v[tensor]
    }

    pub fn load_moments(&mut self, tensor: usize, m: &[f32], v: &[f32]) -> Result<()> {
        if m.len() != self.m[tensor].len() || v.len() != self.v[tensor].len() {
            return Err(Error::Data(format!(
                "optimizer state for tensor {tensor} holds {} + {} values, expected {}",
                m.len(),
                v.len(),
                self.m[tensor].len()
            )));
        }
        self.m[tensor].copy_from_slice(m);
        self.v[tensor].copy_from_slice(v);
        Ok(())
    }

    /// One update. `active[i]` gates tensor `i`: inactive tensors are
    /// left untouched entirely, including their decay and moments.
    pub fn step(&mut self, p: &mut Params<f32>, g: &GradStore<f32>, lr: f64, active: &[bool]) {
        assert_eq!(active.len(), p.len(), "active mask must cover every tensor");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for tensor in 0..p.len() {
            if !active[tensor] {
                continue;
            }
            let decay = if p.no_decay(tensor) { 0.0 } else { self.weight_decay };
            let (beta1, beta2) = (self.beta1, self.beta2);
            let grads = g.data(tensor);
            let values = p.data_mut(tensor);
            let (ms, vs) = (&mut self.m[tensor], &mut self.v[tensor]);
            let it = values.iter_mut().zip(grads).zip(ms.iter_mut().zip(vs.iter_mut()));
            for ((w, &gr), (mi, vi)) in it {
                let gi = gr.to_f64();
                let m = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let v = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = m as f32;
                *vi = v as f32;
                let mhat = m / bc1;
                let vhat = v / bc2;
                let wd = *w as f64;
                *w = (wd - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + decay * wd)) as f32;
            }
        }
    }
}

/// Tensors belonging to the motion branch: when the motion loss is off
/// these receive no gradient and take no optimizer step at all, so the
/// trajectory of every other tensor matches a model built without them.
pub fn motion_branch_tensor(name: &str) -> bool {
    name.starts_with("dec.motion.") || name.starts_with("dec.joint.motion_head.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_hits_base_exactly() {
        let base = 1.5e-4;
        assert_eq!(learning_rate(base, 10, 100, 0), 0.0);
        assert_eq!(learning_rate(base, 10, 100, 10), base);
        // Monotone rise through warmup, continuous junction.
        let just_before = learning_rate(base, 10, 100, 9);
        assert!(just_before < base && just_before > 0.0);
    }

    #[test]
    fn cosine_tail_decays_to_zero() {
        let base = 1.0;
        let mut prev = learning_rate(base, 5, 50, 5);
        for s in 6..50 {
            let lr = learning_rate(base, 5, 50, s);
            assert!(lr < prev, "not decaying at step {s}");
            prev = lr;
        }
        assert!(prev > 0.0);
        assert_eq!(learning_rate(base, 5, 50, 50), 0.0);
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        assert_eq!(learning_rate(2.0, 0, 10, 0), 2.0);
    }

    fn one_tensor_params(values: Vec<f32>, no_decay: bool) -> Params<f32> {
        let mut p = Params::<f32>::new();
        let n = values.len();
        p.push("w", &[n], no_decay, values);
        p
    }

    #[test]
    fn first_step_moves_against_the_gradient_at_lr_scale() {
        // With bias correction, the very first AdamW step has magnitude
        // lr * g / (|g| + eps) = lr up to eps, regardless of g's scale.
        let mut p = one_tensor_params(vec![1.0, -2.0], true);
        let mut g = GradStore::<f32>::zeroed(&p);
        g.data_mut(0).copy_from_slice(&[0.5, -3.0]);
        let mut opt = AdamW::new(&p, 0.9, 0.95, 0.0);
        opt.step(&mut p, &g, 0.01, &[true]);
        let w = p.data(0);
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6, "{}", w[0]);
        assert!((w[1] - (-2.0 + 0.01)).abs() < 1e-6, "{}", w[1]);
    }

    #[test]
    fn decay_is_decoupled_and_skips_marked_tensors() {
        // Zero gradient: a decayed tensor still shrinks, a no-decay
        // tensor does not move at all.
        let mut p = Params::<f32>::new();
        p.push("w", &[1], false, vec![1.0]);
        p.push("b", &[1], true, vec![1.0]);
        let g = GradStore::<f32>::zeroed(&p);
        let mut opt = AdamW::new(&p, 0.9, 0.95, 0.1);
        opt.step(&mut p, &g, 0.5, &[true, true]);
        assert!((p.data(0)[0] - (1.0 - 0.5 * 0.1)).abs() < 1e-7);
        assert_eq!(p.data(1)[0], 1.0);
    }

    #[test]
    fn inactive_tensors_are_left_untouched() {
        let mut p = Params::<f32>::new();
        p.push("a", &[2], false, vec![1.0, 1.0]);
        p.push("dec.motion.head.weight", &[2], false, vec![1.0, 1.0]);
        let mut g = GradStore::<f32>::zeroed(&p);
        g.data_mut(0).copy_from_slice(&[1.0, 1.0]);
        g.data_mut(1).copy_from_slice(&[1.0, 1.0]);
        let mut opt = AdamW::new(&p, 0.9, 0.95, 0.05);
        let active: Vec<bool> = (0..p.len()).map(|i| !motion_branch_tensor(p.name(i))).collect();
        opt.step(&mut p, &g, 0.1, &active);
        assert_ne!(p.data(0)[0], 1.0);
        assert_eq!(p.data(1), &[1.0, 1.0]);
        assert_eq!(opt.moment1(1), &[0.0, 0.0]);
    }

    #[test]
    fn motion_branch_names_cover_both_decoder_modes() {
        assert!(motion_branch_tensor("dec.motion.blocks.0.attn.qkv.weight"));
        assert!(motion_branch_tensor("dec.joint.motion_head.weight"));
        assert!(!motion_branch_tensor("dec.spatial.head.weight"));
        assert!(!motion_branch_tensor("dec.joint.blocks.0.ln1.weight"));
        assert!(!motion_branch_tensor("enc.blocks.1.mlp.fc1.weight"));
    }

    #[test]
    fn state_round_trip_is_bit_exact() {
        let mut p = one_tensor_params(vec![0.3, 0.7, -0.1], false);
        let mut g = GradStore::<f32>::zeroed(&p);
        g.data_mut(0).copy_from_slice(&[0.2, -0.4, 0.9]);
        let mut opt = AdamW::new(&p, 0.9, 0.95, 0.05);
        for _ in 0..3 {
            opt.step(&mut p, &g, 1e-3, &[true]);
        }
        let (t, m, v) = (opt.t, opt.moment1(0).to_vec(), opt.moment2(0).to_vec());
        let snapshot: Vec<f32> = p.data(0).to_vec();

        let mut p2 = one_tensor_params(snapshot, false);
        let mut opt2 = AdamW::new(&p2, 0.9, 0.95, 0.05);
        opt2.t = t;
        opt2.load_moments(0, &m, &v).unwrap();
        opt.step(&mut p, &g, 5e-4, &[true]);
        opt2.step(&mut p2, &g, 5e-4, &[true]);
        assert_eq!(p.data(0), p2.data(0));
    }
}
