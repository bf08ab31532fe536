//! Adam parameter updates with bias correction.

use crate::{Error, Result};

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    /// Bias corrections for the current step, cached by `begin_step`.
    corrections: (f64, f64),
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Standard defaults: beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            corrections: (1.0, 1.0),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam step, in place:
    /// m ← β1·m + (1−β1)·g, v ← β2·v + (1−β2)·g²,
    /// θ ← θ − lr·m̂/(√v̂ + ε).
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::LengthMismatch(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adam: non-finite gradient {} at parameter index {i}",
                grads[i]
            )));
        }
        self.begin_step();
        self.apply_range(0, params, grads)
    }

    /// Advances the step counter and caches the bias corrections, so one
    /// logical step can then be applied over disjoint parameter ranges with
    /// `apply_range`. Optimizers fused into a layer sweep use this to avoid
    /// materializing the full gradient vector.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
        self.corrections = (
            1.0 - self.beta1.powi(self.step_count as i32),
            1.0 - self.beta2.powi(self.step_count as i32),
        );
    }

    /// Applies the step begun by `begin_step` to `params`, which the caller
    /// asserts live at `offset` within the flat vector this state was sized
    /// for. Ranges must not overlap within one step.
    pub fn apply_range(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || offset + params.len() > self.first_moment.len() {
            return Err(Error::LengthMismatch(format!(
                "adam: range {}..{} with {} grads, state for {}",
                offset,
                offset + params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "adam: non-finite gradient {} at parameter index {}",
                grads[i],
                offset + i
            )));
        }
        let (bc1, bc2) = self.corrections;
        let moments1 = &mut self.first_moment[offset..offset + params.len()];
        let moments2 = &mut self.second_moment[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * moments1[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * moments2[i] + (1.0 - self.beta2) * g * g;
            moments1[i] = m;
            moments2[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_almost_lr() {
        // Bias correction makes m̂ = v̂ = 1 on the first unit-gradient step,
        // so the move is lr/(1+eps).
        let mut state = AdamState::new(1, 0.005);
        let mut p = vec![0.0];
        state.update(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.005).abs() < 1e-7, "got {}", p[0]);
        assert!((p[0] + 0.005 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut state = AdamState::new(3, 0.005);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        state.update(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn two_unit_steps_move_further_than_one() {
        let mut state = AdamState::new(1, 0.005);
        let mut p = vec![0.0];
        state.update(&mut p, &[1.0]).unwrap();
        let theta1 = p[0].abs();
        state.update(&mut p, &[1.0]).unwrap();
        let theta2 = p[0].abs();
        assert!(theta2 > theta1);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut state = AdamState::new(2, 0.005);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(state.update(&mut p, &[1.0]), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn non_finite_gradient_names_index() {
        let mut state = AdamState::new(3, 0.005);
        let mut p = vec![0.0; 3];
        let err = state.update(&mut p, &[0.0, f64::NAN, 0.0]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn ranged_application_matches_single_update() {
        let mut whole = AdamState::new(5, 0.01);
        let mut split = AdamState::new(5, 0.01);
        let mut p_whole = vec![1.0, -2.0, 0.5, 3.0, -1.0];
        let mut p_split = p_whole.clone();
        let g = [0.3, -0.1, 0.9, -0.7, 0.2];
        for _ in 0..3 {
            whole.update(&mut p_whole, &g).unwrap();
            split.begin_step();
            split.apply_range(0, &mut p_split[..2], &g[..2]).unwrap();
            split.apply_range(2, &mut p_split[2..], &g[2..]).unwrap();
        }
        assert_eq!(p_whole, p_split);
        assert_eq!(whole.step_count(), split.step_count());
    }

    #[test]
    fn apply_range_rejects_out_of_bounds() {
        let mut state = AdamState::new(4, 0.01);
        let mut p = vec![0.0; 3];
        assert!(matches!(
            state.apply_range(2, &mut p, &[0.0; 3]),
            Err(Error::LengthMismatch(_))
        ));
        let err = state.apply_range(1, &mut p, &[0.0, f64::INFINITY, 0.0]).unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }
}
