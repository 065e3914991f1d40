use super::{MlpGradients, MlpModel, PredictorError};

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(num_params: usize) -> Self {
        Self::with_lr(num_params, Self::DEFAULT_LR)
    }

    pub fn with_lr(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// One Adam update of `model` in place.
pub fn adam_step(
    model: &mut MlpModel,
    grads: &MlpGradients,
    state: &mut AdamState,
) -> Result<(), PredictorError> {
    let n = model.num_params();
    if grads.layer_shapes() != model.layer_shapes() || state.m.len() != n || state.v.len() != n {
        return Err(PredictorError::ShapeMismatch(
            "gradient or optimizer state does not match the model".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let g = grads.params();
    for (i, p) in model.params_mut().enumerate() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpModel {
        let mut m = MlpModel::zeros(&[2, 3, 1]);
        m.params_mut()
            .enumerate()
            .for_each(|(i, p)| *p = i as f64 * 0.1);
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = small();
        let before = m.clone();
        let mut st = AdamState::new(m.num_params());
        let zero = m.zeros_like();
        adam_step(&mut m, &zero, &mut st).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut m = small();
        let before = m.params();
        let mut g = m.zeros_like();
        g.params_mut()
            .enumerate()
            .for_each(|(i, p)| *p = if i % 2 == 0 { 3.0 } else { -0.02 });
        let mut st = AdamState::new(m.num_params());
        adam_step(&mut m, &g, &mut st).unwrap();
        for ((a, b), gi) in m.params().iter().zip(&before).zip(g.params()) {
            // m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
            let expected = -1e-4 * gi / (gi.abs() + 1e-8);
            assert!((a - (b + expected)).abs() < 1e-15);
            assert!(((a - b) + 1e-4 * gi.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn sequence_is_reproducible() {
        let run = || {
            let mut m = small();
            let mut st = AdamState::new(m.num_params());
            let mut g = m.zeros_like();
            for k in 0..5 {
                g.params_mut()
                    .enumerate()
                    .for_each(|(i, p)| *p = ((i + k) as f64).sin());
                adam_step(&mut m, &g, &mut st).unwrap();
            }
            (m, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut m = small();
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut m, &small(), &mut st).is_err());
    }
}
