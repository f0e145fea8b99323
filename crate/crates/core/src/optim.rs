//! Adam and the plateau learning-rate schedule.

use crate::error::{expect_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers mirroring the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let (m, v) = lengths.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { t: 0, m, v }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }
}

/// One bias-corrected Adam update of every parameter buffer.
///
/// Non-finite gradients abort the step before anything is modified.
pub fn adam_step(params: &mut [&mut [f32]], grads: &[&[f32]], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    const OP: &str = "adam_step";
    expect_dim(OP, "gradient buffers", params.len(), grads.len())?;
    expect_dim(OP, "moment buffers", params.len(), state.m.len())?;
    if !(lr > 0.0) {
        return Err(Error::invalid(OP, format!("learning rate must be positive, got {lr}")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        expect_dim(OP, "gradient length", p.len(), g.len())?;
        expect_dim(OP, "moment length", p.len(), state.m[i].len())?;
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient buffer {i}, element {j}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (inv_bc1, inv_bc2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
    let (lr, eps) = (lr as f32, cfg.eps as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Resumable state of [`PlateauSchedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub lr: f64,
    /// Lowest window-mean loss seen so far.
    pub best: f64,
    pub bad_windows: u32,
    pub window_sum: f64,
    pub window_len: u32,
}

/// Multiplies the learning rate by `decay` whenever the mean training loss
/// over `patience` consecutive windows of `window` steps fails to improve on
/// the best window so far; never drops below `lr_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr_start: f64,
    pub lr_min: f64,
    pub decay: f64,
    pub window: u32,
    pub patience: u32,
    pub state: ScheduleState,
}

impl PlateauSchedule {
    pub fn new(lr_start: f64, lr_min: f64, decay: f64, window: u32, patience: u32) -> Result<Self> {
        const OP: &str = "PlateauSchedule";
        if !(lr_min > 0.0 && lr_min <= lr_start) {
            return Err(Error::invalid(OP, format!("need 0 < lr_min <= lr_start, got {lr_min} / {lr_start}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(OP, format!("decay must be in (0, 1], got {decay}")));
        }
        if window == 0 || patience == 0 {
            return Err(Error::invalid(OP, "window and patience must be positive"));
        }
        Ok(PlateauSchedule {
            lr_start,
            lr_min,
            decay,
            window,
            patience,
            state: ScheduleState {
                lr: lr_start,
                best: f64::INFINITY,
                bad_windows: 0,
                window_sum: 0.0,
                window_len: 0,
            },
        })
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    /// Record one step's loss; returns the learning rate for the next step.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let st = &mut self.state;
        st.window_sum += loss;
        st.window_len += 1;
        if st.window_len >= self.window {
            let mean = st.window_sum / st.window_len as f64;
            st.window_sum = 0.0;
            st.window_len = 0;
            if mean < st.best {
                st.best = mean;
                st.bad_windows = 0;
            } else {
                st.bad_windows += 1;
                if st.bad_windows >= self.patience {
                    st.lr = (st.lr * self.decay).max(self.lr_min);
                    st.bad_windows = 0;
                }
            }
        }
        st.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5f32, -1.0, 2.0];
        let g = vec![0.0f32; 3];
        let mut st = AdamState::new([3]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&g], &mut st, 1e-3, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        for g in [0.5f32, -2.0, 3e-3] {
            let mut p = vec![1.0f32];
            let mut st = AdamState::new([1]);
            adam_step(&mut [&mut p], &[&[g]], &mut st, 1e-3, &cfg).unwrap();
            // m̂ = g and v̂ = g² after bias correction
            let expected = 1.0 - 1e-3 * g as f64 / (g.abs() as f64 + cfg.eps);
            assert!((p[0] as f64 - expected).abs() < 1e-7, "g={g}: {} vs {expected}", p[0]);
        }
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut p = vec![0.0f32];
        let mut st = AdamState::new([1]);
        let lr = 1e-3;
        let mut prev = 0.0f32;
        for _ in 0..1000 {
            adam_step(&mut [&mut p], &[&[0.37]], &mut st, lr, &AdamConfig::default()).unwrap();
            let delta = (p[0] - prev) as f64;
            assert!((delta + lr).abs() / lr < 0.01, "step {delta}");
            prev = p[0];
        }
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = vec![1.0f32, 2.0];
        let mut st = AdamState::new([2]);
        let err = adam_step(&mut [&mut p], &[&[0.1, f32::NAN]], &mut st, 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_decays_on_plateau_and_floors() {
        let mut s = PlateauSchedule::new(1e-3, 1e-5, 0.5, 2, 3).unwrap();
        let mut lrs = Vec::new();
        for _ in 0..400 {
            lrs.push(s.observe(1.0));
        }
        assert!(lrs.iter().all(|lr| (1e-5..=1e-3).contains(lr)));
        assert_eq!(*lrs.last().unwrap(), 1e-5);
        // first window sets the best; three flat windows later the rate halves
        assert_eq!(lrs[7], 5e-4);
        assert_eq!(lrs[6], 1e-3);
    }

    #[test]
    fn schedule_holds_while_improving() {
        let mut s = PlateauSchedule::new(1e-3, 1e-5, 0.5, 5, 2).unwrap();
        for i in 0..500 {
            assert_eq!(s.observe(1.0 / (1.0 + i as f64)), 1e-3);
        }
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(PlateauSchedule::new(1e-5, 1e-3, 0.5, 20, 5).is_err());
        assert!(PlateauSchedule::new(1e-3, 1e-5, 0.0, 20, 5).is_err());
    }
}
