//! Adam optimizer over flat f32 parameter slices.
//!
//! Moments are kept in f64; updates are computed in f64 and stored back as
//! f32. Slots step independently, so a parameter group that is frozen for an
//! epoch keeps its bias-correction counter.

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, slots: Vec::new() }
    }

    pub fn lr(&self) -> f32 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    /// Registers a parameter slot of the given length; returns its id.
    pub fn register(&mut self, len: usize) -> usize {
        self.slots.push(Slot { m: vec![0.0; len], v: vec![0.0; len], t: 0 });
        self.slots.len() - 1
    }

    /// One Adam step on a slot.
    pub fn step(&mut self, slot: usize, params: &mut [f32], grads: &[f32]) {
        let s = &mut self.slots[slot];
        assert_eq!(params.len(), s.m.len(), "slot length mismatch");
        assert_eq!(grads.len(), s.m.len(), "gradient length mismatch");
        s.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(s.t as i32);
        let bc2 = 1.0 - c.beta2.powi(s.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
            s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = s.m[i] / bc1;
            let v_hat = s.v[i] / bc2;
            let update = c.lr as f64 * m_hat / (v_hat.sqrt() + c.eps);
            params[i] = (params[i] as f64 - update) as f32;
        }
    }
}
