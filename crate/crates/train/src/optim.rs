//! AdamW with global gradient-norm clipping. Beta/eps follow the usual
//! decoder-LM defaults; weight decay applies only to matrix-shaped
//! parameters (norm gains and biases are exempt).

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 1.0;

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    pub weight_decay: f64,
    state: std::collections::BTreeMap<String, Slot>,
    t: usize,
}

/// Scale factor that clips a joint gradient norm to GRAD_CLIP.
pub fn clip_scale<'a>(grads: impl Iterator<Item = &'a [f32]>) -> f64 {
    let sq: f64 = grads
        .flat_map(|g| g.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > GRAD_CLIP {
        GRAD_CLIP / norm
    } else {
        1.0
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            state: Default::default(),
            t: 0,
        }
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one named parameter in place.
    pub fn step_param(
        &mut self,
        name: &str,
        vals: &mut [f32],
        grad: &[f32],
        ndim: usize,
        lr: f64,
        clip: f64,
    ) {
        debug_assert!(self.t > 0, "begin_step before step_param");
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; vals.len()],
            v: vec![0.0; vals.len()],
        });
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let decay = if ndim >= 2 { self.weight_decay } else { 0.0 };
        for i in 0..vals.len() {
            let g = grad[i] as f64 * clip;
            let m = BETA1 * slot.m[i] as f64 + (1.0 - BETA1) * g;
            let v = BETA2 * slot.v[i] as f64 + (1.0 - BETA2) * g * g;
            slot.m[i] = m as f32;
            slot.v[i] = v as f32;
            let mh = m / bc1;
            let vh = v / bc2;
            let mut w = vals[i] as f64;
            w -= lr * (mh / (vh.sqrt() + EPS) + decay * w);
            vals[i] = w as f32;
        }
    }
}
