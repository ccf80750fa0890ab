//! Learnable parameters, optimizer state, and non-learnable buffers
//! (batch-norm running statistics). A [`ParamStore`] owns all of a model's
//! state as plain data, so models are cheap to clone, serialize, and move
//! between threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tape, TensorId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Index of a learnable parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

/// Index of a non-learnable buffer in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) u32);

/// A learnable tensor plus its gradient and Adam moment estimates.
#[derive(Debug, Clone)]
pub struct Parameter<R> {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<R>,
    pub grad: Vec<R>,
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step_count: u64,
}

/// A named non-learnable state vector (running mean/variance).
#[derive(Debug, Clone)]
pub struct Buffer<R> {
    pub name: String,
    pub values: Vec<R>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<R> {
    params: Vec<Parameter<R>>,
    buffers: Vec<Buffer<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, shape: Shape, values: Vec<R>) -> ParamId {
        let len = values.len();
        debug_assert_eq!(len, shape.len());
        let id = ParamId(self.params.len() as u32);
        self.params.push(Parameter {
            name: name.into(),
            shape,
            values,
            grad: vec![R::zero(); len],
            m: vec![R::zero(); len],
            v: vec![R::zero(); len],
            step_count: 0,
        });
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, values: Vec<R>) -> BufferId {
        let id = BufferId(self.buffers.len() as u32);
        self.buffers.push(Buffer {
            name: name.into(),
            values,
        });
        id
    }

    pub fn param(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0 as usize]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0 as usize]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<R> {
        &self.buffers[id.0 as usize]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<R> {
        &mut self.buffers[id.0 as usize]
    }

    pub fn params(&self) -> &[Parameter<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<R>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<R>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<R>] {
        &mut self.buffers
    }

    /// Total element count over all learnable parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(R::zero());
        }
    }

    /// Register a parameter as a leaf of `tape`. Registering the same
    /// parameter twice returns the same node, so gradients from every use
    /// (e.g. both feedback rounds) sum into one leaf.
    pub fn bind(&self, tape: &mut Tape<R>, id: ParamId) -> TensorId {
        let p = self.param(id);
        tape.leaf_keyed(id.0 as u64, || (p.shape, p.values.clone()))
    }

    /// Accumulate the tape's leaf gradients into the store (`+=`).
    pub fn absorb_grads(&mut self, tape: &Tape<R>) {
        for (key, grad) in tape.keyed_grads() {
            if let Some(g) = grad {
                let p = &mut self.params[key as usize];
                for (dst, src) in p.grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
        }
    }
}

/// Bias-corrected Adam update, applied in place with the fixed constants
/// beta1 = 0.9, beta2 = 0.999, eps = 1e-8. Gradients are left untouched;
/// the caller re-zeroes them.
pub fn adam_step<R: Real>(store: &mut ParamStore<R>, lr: f64) {
    let b1 = R::from_f64(ADAM_BETA1);
    let b2 = R::from_f64(ADAM_BETA2);
    let eps = R::from_f64(ADAM_EPSILON);
    let one = R::one();
    for p in store.params_mut() {
        p.step_count += 1;
        let t = p.step_count as i32;
        let corr1 = R::from_f64(1.0 - ADAM_BETA1.powi(t));
        let corr2 = R::from_f64(1.0 - ADAM_BETA2.powi(t));
        let lr_r = R::from_f64(lr);
        for i in 0..p.values.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let m_hat = p.m[i] / corr1;
            let v_hat = p.v[i] / corr2;
            p.values[i] = p.values[i] - lr_r * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// He-uniform initialization: U(-limit, limit) with limit = sqrt(6 / fan_in).
/// Samples are drawn in f64 and narrowed, so the stream is reproducible.
pub fn he_uniform<R: Real>(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<R> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen();
            R::from_f64((2.0 * u - 1.0) * limit)
        })
        .collect()
}

/// Convenience: a conv weight parameter (cout, cin, kh, kw) with He-uniform
/// init over fan_in = cin*kh*kw.
pub fn conv_weight<R: Real>(
    store: &mut ParamStore<R>,
    rng: &mut ChaCha8Rng,
    name: impl Into<String>,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> Result<ParamId> {
    let shape = Shape::new(cout, cin, kh, kw)?;
    let values = he_uniform(rng, cin * kh * kw, shape.len());
    Ok(store.add_param(name, shape, values))
}

/// A zero-initialized per-channel vector parameter, shaped (c,1,1,1).
pub fn channel_param<R: Real>(
    store: &mut ParamStore<R>,
    name: impl Into<String>,
    c: usize,
    fill: R,
) -> Result<ParamId> {
    let shape = Shape::new(c, 1, 1, 1)?;
    Ok(store.add_param(name, shape, vec![fill; c]))
}

impl<R: Real> ParamStore<R> {
    /// Look up a parameter id by exact name (checkpoint loading, tests).
    pub fn find_param(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|i| ParamId(i as u32))
            .ok_or_else(|| Error::contract(format!("no parameter named {name:?}")))
    }

    pub fn find_buffer(&self, name: &str) -> Result<BufferId> {
        self.buffers
            .iter()
            .position(|b| b.name == name)
            .map(|i| BufferId(i as u32))
            .ok_or_else(|| Error::contract(format!("no buffer named {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("p", Shape::new(1, 1, 1, 3).unwrap(), vec![1.0, 2.0, 3.0]);
        store.param_mut(id).grad = vec![0.5, -0.5, 2.0];
        adam_step(&mut store, 0.1);
        let p = store.param(id);
        // First step: m_hat/sqrt(v_hat) = sign(g) up to eps, so |delta| ~ lr.
        assert!((p.values[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p.values[1] - (2.0 + 0.1)).abs() < 1e-6);
        assert!((p.values[2] - (3.0 - 0.1)).abs() < 1e-6);
        assert_eq!(p.step_count, 1);
        // Grads untouched.
        assert_eq!(p.grad, vec![0.5, -0.5, 2.0]);
    }

    #[test]
    fn adam_zero_grad_decays_moments_only() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("p", Shape::new(1, 1, 1, 1).unwrap(), vec![1.0]);
        store.param_mut(id).grad = vec![1.0];
        adam_step(&mut store, 0.1);
        let after_one = store.param(id).values[0];
        let m1 = store.param(id).m[0];
        store.param_mut(id).grad = vec![0.0];
        adam_step(&mut store, 0.0); // lr 0: parameter must not move
        let p = store.param(id);
        assert_eq!(p.values[0], after_one);
        assert!(p.m[0] < m1);
        assert_eq!(p.step_count, 2);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let id = store.add_param("p", Shape::new(1, 1, 1, 2).unwrap(), vec![0.5, -0.5]);
            for step in 0..10 {
                store.param_mut(id).grad = vec![0.01 * step as f32, -0.02];
                adam_step(&mut store, 1e-3);
            }
            store.param(id).values.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn he_uniform_is_seeded_and_bounded() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let va: Vec<f32> = he_uniform(&mut a, 9, 100);
        let vb: Vec<f32> = he_uniform(&mut b, 9, 100);
        assert_eq!(va, vb);
        let limit = (6.0f32 / 9.0).sqrt();
        assert!(va.iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn shared_leaf_grads_absorb_once_with_two_round_sum() {
        // One parameter used twice on one tape: gradient is the sum of both uses.
        let mut store = ParamStore::<f64>::new();
        let id = store.add_param("w", Shape::new(1, 1, 1, 2).unwrap(), vec![3.0, 4.0]);
        let mut tape = Tape::new();
        let w1 = store.bind(&mut tape, id);
        let w2 = store.bind(&mut tape, id);
        assert_eq!(w1, w2);
        let prod = tape.hadamard(w1, w2).unwrap(); // w^2
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        store.absorb_grads(&tape);
        assert_eq!(store.param(id).grad, vec![6.0, 8.0]);
    }
}
