use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, Real};

/// Handle of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable `rows x cols` matrix with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, value: Vec<T>) -> Self {
        assert_eq!(value.len(), rows * cols, "parameter size");
        Self {
            name: name.into(),
            rows,
            cols,
            m: vec![T::zero(); value.len()],
            v: vec![T::zero(); value.len()],
            value,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, param: Param<T>) -> ParamId {
        assert!(
            self.find(&param.name).is_none(),
            "duplicate parameter name {}",
            param.name
        );
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    /// Kernel of `fan_in x fan_out`, uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.add(Param::new(name, fan_in, fan_out, value))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(Param::new(name, rows, cols, vec![T::zero(); rows * cols]))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace every value (and moment) with those of `other`, matched by
    /// name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), EngineError> {
        if other.len() != self.len() {
            return Err(EngineError::Shape(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.len()
            )));
        }
        for p in self.params.iter_mut() {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| EngineError::Shape(format!("parameter {} missing", p.name)))?;
            if (src.rows, src.cols) != (p.rows, p.cols) {
                return Err(EngineError::Shape(format!(
                    "parameter {} is {}x{}, expected {}x{}",
                    p.name, src.rows, src.cols, p.rows, p.cols
                )));
            }
            *p = src.clone();
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Apply one update. `grads` pairs parameters with gradients of the same
    /// size; parameters without a gradient keep their value and moments.
    pub fn step<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Vec<T>)],
    ) -> Result<(), EngineError> {
        for (id, g) in grads {
            let p = store.get(*id);
            if g.len() != p.value.len() {
                return Err(EngineError::Shape(format!(
                    "gradient of {} has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(EngineError::NonFinite {
                    op: "adam",
                    detail: format!("gradient of {}", p.name),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, lr, eps) = (T::one(), self.lr, self.eps);
        let params = store.params_mut();
        for (id, g) in grads {
            let p = &mut params[id.0];
            for (((w, m), v), &g) in p.value.iter_mut().zip(&mut p.m).zip(&mut p.v).zip(g) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = m.as_f64() / c1;
                let v_hat = v.as_f64() / c2;
                *w = T::from_f64(w.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let mut ra = ChaCha8Rng::seed_from_u64(3);
        let mut rb = ChaCha8Rng::seed_from_u64(3);
        let ia = a.add_uniform("w", 27, 32, &mut ra);
        b.add_uniform("w", 27, 32, &mut rb);
        assert_eq!(a, b);
        let bound = (6.0f64 / 59.0).sqrt();
        assert!(a.get(ia).value.iter().all(|x| x.abs() <= bound));
        let spread = a.get(ia).value.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(spread > 0.8 * bound);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add(Param::new("w", 1, 3, vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::default();
        adam.step(&mut s, &[(id, vec![0.0; 3])]).unwrap();
        assert_eq!(s.get(id).value, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // after one step m_hat = g and v_hat = g², so the update is
        // -lr * g / (|g| + eps)
        let mut s = ParamStore::<f64>::new();
        let id = s.add(Param::new("w", 1, 3, vec![1.0, -2.0, 0.5]));
        let g = vec![0.3, -4.0, 1e-9];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut s, &[(id, g.clone())]).unwrap();
        let before = [1.0, -2.0, 0.5];
        for k in 0..3 {
            let want = before[k] - 1e-3 * g[k] / (g[k].abs() + 1e-8);
            assert!((s.get(id).value[k] - want).abs() < 1e-15, "{k}");
        }
    }

    #[test]
    fn quadratic_decreases_after_warmup() {
        // f(w) = Σ (w - c)², gradient 2 (w - c)
        let c = [0.7, -1.3, 2.0, 0.1];
        let mut s = ParamStore::<f64>::new();
        let id = s.add(Param::new("w", 1, 4, vec![0.0; 4]));
        let mut adam = Adam::new(1e-2);
        let loss = |w: &[f64]| w.iter().zip(&c).map(|(w, c)| (w - c).powi(2)).sum::<f64>();
        let mut history = Vec::new();
        for _ in 0..200 {
            let w = s.get(id).value.clone();
            history.push(loss(&w));
            let g = w.iter().zip(&c).map(|(w, c)| 2.0 * (w - c)).collect();
            adam.step(&mut s, &[(id, g)]).unwrap();
        }
        assert!(history[10..].windows(2).all(|w| w[1] < w[0]));
        assert!(history[199] < 0.5 * history[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add_zeros("b", 1, 2);
        let err = Adam::default().step(&mut s, &[(id, vec![f32::NAN, 0.0])]);
        assert!(matches!(err, Err(EngineError::NonFinite { .. })));
    }
}
