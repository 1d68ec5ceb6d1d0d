use rand::Rng;

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::numerics::{dot, relu, sigmoid, Matrix};

/// Two-layer policy `P(a = 1 | S) = sigmoid(w1 . ReLU(W2 S + b))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    /// `hidden x state_dim`.
    pub w2: Matrix,
    /// `hidden x 1`.
    pub b: Matrix,
    /// `1 x hidden`.
    pub w1: Matrix,
}

impl PolicyNet {
    pub fn init<R: Rng + ?Sized>(state_dim: usize, hidden: usize, rng: &mut R) -> Self {
        PolicyNet {
            w2: Matrix::xavier(hidden, state_dim, rng),
            b: Matrix::zeros(hidden, 1),
            w1: Matrix::xavier(1, hidden, rng),
        }
    }

    pub fn zeros(state_dim: usize, hidden: usize) -> Self {
        PolicyNet {
            w2: Matrix::zeros(hidden, state_dim),
            b: Matrix::zeros(hidden, 1),
            w1: Matrix::zeros(1, hidden),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w2.cols()
    }

    fn check(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state of length {} for a policy over {} features",
                state.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    fn hidden(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pre: Vec<f64> = self
            .w2
            .matvec(state)
            .iter()
            .zip(self.b.as_slice())
            .map(|(x, b)| x + b)
            .collect();
        let e = pre.iter().map(|&x| relu(x)).collect();
        (pre, e)
    }

    /// `P(a = 1 | state)`.
    pub fn act_prob(&self, state: &[f64]) -> Result<f64> {
        self.check(state)?;
        let (_, e) = self.hidden(state);
        Ok(sigmoid(dot(self.w1.as_slice(), &e)))
    }

    /// `pi(state, action)`.
    pub fn policy_prob(&self, state: &[f64], action: bool) -> Result<f64> {
        let p1 = self.act_prob(state)?;
        Ok(if action { p1 } else { 1.0 - p1 })
    }

    /// Accumulate `scale * grad log pi(state, action)` into `grads`; returns `log pi`.
    pub fn accumulate_log_grad(&self, state: &[f64], action: bool, scale: f64, grads: &mut PolicyNet) -> Result<f64> {
        self.check(state)?;
        let (pre, e) = self.hidden(state);
        let y = dot(self.w1.as_slice(), &e);
        let p1 = sigmoid(y);
        // d log sigmoid(+-y) / dy
        let dy = scale * if action { 1.0 - p1 } else { -p1 };
        let log_pi = if action { -softplus(-y) } else { -softplus(y) };
        if dy != 0.0 {
            crate::numerics::axpy(dy, &e, grads.w1.as_mut_slice());
            let dpre: Vec<f64> = pre
                .iter()
                .zip(self.w1.as_slice())
                .map(|(&p, &w)| if p > 0.0 { dy * w } else { 0.0 })
                .collect();
            grads.w2.add_outer(1.0, &dpre, state);
            crate::numerics::axpy(1.0, &dpre, grads.b.as_mut_slice());
        }
        Ok(log_pi)
    }

    fn tensors(&self) -> [&Matrix; 3] {
        [&self.w2, &self.b, &self.w1]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w2, &mut self.b, &mut self.w1]
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// High- and low-level policies for both transfer directions, indexed by
/// the domain being predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterParams {
    pub high: [PolicyNet; 2],
    pub low: [PolicyNet; 2],
}

impl FilterParams {
    /// Item embedding width `dim`; state sizes `dim + 2` and `2 dim + 2`.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        FilterParams {
            high: [
                PolicyNet::init(dim + 2, hidden, rng),
                PolicyNet::init(dim + 2, hidden, rng),
            ],
            low: [
                PolicyNet::init(2 * dim + 2, hidden, rng),
                PolicyNet::init(2 * dim + 2, hidden, rng),
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn high(&self, domain: Domain) -> &PolicyNet {
        &self.high[domain.index()]
    }

    pub fn low(&self, domain: Domain) -> &PolicyNet {
        &self.low[domain.index()]
    }

    pub fn names() -> Vec<String> {
        let mut out = Vec::new();
        for level in ["high", "low"] {
            for d in ["a", "b"] {
                for t in ["w2", "b", "w1"] {
                    out.push(format!("{level}_{d}.{t}"));
                }
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.high
            .iter()
            .chain(&self.low)
            .flat_map(|p| p.tensors())
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let FilterParams { high, low } = self;
        high.iter_mut()
            .chain(low.iter_mut())
            .flat_map(|p| p.tensors_mut())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn axpy(&mut self, alpha: f64, other: &FilterParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        crate::bcr::checksum_tensors(self.tensors())
    }

    pub fn named(&self) -> Vec<(String, Matrix)> {
        Self::names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect()
    }

    pub fn load_named(&mut self, named: &[(String, Matrix)]) -> Result<()> {
        let names = Self::names();
        if named.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} filter tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for ((want, slot), (got, value)) in names.iter().zip(self.tensors_mut()).zip(named) {
            if want != got {
                return Err(Error::Checkpoint(format!("expected tensor {want}, found {got}")));
            }
            if slot.shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {want}: checkpoint has {:?}, filter expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

/// `lambda * candidate + (1 - lambda) * old`, elementwise.
pub fn soft_update(old: &FilterParams, candidate: &FilterParams, lambda: f64) -> Result<FilterParams> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("soft-update coefficient {lambda} outside [0, 1]")));
    }
    let mut out = old.clone();
    for ((o, n), c) in out.tensors_mut().into_iter().zip(old.tensors()).zip(candidate.tensors()) {
        n.ensure_shape(c, "soft update")?;
        for (x, (&a, &b)) in o.as_mut_slice().iter_mut().zip(n.as_slice().iter().zip(c.as_slice())) {
            *x = lambda * b + (1.0 - lambda) * a;
        }
    }
    Ok(out)
}
