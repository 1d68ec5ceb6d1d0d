use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adagrad,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "adagrad" => Some(OptimizerKind::Adagrad),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adagrad => "adagrad",
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

/// Per-tensor optimizer state.
///
/// Adam keeps first and second moments; Adagrad keeps the running sum of
/// squared gradients in `second` and leaves `first` empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Matrix,
    pub second: Matrix,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, rows: usize, cols: usize) -> Self {
        let (eps, first) = match kind {
            OptimizerKind::Adam => (1e-8, Matrix::zeros(rows, cols)),
            OptimizerKind::Adagrad => (1e-10, Matrix::zeros(0, 0)),
        };
        OptimizerState {
            kind,
            lr,
            eps,
            step: 0,
            first,
            second: Matrix::zeros(rows, cols),
        }
    }

    pub fn for_tensor(kind: OptimizerKind, lr: f64, like: &Matrix) -> Self {
        Self::new(kind, lr, like.rows(), like.cols())
    }

    /// Apply one descent step to `params` in place.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        params.ensure_shape(grads, "optimizer params/grads")?;
        if !params.same_shape(&self.second) {
            return Err(Error::Dimension(format!(
                "optimizer state {:?} vs params {:?}",
                self.second.shape(),
                params.shape()
            )));
        }
        self.step += 1;
        let lr = self.lr;
        let eps = self.eps;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as f64;
                let c1 = 1.0 - ADAM_BETA1.powf(t);
                let c2 = 1.0 - ADAM_BETA2.powf(t);
                let p = params.as_mut_slice();
                let m = self.first.as_mut_slice();
                let v = self.second.as_mut_slice();
                for (i, &g) in grads.as_slice().iter().enumerate() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            OptimizerKind::Adagrad => {
                let p = params.as_mut_slice();
                let acc = self.second.as_mut_slice();
                for (i, &g) in grads.as_slice().iter().enumerate() {
                    acc[i] += g * g;
                    p[i] -= lr * g / (acc[i] + eps).sqrt();
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::Numerical("optimizer produced non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters.
pub fn optimizer_step(state: &mut OptimizerState, params: &Matrix, grads: &Matrix) -> Result<Matrix> {
    let mut out = params.clone();
    state.step(&mut out, grads)?;
    Ok(out)
}

/// One optimizer state per tensor; `None` marks tensors it does not own.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSet {
    pub states: Vec<Option<OptimizerState>>,
}

impl OptimizerSet {
    pub fn new(kind: OptimizerKind, lr: f64, tensors: &[&Matrix], mask: &[bool]) -> Self {
        OptimizerSet {
            states: tensors
                .iter()
                .zip(mask)
                .map(|(t, &m)| m.then(|| OptimizerState::for_tensor(kind, lr, t)))
                .collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for s in self.states.iter_mut().flatten() {
            s.lr = lr;
        }
    }

    /// Step every owned tensor; the rest are left alone.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::Dimension(format!(
                "optimizer over {} tensors given {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((state, p), g) in self.states.iter_mut().zip(params).zip(grads) {
            if let Some(state) = state {
                state.step(p, g)?;
            }
        }
        Ok(())
    }
}
