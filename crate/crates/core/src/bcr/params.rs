use rand::Rng;

use crate::data::{Catalog, Domain};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Structural hyperparameters of the recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub dim: usize,
    pub att_dim: usize,
    pub max_seq_len: usize,
    pub k_a: usize,
    pub k_b: usize,
    /// Smoothing exponent of the attention normaliser, in `[0.1, 1]`.
    pub beta: f64,
    pub l2: f64,
    /// When false the positional table stays at zero and is never trained.
    pub use_position: bool,
    pub catalog: Catalog,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.att_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("dim, att_dim and max_seq_len must be positive".into()));
        }
        if self.k_a == 0 || self.k_b == 0 {
            return Err(Error::Config("latent user counts must be at least 1".into()));
        }
        if !(0.1..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0.1, 1], got {}", self.beta)));
        }
        if self.l2 < 0.0 {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }

    /// Latent users for the head predicting `domain`.
    pub fn k(&self, domain: Domain) -> usize {
        match domain {
            Domain::A => self.k_a,
            Domain::B => self.k_b,
        }
    }

    pub fn position_rows(&self) -> usize {
        2 * self.max_seq_len
    }
}

/// One user identification network: latent-user map plus attention MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Uin {
    /// `K x max_seq_len`, right-aligned against the most recent item.
    pub w: Matrix,
    /// `K x d`.
    pub bias: Matrix,
    /// `att_dim x 2d`, applied to `[query ; user]`.
    pub att_w: Matrix,
    pub att_b: Matrix,
    pub att_h: Matrix,
}

impl Uin {
    fn init<R: Rng + ?Sized>(k: usize, shape: &ModelShape, rng: &mut R) -> Self {
        let d = shape.dim;
        Uin {
            w: Matrix::xavier(k, shape.max_seq_len, rng),
            bias: Matrix::zeros(k, d),
            att_w: Matrix::xavier(shape.att_dim, 2 * d, rng),
            att_b: Matrix::zeros(shape.att_dim, 1),
            att_h: Matrix::xavier(shape.att_dim, 1, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.w.rows()
    }

    fn tensors(&self) -> [&Matrix; 5] {
        [&self.w, &self.bias, &self.att_w, &self.att_b, &self.att_h]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.w,
            &mut self.bias,
            &mut self.att_w,
            &mut self.att_b,
            &mut self.att_h,
        ]
    }
}

const UIN_NAMES: [&str; 5] = ["w", "bias", "att_w", "att_b", "att_h"];

/// Prediction head for one target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// Encodes the target domain's own history.
    pub own: Uin,
    /// Encodes the sequence transferred from the other domain.
    pub transfer: Uin,
    /// `d x 2d` projection of `[G_transferred ; G_own]`.
    pub fuse: Matrix,
    pub bias: Matrix,
}

impl Head {
    fn init<R: Rng + ?Sized>(domain: Domain, shape: &ModelShape, rng: &mut R) -> Self {
        let d = shape.dim;
        let k = shape.k(domain);
        let own = Uin::init(k, shape, rng);
        let transfer = Uin::init(k, shape, rng);
        // [I | I]: starts as the sum of both account vectors
        let mut fuse = Matrix::zeros(d, 2 * d);
        for i in 0..d {
            fuse.set(i, i, 1.0);
            fuse.set(i, d + i, 1.0);
        }
        Head {
            own,
            transfer,
            fuse,
            bias: Matrix::zeros(1, 1),
        }
    }
}

/// Every trainable tensor of the recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    /// Item tables for A and B, `(size+1) x d`; row 0 is padding and frozen at zero.
    pub emb: [Matrix; 2],
    /// Positions counted back from the target, shared by both domains.
    pub pos: Matrix,
    pub heads: [Head; 2],
}

/// Tensors per head, in [`ModelParams::tensors`] order.
const HEAD_TENSORS: usize = 12;

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let d = shape.dim;
        let mut emb = [
            Matrix::xavier(shape.catalog.items_a + 1, d, rng),
            Matrix::xavier(shape.catalog.items_b + 1, d, rng),
        ];
        for e in &mut emb {
            e.row_mut(0).fill(0.0);
        }
        let pos = if shape.use_position {
            Matrix::xavier(shape.position_rows(), d, rng)
        } else {
            Matrix::zeros(shape.position_rows(), d)
        };
        let heads = [Head::init(Domain::A, &shape, rng), Head::init(Domain::B, &shape, rng)];
        Ok(ModelParams {
            shape,
            emb,
            pos,
            heads,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn emb(&self, domain: Domain) -> &Matrix {
        &self.emb[domain.index()]
    }

    pub fn head(&self, domain: Domain) -> &Head {
        &self.heads[domain.index()]
    }

    pub fn names() -> Vec<String> {
        let mut names = vec!["emb_a".to_string(), "emb_b".into(), "pos".into()];
        for d in ["a", "b"] {
            for part in ["own", "transfer"] {
                for n in UIN_NAMES {
                    names.push(format!("{d}.{part}.{n}"));
                }
            }
            names.push(format!("{d}.fuse"));
            names.push(format!("{d}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.emb[0], &self.emb[1], &self.pos];
        for h in &self.heads {
            out.extend(h.own.tensors());
            out.extend(h.transfer.tensors());
            out.push(&h.fuse);
            out.push(&h.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let [e0, e1] = &mut self.emb;
        let mut out = vec![e0, e1, &mut self.pos];
        for h in &mut self.heads {
            out.extend(h.own.tensors_mut());
            out.extend(h.transfer.tensors_mut());
            out.push(&mut h.fuse);
            out.push(&mut h.bias);
        }
        out
    }

    /// Which tensors the loss of `domain` depends on (and its optimizer owns).
    pub fn domain_mask(&self, domain: Domain) -> Vec<bool> {
        let mut mask = vec![true, true, self.shape.use_position];
        for d in Domain::BOTH {
            mask.extend(std::iter::repeat_n(d == domain, HEAD_TENSORS));
        }
        mask
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Sum of squares over the tensors in `mask`.
    pub fn sum_squares(&self, mask: &[bool]) -> f64 {
        self.tensors()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t.sum_squares())
            .sum()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    /// Zero the padding rows of both embedding tables.
    pub fn clear_padding(&mut self) {
        for e in &mut self.emb {
            e.row_mut(0).fill(0.0);
        }
    }

    /// Order-dependent checksum of every bit of every tensor.
    pub fn checksum(&self) -> u64 {
        checksum_tensors(self.tensors())
    }

    pub fn named(&self) -> Vec<(String, Matrix)> {
        Self::names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect()
    }

    /// Replace every tensor from `named`, checking names and shapes.
    pub fn load_named(&mut self, named: &[(String, Matrix)]) -> Result<()> {
        let names = Self::names();
        if named.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} model tensors, found {}",
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
                    "tensor {want}: checkpoint has {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

pub(crate) fn checksum_tensors<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> u64 {
    // FNV-1a over the raw bits
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for v in t.as_slice() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}
