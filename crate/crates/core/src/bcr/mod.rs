//! Basic cross-domain recommender: positional item embeddings, latent-user
//! identification with target-supervised attention, and a fused prediction
//! head per domain, trained with a regularised log loss.

mod model;
mod params;

pub use model::{
    account_representation, attention_score, embed_with_position, forward_account,
    fuse_and_predict, latent_users, loss_and_grads, predict, score_candidates, smoothed_softmax,
    transferred_representations,
    AccountState, Attended, Dropout, Encoded, PROB_CLAMP,
};
pub use params::{Head, ModelParams, ModelShape, Uin};

pub(crate) use params::checksum_tensors;

use crate::data::{Domain, TrainingInstance};
use crate::error::Result;
use crate::numerics::finite_difference_check;

/// Central-difference check of [`loss_and_grads`] over every tensor.
/// Returns `(tensor name, max relative error)` pairs.
pub fn gradient_check(
    params: &ModelParams,
    batch: &[TrainingInstance],
    domain: Domain,
    dropout: Option<Dropout>,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, grads) = loss_and_grads(params, batch, domain, dropout)?;
    let names = ModelParams::names();
    let mut out = Vec::with_capacity(names.len());
    for (idx, name) in names.into_iter().enumerate() {
        let base = params.tensors()[idx].clone();
        let analytic = grads.tensors()[idx].clone();
        let mut probe = params.clone();
        let err = finite_difference_check(
            |m| {
                *probe.tensors_mut()[idx] = m.clone();
                loss_and_grads(&probe, batch, domain, dropout)
                    .map(|(l, _)| l)
                    .unwrap_or(f64::NAN)
            },
            &base,
            &analytic,
            h,
        )?;
        out.push((name, err));
    }
    Ok(out)
}
