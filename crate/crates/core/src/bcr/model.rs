//! Forward and backward passes of the cross-domain recommender.
//!
//! For a target domain X and a scored (query) item with embedding `q`:
//!
//! ```text
//! H_j   = E[item_j] + P[pos_j]                       (real items only)
//! U     = ReLU(W[:, cols] H + b)                     (K x d latent users)
//! f_i   = h . ReLU(W1 [q ; U_i] + b1)
//! a_i   = exp(f_i - f_max) / (sum_j exp(f_j - f_max))^beta
//! G     = sum_i a_i U_i
//! logit = q . (W_p [G_transferred ; G_own]) + b
//! ```
//!
//! Padding never enters the computation: a zero row adds nothing to `W H`,
//! so encoding only the real items with right-aligned columns of `W` is the
//! same as encoding a left-padded batch.

use rand::Rng;
use rayon::prelude::*;

use crate::bcr::params::{ModelParams, Uin};
use crate::data::{Domain, ItemId, SeqItem, TrainingInstance, PAD};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, relu, sigmoid, Matrix};
use crate::rng::{self, StreamRng};

pub const PROB_CLAMP: f64 = 1e-10;

/// Dropout settings for a training pass. Masks for an instance are drawn
/// from a stream keyed by `(seed, account, domain)`.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

impl Dropout {
    fn rng_for(&self, inst: &TrainingInstance) -> Option<(StreamRng, f64)> {
        (self.rate > 0.0).then(|| {
            (
                rng::stream(self.seed, &[inst.account as u64, inst.domain.index() as u64]),
                self.rate,
            )
        })
    }
}

fn dropout_mask(len: usize, drop: &mut Option<(StreamRng, f64)>) -> Option<Vec<f64>> {
    drop.as_mut().map(|(rng, p)| {
        let keep = 1.0 / (1.0 - *p);
        (0..len)
            .map(|_| if rng.gen_bool(*p) { 0.0 } else { keep })
            .collect()
    })
}

/// Query-independent half of a UIN pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub items: Vec<SeqItem>,
    /// Column of `W` used by each item.
    pub cols: Vec<usize>,
    /// Input rows `E[item] + P[pos]`, `n x d`.
    pub h: Matrix,
    /// Pre-activation `W H + b`, `K x d`.
    pub z: Matrix,
    /// Latent users after ReLU and dropout, `K x d`.
    pub u: Matrix,
    pub mask: Option<Vec<f64>>,
}

/// Attention of one query over the latent users.
#[derive(Clone, Debug, PartialEq)]
pub struct Attended {
    pub query: Vec<f64>,
    /// Hidden pre-activations per user, `K x att_dim`.
    pub pre: Matrix,
    /// Hidden activations after ReLU and dropout.
    pub hidden: Matrix,
    pub mask: Option<Vec<f64>>,
    pub scores: Vec<f64>,
    pub alpha: Vec<f64>,
    pub argmax: usize,
    /// Plain softmax of the scores, needed by the backward pass.
    pub softmax: Vec<f64>,
    pub g: Vec<f64>,
}

fn position_row(params: &ModelParams, pos: u32) -> usize {
    (pos as usize).min(params.shape.position_rows() - 1)
}

fn check_item(params: &ModelParams, domain: Domain, item: ItemId) -> Result<()> {
    let size = params.shape.catalog.size(domain);
    if item as usize > size {
        return Err(Error::Index(format!(
            "item {item} outside domain {domain} catalog of {size}"
        )));
    }
    Ok(())
}

/// Rows `E[item_j] + P[pos_j]` for a padded list; padding rows stay zero.
pub fn embed_with_position(
    params: &ModelParams,
    domain: Domain,
    items: &[ItemId],
    positions: &[u32],
) -> Result<Matrix> {
    if items.len() != positions.len() {
        return Err(Error::Dimension(format!(
            "{} items but {} positions",
            items.len(),
            positions.len()
        )));
    }
    let d = params.shape.dim;
    let emb = params.emb(domain);
    let mut h = Matrix::zeros(items.len(), d);
    for (j, (&item, &pos)) in items.iter().zip(positions).enumerate() {
        check_item(params, domain, item)?;
        if item == PAD {
            continue;
        }
        let row = h.row_mut(j);
        row.copy_from_slice(emb.row(item as usize));
        axpy(1.0, params.pos.row(position_row(params, pos)), row);
    }
    Ok(h)
}

/// `U = ReLU(W H + b)` with `W` column-sliced to the last `H.rows()` columns.
pub fn latent_users(uin: &Uin, h: &Matrix) -> Result<Matrix> {
    let max_len = uin.w.cols();
    if h.rows() > max_len {
        return Err(Error::Dimension(format!(
            "{} rows exceed the latent-user map width {max_len}",
            h.rows()
        )));
    }
    if h.cols() != uin.bias.cols() {
        return Err(Error::Dimension(format!(
            "embedding width {} vs bias width {}",
            h.cols(),
            uin.bias.cols()
        )));
    }
    let offset = max_len - h.rows();
    let mut u = uin.bias.clone();
    for i in 0..uin.k() {
        for j in 0..h.rows() {
            let w = uin.w.get(i, offset + j);
            axpy(w, h.row(j), u.row_mut(i));
        }
    }
    u.as_mut_slice().iter_mut().for_each(|x| *x = relu(*x));
    Ok(u)
}

/// `h . ReLU(W1 [target ; user] + b1)`.
pub fn attention_score(uin: &Uin, target: &[f64], user: &[f64]) -> f64 {
    let x: Vec<f64> = target.iter().chain(user).copied().collect();
    let pre = uin.att_w.matvec(&x);
    pre.iter()
        .zip(uin.att_b.as_slice())
        .zip(uin.att_h.as_slice())
        .map(|((a, b), h)| h * relu(a + b))
        .sum()
}

/// Smoothed-softmax weights `exp(f_i - f_max) / (sum_j exp(f_j - f_max))^beta`.
pub fn smoothed_softmax(scores: &[f64], beta: f64) -> (Vec<f64>, usize, Vec<f64>) {
    let argmax = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
    let fmax = scores[argmax];
    let exps: Vec<f64> = scores.iter().map(|s| (s - fmax).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let denom = sum.powf(beta);
    let alpha = exps.iter().map(|e| e / denom).collect();
    let softmax = exps.iter().map(|e| e / sum).collect();
    (alpha, argmax, softmax)
}

/// Account vector `G = sum_i alpha_i U_i` and the weights `alpha`.
pub fn account_representation(uin: &Uin, target: &[f64], u: &Matrix, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = (0..u.rows()).map(|i| attention_score(uin, target, u.row(i))).collect();
    let (alpha, _, _) = smoothed_softmax(&scores, beta);
    let g = u.t_matvec(&alpha);
    (g, alpha)
}

/// `sigmoid(item . (W_p [G_transferred ; G_own]) + b)`.
pub fn fuse_and_predict(params: &ModelParams, domain: Domain, g_own: &[f64], g_tr: &[f64], item: &[f64]) -> f64 {
    sigmoid(fuse_logit(params, domain, g_own, g_tr, item).0)
}

fn fuse_logit(params: &ModelParams, domain: Domain, g_own: &[f64], g_tr: &[f64], item: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let head = params.head(domain);
    let z: Vec<f64> = g_tr.iter().chain(g_own).copied().collect();
    let v = head.fuse.matvec(&z);
    (dot(item, &v) + head.bias.get(0, 0), v, z)
}

pub(crate) fn encode(
    params: &ModelParams,
    uin: &Uin,
    source: Domain,
    items: &[SeqItem],
    drop: &mut Option<(StreamRng, f64)>,
) -> Result<Option<Encoded>> {
    if items.is_empty() {
        return Ok(None);
    }
    let max_len = params.shape.max_seq_len;
    if items.len() > max_len {
        return Err(Error::Dimension(format!(
            "sequence of {} exceeds max_seq_len {max_len}",
            items.len()
        )));
    }
    let d = params.shape.dim;
    let emb = params.emb(source);
    let offset = max_len - items.len();
    let mut h = Matrix::zeros(items.len(), d);
    for (j, it) in items.iter().enumerate() {
        check_item(params, source, it.item)?;
        if it.item == PAD {
            return Err(Error::Index("padding item inside an unpadded sequence".into()));
        }
        let row = h.row_mut(j);
        row.copy_from_slice(emb.row(it.item as usize));
        if params.shape.use_position {
            axpy(1.0, params.pos.row(position_row(params, it.pos)), row);
        }
    }
    let k = uin.k();
    let mut z = uin.bias.clone();
    for i in 0..k {
        let zi = z.row_mut(i);
        for j in 0..items.len() {
            axpy(uin.w.get(i, offset + j), h.row(j), zi);
        }
    }
    let mask = dropout_mask(k * d, drop);
    let mut u = z.clone();
    for (idx, x) in u.as_mut_slice().iter_mut().enumerate() {
        *x = relu(*x) * mask.as_ref().map_or(1.0, |m| m[idx]);
    }
    Ok(Some(Encoded {
        items: items.to_vec(),
        cols: (offset..max_len).collect(),
        h,
        z,
        u,
        mask,
    }))
}

pub(crate) fn attend(uin: &Uin, enc: &Encoded, query: &[f64], beta: f64, drop: &mut Option<(StreamRng, f64)>) -> Attended {
    let k = enc.u.rows();
    let att = uin.att_w.rows();
    let mut pre = Matrix::zeros(k, att);
    let mut hidden = Matrix::zeros(k, att);
    let mask = dropout_mask(k * att, drop);
    let mut scores = vec![0.0; k];
    let mut x = Vec::with_capacity(2 * query.len());
    for i in 0..k {
        x.clear();
        x.extend_from_slice(query);
        x.extend_from_slice(enc.u.row(i));
        for a in 0..att {
            let p = dot(uin.att_w.row(a), &x) + uin.att_b.as_slice()[a];
            let m = mask.as_ref().map_or(1.0, |m| m[i * att + a]);
            pre.set(i, a, p);
            hidden.set(i, a, relu(p) * m);
        }
        scores[i] = dot(hidden.row(i), uin.att_h.as_slice());
    }
    let (alpha, argmax, softmax) = smoothed_softmax(&scores, beta);
    let g = enc.u.t_matvec(&alpha);
    Attended {
        query: query.to_vec(),
        pre,
        hidden,
        mask,
        scores,
        alpha,
        argmax,
        softmax,
        g,
    }
}

/// Backward through the attention: accumulates into `guin`, `dquery`, `du`.
pub(crate) fn attend_backward(
    uin: &Uin,
    enc: &Encoded,
    at: &Attended,
    dg: &[f64],
    beta: f64,
    guin: &mut Uin,
    dquery: &mut [f64],
    du: &mut Matrix,
) {
    let k = enc.u.rows();
    let d = dg.len();
    let att = uin.att_w.rows();
    let dalpha: Vec<f64> = (0..k).map(|i| dot(dg, enc.u.row(i))).collect();
    for i in 0..k {
        axpy(at.alpha[i], dg, du.row_mut(i));
    }
    // alpha_i = e^{g_i} / S^beta with g = f - f_max
    let weighted: f64 = dalpha.iter().zip(&at.alpha).map(|(a, b)| a * b).sum();
    let dshift: Vec<f64> = (0..k)
        .map(|j| dalpha[j] * at.alpha[j] - beta * at.softmax[j] * weighted)
        .collect();
    let total: f64 = dshift.iter().sum();
    let mut dscore = dshift;
    dscore[at.argmax] -= total;

    let mut x = Vec::with_capacity(2 * d);
    let mut dpre = vec![0.0; att];
    for i in 0..k {
        let df = dscore[i];
        if df == 0.0 {
            continue;
        }
        axpy(df, at.hidden.row(i), guin.att_h.as_mut_slice());
        for a in 0..att {
            let m = at.mask.as_ref().map_or(1.0, |m| m[i * att + a]);
            dpre[a] = if at.pre.get(i, a) > 0.0 {
                df * uin.att_h.as_slice()[a] * m
            } else {
                0.0
            };
        }
        x.clear();
        x.extend_from_slice(&at.query);
        x.extend_from_slice(enc.u.row(i));
        guin.att_w.add_outer(1.0, &dpre, &x);
        axpy(1.0, &dpre, guin.att_b.as_mut_slice());
        let dx = uin.att_w.t_matvec(&dpre);
        axpy(1.0, &dx[..d], dquery);
        axpy(1.0, &dx[d..], du.row_mut(i));
    }
}

/// Backward through `U = ReLU(W H + b)` into the UIN, embeddings and positions.
pub(crate) fn encode_backward(
    params: &ModelParams,
    uin: &Uin,
    source: Domain,
    enc: &Encoded,
    du: &Matrix,
    grads: &mut ModelParams,
    which: (Domain, bool),
) {
    let k = enc.u.rows();
    let d = params.shape.dim;
    let mut dz = du.clone();
    for (idx, x) in dz.as_mut_slice().iter_mut().enumerate() {
        let m = enc.mask.as_ref().map_or(1.0, |m| m[idx]);
        *x = if enc.z.as_slice()[idx] > 0.0 { *x * m } else { 0.0 };
    }
    let mut dh = Matrix::zeros(enc.items.len(), d);
    {
        let guin = uin_mut(grads, which);
        guin.bias.axpy(1.0, &dz).expect("bias shape");
        for i in 0..k {
            for (j, &col) in enc.cols.iter().enumerate() {
                let gw = dot(dz.row(i), enc.h.row(j));
                let cur = guin.w.get(i, col);
                guin.w.set(i, col, cur + gw);
                axpy(uin.w.get(i, col), dz.row(i), dh.row_mut(j));
            }
        }
    }
    for (j, it) in enc.items.iter().enumerate() {
        axpy(1.0, dh.row(j), grads.emb[source.index()].row_mut(it.item as usize));
        if params.shape.use_position {
            let r = position_row(params, it.pos);
            axpy(1.0, dh.row(j), grads.pos.row_mut(r));
        }
    }
}

fn uin_mut(grads: &mut ModelParams, (domain, transfer): (Domain, bool)) -> &mut Uin {
    let head = &mut grads.heads[domain.index()];
    if transfer {
        &mut head.transfer
    } else {
        &mut head.own
    }
}

/// Cached activations of one (instance, query item) forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountState {
    pub own: Encoded,
    pub own_att: Attended,
    pub transferred: Option<(Encoded, Attended)>,
    pub g_own: Vec<f64>,
    pub g_transferred: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

/// Run both UIN passes for `instance` with `query` as the attention signal
/// and score `query` itself.
pub fn forward_account(params: &ModelParams, instance: &TrainingInstance, query: ItemId) -> Result<AccountState> {
    forward_with(params, instance.domain, &instance.history, &instance.transferred, query, &mut None)
}

pub(crate) fn forward_with(
    params: &ModelParams,
    domain: Domain,
    history: &[SeqItem],
    transferred: &[SeqItem],
    query: ItemId,
    drop: &mut Option<(StreamRng, f64)>,
) -> Result<AccountState> {
    check_item(params, domain, query)?;
    let head = params.head(domain);
    let beta = params.shape.beta;
    let q = params.emb(domain).row(query as usize).to_vec();
    let own = encode(params, &head.own, domain, history, drop)?
        .ok_or_else(|| Error::Dimension("own-domain history is empty".into()))?;
    let own_att = attend(&head.own, &own, &q, beta, drop);
    let tr = encode(params, &head.transfer, domain.other(), transferred, drop)?
        .map(|enc| {
            let at = attend(&head.transfer, &enc, &q, beta, drop);
            (enc, at)
        });
    let g_own = own_att.g.clone();
    let g_transferred = tr
        .as_ref()
        .map_or_else(|| vec![0.0; params.shape.dim], |(_, a)| a.g.clone());
    let (logit, _, _) = fuse_logit(params, domain, &g_own, &g_transferred, &q);
    Ok(AccountState {
        own,
        own_att,
        transferred: tr,
        g_own,
        g_transferred,
        logit,
        prob: sigmoid(logit),
    })
}

/// Probability that `item` is next in `domain`, with `item` as the query.
pub fn predict(params: &ModelParams, domain: Domain, history: &[SeqItem], transferred: &[SeqItem], item: ItemId) -> Result<f64> {
    Ok(forward_with(params, domain, history, transferred, item, &mut None)?.prob)
}

/// Logit of every candidate, each scored with itself as the attention query.
/// Encodings are shared across candidates.
pub fn score_candidates(
    params: &ModelParams,
    domain: Domain,
    history: &[SeqItem],
    transferred: &[SeqItem],
    candidates: &[ItemId],
) -> Result<Vec<f64>> {
    let head = params.head(domain);
    let beta = params.shape.beta;
    let mut none = None;
    let own = encode(params, &head.own, domain, history, &mut none)?
        .ok_or_else(|| Error::Dimension("own-domain history is empty".into()))?;
    let tr = encode(params, &head.transfer, domain.other(), transferred, &mut none)?;
    let zeros = vec![0.0; params.shape.dim];
    candidates
        .iter()
        .map(|&c| {
            check_item(params, domain, c)?;
            let q = params.emb(domain).row(c as usize);
            let g_own = attend(&head.own, &own, q, beta, &mut none).g;
            let g_tr = tr
                .as_ref()
                .map_or_else(|| zeros.clone(), |t| attend(&head.transfer, t, q, beta, &mut none).g);
            Ok(fuse_logit(params, domain, &g_own, &g_tr, q).0)
        })
        .collect()
}

/// Per-item representations of a transferred sequence in the target
/// domain's space, attended with `query`.
///
/// For active latent units `G_transferred` is linear in the rows of `H`:
/// `G = sum_m c_m + sum_i a_i [z_i > 0] b_i` with
/// `c_m = (sum_i a_i [z_i > 0] W[i, col_m]) H_m`. Item `m` is represented by
/// `W_p[:, ..d] c_m`, so its dot product with `q` is its additive share of
/// the logit.
pub fn transferred_representations(
    params: &ModelParams,
    domain: Domain,
    transferred: &[SeqItem],
    query: ItemId,
) -> Result<Vec<Vec<f64>>> {
    check_item(params, domain, query)?;
    let head = params.head(domain);
    let mut none = None;
    let Some(enc) = encode(params, &head.transfer, domain.other(), transferred, &mut none)? else {
        return Ok(Vec::new());
    };
    let q = params.emb(domain).row(query as usize);
    let at = attend(&head.transfer, &enc, q, params.shape.beta, &mut none);
    let d = params.shape.dim;
    let gate: Vec<Vec<f64>> = (0..enc.z.rows())
        .map(|i| enc.z.row(i).iter().map(|&z| if z > 0.0 { at.alpha[i] } else { 0.0 }).collect())
        .collect();
    let mut out = Vec::with_capacity(enc.items.len());
    for (m, &col) in enc.cols.iter().enumerate() {
        let h = enc.h.row(m);
        let mut c = vec![0.0; d];
        for (i, g) in gate.iter().enumerate() {
            let w = head.transfer.w.get(i, col);
            for k in 0..d {
                c[k] += g[k] * w * h[k];
            }
        }
        out.push((0..d).map(|r| (0..d).map(|k| head.fuse.get(r, k) * c[k]).sum()).collect());
    }
    Ok(out)
}

/// Loss and gradient contribution of one instance (target plus negatives),
/// each scored pair weighted by `weight`.
fn instance_loss_grads(
    params: &ModelParams,
    inst: &TrainingInstance,
    dropout: Option<Dropout>,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let domain = inst.domain;
    let head = params.head(domain);
    let beta = params.shape.beta;
    let d = params.shape.dim;
    let mut drop = dropout.and_then(|dr| dr.rng_for(inst));
    let own = encode(params, &head.own, domain, &inst.history, &mut drop)?
        .ok_or_else(|| Error::Dimension("own-domain history is empty".into()))?;
    let tr = encode(params, &head.transfer, domain.other(), &inst.transferred, &mut drop)?;
    let mut du_own = Matrix::zeros(own.u.rows(), d);
    let mut du_tr = tr.as_ref().map(|t| Matrix::zeros(t.u.rows(), d));
    let mut loss = 0.0;
    for (item, label) in inst.candidates() {
        check_item(params, domain, item)?;
        let q = params.emb(domain).row(item as usize).to_vec();
        let own_att = attend(&head.own, &own, &q, beta, &mut drop);
        let tr_att = tr.as_ref().map(|t| attend(&head.transfer, t, &q, beta, &mut drop));
        let g_tr = tr_att.as_ref().map_or_else(|| vec![0.0; d], |a| a.g.clone());
        let (logit, v, z) = fuse_logit(params, domain, &own_att.g, &g_tr, &q);
        let p = sigmoid(logit);
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= weight * if label > 0.5 { pc.ln() } else { (1.0 - pc).ln() };
        let dlogit = if p != pc { 0.0 } else { weight * (p - label) };
        if dlogit == 0.0 {
            continue;
        }
        let mut dq: Vec<f64> = v.iter().map(|x| dlogit * x).collect();
        let dv: Vec<f64> = q.iter().map(|x| dlogit * x).collect();
        let gh = &mut grads.heads[domain.index()];
        gh.fuse.add_outer(1.0, &dv, &z);
        gh.bias.as_mut_slice()[0] += dlogit;
        let dz = head.fuse.t_matvec(&dv);
        attend_backward(&head.own, &own, &own_att, &dz[d..], beta, &mut gh.own, &mut dq, &mut du_own);
        if let (Some(t), Some(a), Some(du)) = (tr.as_ref(), tr_att.as_ref(), du_tr.as_mut()) {
            attend_backward(&head.transfer, t, a, &dz[..d], beta, &mut gh.transfer, &mut dq, du);
        }
        axpy(1.0, &dq, grads.emb[domain.index()].row_mut(item as usize));
    }
    encode_backward(params, &head.own, domain, &own, &du_own, grads, (domain, false));
    if let (Some(t), Some(du)) = (tr.as_ref(), du_tr.as_ref()) {
        encode_backward(params, &head.transfer, domain.other(), t, du, grads, (domain, true));
    }
    Ok(loss)
}

const CHUNK: usize = 16;

/// Regularised log loss of `batch` (all in `domain`) and its gradient over
/// every tensor. Tensors outside the domain's mask get zero gradient.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[TrainingInstance],
    domain: Domain,
    dropout: Option<Dropout>,
) -> Result<(f64, ModelParams)> {
    if let Some(bad) = batch.iter().find(|i| i.domain != domain) {
        return Err(Error::Dimension(format!(
            "instance for domain {} in a domain {domain} batch",
            bad.domain
        )));
    }
    let pairs: usize = batch.iter().map(|i| 1 + i.negatives.len()).sum();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    if pairs > 0 {
        let weight = 1.0 / pairs as f64;
        // fixed chunking keeps the summation order independent of threads
        let parts: Vec<Result<(f64, ModelParams)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = params.zeros_like();
                let mut l = 0.0;
                for inst in chunk {
                    l += instance_loss_grads(params, inst, dropout, weight, &mut g)?;
                }
                Ok((l, g))
            })
            .collect();
        for part in parts {
            let (l, g) = part?;
            loss += l;
            grads.axpy(1.0, &g)?;
        }
    }
    let mask = params.domain_mask(domain);
    let l2 = params.shape.l2;
    if l2 > 0.0 {
        loss += l2 * params.sum_squares(&mask);
        for ((g, p), &m) in grads.tensors_mut().into_iter().zip(params.tensors()).zip(&mask) {
            if m {
                g.axpy(2.0 * l2, p)?;
            }
        }
    }
    grads.clear_padding();
    if !params.shape.use_position {
        grads.pos.fill(0.0);
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss}")));
    }
    Ok((loss, grads))
}
