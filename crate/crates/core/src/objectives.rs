//! Sample-wise SimSiam and SimCLR losses and the pairwise loss matrix over
//! all candidate view pairs.
//!
//! Every loss here returns one value per sample (`[M]`); the training loss is
//! the mean of those values over the batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::exec;
use crate::tensor::{Graph, Tensor, Var};

/// Norm floor used by every cosine similarity.
pub const COSINE_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Simsiam,
    Simclr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimclrVariant {
    /// Negatives are the other samples' view-`l` embeddings only; the
    /// positive is not part of the denominator.
    #[default]
    CrossView,
    /// Standard NT-Xent over the 2M stacked embeddings, positive included in
    /// the denominator.
    NtXent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub tau: f32,
    pub variant: SimclrVariant,
}

impl Objective {
    pub fn simsiam() -> Self {
        Self {
            kind: ObjectiveKind::Simsiam,
            tau: 0.1,
            variant: SimclrVariant::CrossView,
        }
    }

    pub fn simclr(tau: f32, variant: SimclrVariant) -> Self {
        Self {
            kind: ObjectiveKind::Simclr,
            tau,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.tau.is_finite() && self.tau > 0.0,
            "temperature must be positive, got {}",
            self.tau
        );
        Ok(())
    }

    /// Whether the predictor head takes part in the loss.
    pub fn uses_predictor(&self) -> bool {
        self.kind == ObjectiveKind::Simsiam
    }

    /// Per-sample loss for views `k` and `l` given as (z, p) on `g`. `p` is
    /// ignored for SimCLR.
    pub fn pair_loss(&self, g: &mut Graph, k: (Var, Option<Var>), l: (Var, Option<Var>)) -> Result<Var> {
        match self.kind {
            ObjectiveKind::Simsiam => {
                let (Some(pk), Some(pl)) = (k.1, l.1) else {
                    return Err(crate::HvpError::contract(
                        "SimSiam loss needs predictor outputs",
                    ));
                };
                simsiam_pair_loss(g, pk, l.0, pl, k.0)
            }
            ObjectiveKind::Simclr => simclr_pair_loss(g, k.0, l.0, self.tau, self.variant),
        }
    }
}

/// `-cos(a_i, b_i)` per row, with norms floored at [`COSINE_EPS`].
pub fn neg_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let na = g.l2_normalize(a, COSINE_EPS)?;
    let nb = g.l2_normalize(b, COSINE_EPS)?;
    let dot = g.row_dot(na, nb)?;
    Ok(g.scale(dot, -1.0))
}

/// `½(D(p_k, sg(z_l)) + D(p_l, sg(z_k)))` per sample.
pub fn simsiam_pair_loss(g: &mut Graph, p_k: Var, z_l: Var, p_l: Var, z_k: Var) -> Result<Var> {
    let zl = g.detach(z_l);
    let zk = g.detach(z_k);
    let a = neg_cosine(g, p_k, zl)?;
    let b = neg_cosine(g, p_l, zk)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Contrastive loss for views `k` and `l`, averaged over both directions.
pub fn simclr_pair_loss(g: &mut Graph, z_k: Var, z_l: Var, tau: f32, variant: SimclrVariant) -> Result<Var> {
    ensure!(tau > 0.0, "temperature must be positive, got {tau}");
    let shape = g.shape(z_k).to_vec();
    ensure!(
        shape.len() == 2 && g.shape(z_l) == shape.as_slice(),
        "SimCLR embeddings must share shape [M,D]: {shape:?} vs {:?}",
        g.shape(z_l)
    );
    let m = shape[0];
    ensure!(m >= 2, "SimCLR needs at least two samples for negatives, got {m}");
    let nk = g.l2_normalize(z_k, COSINE_EPS)?;
    let nl = g.l2_normalize(z_l, COSINE_EPS)?;
    match variant {
        SimclrVariant::CrossView => {
            let a = cross_view_direction(g, nk, nl, tau)?;
            let b = cross_view_direction(g, nl, nk, tau)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
        SimclrVariant::NtXent => {
            let z = g.concat_rows(nk, nl)?;
            let sim = g.matmul_nt(z, z)?;
            let sim = g.scale(sim, 1.0 / tau);
            let own: Vec<usize> = (0..2 * m).collect();
            let partner: Vec<usize> = (0..2 * m).map(|r| (r + m) % (2 * m)).collect();
            let pos = g.gather_cols(sim, partner)?;
            let lse = g.row_logsumexp_except(sim, &own)?;
            let rows = g.sub(lse, pos)?;
            let a = g.slice_rows(rows, 0, m)?;
            let b = g.slice_rows(rows, m, m)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

fn cross_view_direction(g: &mut Graph, a: Var, b: Var, tau: f32) -> Result<Var> {
    let m = g.shape(a)[0];
    let sim = g.matmul_nt(a, b)?;
    let sim = g.scale(sim, 1.0 / tau);
    let diag: Vec<usize> = (0..m).collect();
    let pos = g.gather_cols(sim, diag.clone())?;
    let lse = g.row_logsumexp_except(sim, &diag)?;
    g.sub(lse, pos)
}

/// Projector (and, for SimSiam, predictor) outputs of all N views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbeddings {
    z: Vec<Tensor>,
    p: Option<Vec<Tensor>>,
}

impl ViewEmbeddings {
    pub fn new(z: Vec<Tensor>, p: Option<Vec<Tensor>>) -> Result<Self> {
        ensure!(!z.is_empty(), "no view embeddings");
        let shape = z[0].shape().to_vec();
        ensure!(shape.len() == 2, "embeddings must be [M,D], got {shape:?}");
        ensure!(
            z.iter().all(|t| t.shape() == shape.as_slice()),
            "all views must share [M,D_z]"
        );
        if let Some(p) = &p {
            ensure!(
                p.len() == z.len() && p.iter().all(|t| t.shape() == shape.as_slice()),
                "predictor outputs must match the projector outputs"
            );
        }
        Ok(Self { z, p })
    }

    pub fn num_views(&self) -> usize {
        self.z.len()
    }

    pub fn batch(&self) -> usize {
        self.z[0].shape()[0]
    }

    pub fn z(&self, view: usize) -> &Tensor {
        &self.z[view]
    }

    pub fn p(&self, view: usize) -> Option<&Tensor> {
        self.p.as_ref().map(|p| &p[view])
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().chain(self.p.iter().flatten()).all(Tensor::is_finite)
    }
}

/// Per-sample losses of every candidate pair, `[M, P]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLossMatrix {
    batch: usize,
    pairs: Vec<(usize, usize)>,
    losses: Vec<f32>,
}

impl PairLossMatrix {
    pub fn new(batch: usize, pairs: Vec<(usize, usize)>, losses: Vec<f32>) -> Result<Self> {
        ensure!(batch > 0 && !pairs.is_empty(), "empty pair loss matrix");
        ensure!(
            losses.len() == batch * pairs.len(),
            "expected {} losses, got {}",
            batch * pairs.len(),
            losses.len()
        );
        ensure!(pairs.iter().all(|&(k, l)| k < l), "pairs must satisfy k < l");
        Ok(Self {
            batch,
            pairs,
            losses,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn row(&self, sample: usize) -> &[f32] {
        let p = self.pairs.len();
        &self.losses[sample * p..(sample + 1) * p]
    }

    pub fn get(&self, sample: usize, pair: usize) -> f32 {
        self.losses[sample * self.pairs.len() + pair]
    }

    pub fn losses(&self) -> &[f32] {
        &self.losses
    }
}

/// All `k < l` pairs in lexicographic order.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|k| (k + 1..n).map(move |l| (k, l))).collect()
}

/// Candidate pairs: all of them, or a uniform subsample of `cap` pairs
/// (kept in lexicographic order) when there are more than `cap`.
pub fn candidate_pairs<R: Rng + ?Sized>(n: usize, cap: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    ensure!(cap >= 1, "pair_cap must be at least 1");
    ensure!(n >= 2, "need at least two views, got {n}");
    let all = all_pairs(n);
    if all.len() <= cap {
        return Ok(all);
    }
    let mut idx = rand::seq::index::sample(rng, all.len(), cap).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i]).collect())
}

/// Gradient-free loss of every candidate pair for every sample.
pub fn pairwise_loss_matrix<R: Rng + ?Sized>(
    views: &ViewEmbeddings,
    objective: &Objective,
    pair_cap: usize,
    rng: &mut R,
) -> Result<PairLossMatrix> {
    objective.validate()?;
    let pairs = candidate_pairs(views.num_views(), pair_cap, rng)?;
    ensure!(
        !objective.uses_predictor() || views.p.is_some(),
        "SimSiam loss needs predictor outputs"
    );
    let columns = exec::map_slice(&pairs, |&(k, l)| -> Result<Vec<f32>> {
        let mut g = Graph::no_grad();
        let mut side = |view: usize| {
            let z = g.input(views.z(view).clone());
            let p = views.p(view).map(|p| g.input(p.clone()));
            (z, p)
        };
        let (vk, vl) = (side(k), side(l));
        let loss = objective.pair_loss(&mut g, vk, vl)?;
        Ok(g.value(loss).to_vec())
    });
    let m = views.batch();
    let mut losses = vec![0.0f32; m * pairs.len()];
    for (c, col) in columns.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            losses[i * pairs.len() + c] = v;
        }
    }
    ensure!(
        losses.iter().all(|v| v.is_finite()),
        "pair loss matrix contains non-finite values"
    );
    PairLossMatrix::new(m, pairs, losses)
}
