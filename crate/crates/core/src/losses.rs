//! Metric-learning losses on fused feature vectors.

use crate::error::{Error, Result};

pub const DEFAULT_TAU_TRI: f64 = 1.0;
pub const DEFAULT_TAU_PAIR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `max(0, d_ap - d_an + tau_tri)`
    Triplet,
    /// `max(0, d_ap - min(d_an, d_pn) + tau_tri + tau_pair * d_ap)`
    Improved,
    /// Pairwise contrastive loss applied to the two pairs of a triplet.
    Contrastive,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Self::Triplet),
            "improved" | "improved_triplet" => Ok(Self::Improved),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected triplet, improved or contrastive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau_tri: f64,
    pub tau_pair: f64,
    pub contrastive_margin: f64,
    /// Use squared Euclidean distances instead of plain ones.
    pub squared_distances: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Improved,
            tau_tri: DEFAULT_TAU_TRI,
            tau_pair: DEFAULT_TAU_PAIR,
            contrastive_margin: 1.0,
            squared_distances: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_tri.is_finite() && self.tau_tri > 0.0)
            || !(self.tau_pair.is_finite() && self.tau_pair >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid margins tau_tri={} tau_pair={}",
                self.tau_tri, self.tau_pair
            )));
        }
        if !(self.contrastive_margin.is_finite() && self.contrastive_margin >= 0.0) {
            return Err(Error::Config("contrastive margin must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(sq_dist(a, b).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn triplet_loss(d_ap: f64, d_an: f64, tau_tri: f64) -> f64 {
    (d_ap - d_an + tau_tri).max(0.0)
}

pub fn improved_triplet_loss(d_ap: f64, d_an: f64, d_pn: f64, tau_tri: f64, tau_pair: f64) -> f64 {
    (d_ap - d_an.min(d_pn) + tau_tri + tau_pair * d_ap).max(0.0)
}

/// `d²` for a matching pair, `max(0, margin - d)²` otherwise.
pub fn contrastive_loss(d: f64, is_match: bool, margin: f64) -> f64 {
    if is_match {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    }
}

/// Loss of one triplet and its gradient with respect to the three fused vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletTerm {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// Distance between `x` and `y` and its derivative with respect to `x`
/// (the derivative with respect to `y` is the negation). At `x == y` the
/// plain distance uses the zero subgradient.
fn dist_and_grad(x: &[f64], y: &[f64], squared: bool) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let sq: f64 = diff.iter().map(|v| v * v).sum();
    if squared {
        (sq, diff.into_iter().map(|v| 2.0 * v).collect())
    } else {
        let d = sq.sqrt();
        if d == 0.0 {
            (0.0, vec![0.0; diff.len()])
        } else {
            (d, diff.into_iter().map(|v| v / d).collect())
        }
    }
}

fn axpy(out: &mut [f64], alpha: f64, g: &[f64]) {
    for (o, v) in out.iter_mut().zip(g) {
        *o += alpha * v;
    }
}

pub fn triplet_term(a: &[f64], p: &[f64], n: &[f64], cfg: &LossConfig) -> TripletTerm {
    let dim = a.len();
    let mut term = TripletTerm {
        loss: 0.0,
        grad_anchor: vec![0.0; dim],
        grad_positive: vec![0.0; dim],
        grad_negative: vec![0.0; dim],
    };
    let sq = cfg.squared_distances;
    let (d_ap, g_ap) = dist_and_grad(a, p, sq);
    let (d_an, g_an) = dist_and_grad(a, n, sq);
    match cfg.kind {
        LossKind::Triplet => {
            let value = d_ap - d_an + cfg.tau_tri;
            if value > 0.0 {
                term.loss = value;
                axpy(&mut term.grad_anchor, 1.0, &g_ap);
                axpy(&mut term.grad_positive, -1.0, &g_ap);
                axpy(&mut term.grad_anchor, -1.0, &g_an);
                axpy(&mut term.grad_negative, 1.0, &g_an);
            }
        }
        LossKind::Improved => {
            let (d_pn, g_pn) = dist_and_grad(p, n, sq);
            let value = d_ap - d_an.min(d_pn) + cfg.tau_tri + cfg.tau_pair * d_ap;
            if value > 0.0 {
                term.loss = value;
                let w = 1.0 + cfg.tau_pair;
                axpy(&mut term.grad_anchor, w, &g_ap);
                axpy(&mut term.grad_positive, -w, &g_ap);
                // Ties resolve to the anchor-negative distance.
                if d_an <= d_pn {
                    axpy(&mut term.grad_anchor, -1.0, &g_an);
                    axpy(&mut term.grad_negative, 1.0, &g_an);
                } else {
                    axpy(&mut term.grad_positive, -1.0, &g_pn);
                    axpy(&mut term.grad_negative, 1.0, &g_pn);
                }
            }
        }
        LossKind::Contrastive => {
            let m = cfg.contrastive_margin;
            term.loss = contrastive_loss(d_ap, true, m) + contrastive_loss(d_an, false, m);
            axpy(&mut term.grad_anchor, 2.0 * d_ap, &g_ap);
            axpy(&mut term.grad_positive, -2.0 * d_ap, &g_ap);
            let push = (m - d_an).max(0.0);
            if push > 0.0 {
                axpy(&mut term.grad_anchor, -2.0 * push, &g_an);
                axpy(&mut term.grad_negative, 2.0 * push, &g_an);
            }
        }
    }
    term
}

/// Loss of one triplet of fused vectors.
pub fn triplet_value(a: &[f64], p: &[f64], n: &[f64], cfg: &LossConfig) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Shape("triplet vectors differ in length".into()));
    }
    let d = |x: &[f64], y: &[f64]| {
        let s = sq_dist(x, y);
        if cfg.squared_distances {
            s
        } else {
            s.sqrt()
        }
    };
    let (d_ap, d_an) = (d(a, p), d(a, n));
    Ok(match cfg.kind {
        LossKind::Triplet => triplet_loss(d_ap, d_an, cfg.tau_tri),
        LossKind::Improved => improved_triplet_loss(d_ap, d_an, d(p, n), cfg.tau_tri, cfg.tau_pair),
        LossKind::Contrastive => {
            contrastive_loss(d_ap, true, cfg.contrastive_margin)
                + contrastive_loss(d_an, false, cfg.contrastive_margin)
        }
    })
}

/// Mean loss over a batch of fused triplets.
pub fn batch_loss<V: AsRef<[f64]>>(triplets: &[[V; 3]], cfg: &LossConfig) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::EmptyBatch("loss of an empty batch".into()));
    }
    let mut total = 0.0;
    for [a, p, n] in triplets {
        total += triplet_value(a.as_ref(), p.as_ref(), n.as_ref(), cfg)?;
    }
    Ok(total / triplets.len() as f64)
}
