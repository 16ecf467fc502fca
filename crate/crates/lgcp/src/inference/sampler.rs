//! Adaptive random-walk Metropolis machinery.
//!
//! The sampler walks a flat vector of (possibly transformed) coordinates one
//! block at a time. Scalar blocks get univariate normal proposals tuned
//! toward a 0.44 acceptance rate; multivariate blocks get correlated normal
//! proposals tuned toward 0.234. Step sizes follow a Robbins-Monro recursion
//! on the log scale during burn-in and are frozen afterwards, so the
//! post-burn-in kernel is a fixed Metropolis kernel.

use crate::likelihood::{Parts, Touch};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Tuning target for univariate proposals.
pub const SCALAR_TARGET: f64 = 0.44;
/// Tuning target for multivariate block proposals.
pub const BLOCK_TARGET: f64 = 0.234;

// Log step sizes are kept in this band so a flat or saturated target cannot
// run the recursion off to infinity.
const LOG_STEP_BAND: (f64, f64) = (-15.0, 5.0);

/// One update block: the coordinates proposed jointly, the posterior pieces
/// the move invalidates, and an optional lower-triangular proposal shape
/// (identity when absent).
pub struct Block {
    pub name: String,
    pub indices: Vec<usize>,
    pub target_accept: f64,
    pub touch: Touch,
    pub shape: Option<DMatrix<f64>>,
    pub initial_step: f64,
}

impl Block {
    /// Univariate block with identity shape.
    pub fn scalar(name: impl Into<String>, index: usize, touch: Touch) -> Self {
        Block {
            name: name.into(),
            indices: vec![index],
            target_accept: SCALAR_TARGET,
            touch,
            shape: None,
            initial_step: 0.5,
        }
    }
}

/// A target density split into [`Parts`]; `refresh` may carry over the
/// pieces of `base` not named in `touch`.
pub trait BlockTarget {
    fn full(&self, x: &[f64]) -> Parts;
    fn refresh(&self, x: &[f64], base: &Parts, touch: Touch) -> Parts;
}

/// Plain log densities are targets with a single piece.
impl<F: Fn(&[f64]) -> f64> BlockTarget for F {
    fn full(&self, x: &[f64]) -> Parts {
        Parts { lik1: self(x), lik2: 0.0, gp_prior: 0.0, scalar_prior: 0.0 }
    }

    fn refresh(&self, x: &[f64], _base: &Parts, _touch: Touch) -> Parts {
        self.full(x)
    }
}

/// The Metropolis coin: accept a move with probability `min(1, e^log_ratio)`.
/// A NaN ratio rejects.
pub fn metropolis_accept(rng: &mut impl Rng, log_ratio: f64) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// Observed acceptance rate of one block after adaptation stopped.
#[derive(Debug, Clone)]
pub struct BlockAcceptance {
    pub name: String,
    pub target: f64,
    pub observed: f64,
}

/// Blockwise adaptive Metropolis sampler over a flat coordinate vector.
pub struct AdaptiveSampler {
    blocks: Vec<Block>,
    log_steps: Vec<f64>,
    adapt_counts: Vec<f64>,
    post_accepts: Vec<u64>,
    post_proposals: Vec<u64>,
}

impl AdaptiveSampler {
    pub fn new(blocks: Vec<Block>) -> Self {
        let log_steps = blocks.iter().map(|b| b.initial_step.ln()).collect();
        let n = blocks.len();
        AdaptiveSampler {
            blocks,
            log_steps,
            adapt_counts: vec![0.0; n],
            post_accepts: vec![0; n],
            post_proposals: vec![0; n],
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// One full pass over the blocks. With `adapt` set, every proposal also
    /// nudges its block's log step toward the block's acceptance target and
    /// is excluded from the reported acceptance rates.
    pub fn sweep(
        &mut self,
        x: &mut [f64],
        parts: &mut Parts,
        target: &impl BlockTarget,
        rng: &mut impl Rng,
        adapt: bool,
    ) {
        let mut cand = x.to_vec();
        for b in 0..self.blocks.len() {
            let step = self.log_steps[b].exp();
            cand.copy_from_slice(x);
            let block = &self.blocks[b];
            match &block.shape {
                None => {
                    for &i in &block.indices {
                        let z: f64 = rng.sample(StandardNormal);
                        cand[i] += step * z;
                    }
                }
                Some(l) => {
                    let z = DVector::from_fn(block.indices.len(), |_, _| {
                        rng.sample::<f64, _>(StandardNormal)
                    });
                    let dz = l * z;
                    for (j, &i) in block.indices.iter().enumerate() {
                        cand[i] += step * dz[j];
                    }
                }
            }
            let cand_parts = target.refresh(&cand, parts, block.touch);
            let log_ratio = cand_parts.total() - parts.total();
            let accepted = metropolis_accept(rng, log_ratio);
            if accepted {
                x.copy_from_slice(&cand);
                *parts = cand_parts;
            }
            if adapt {
                self.adapt_counts[b] += 1.0;
                let gamma = self.adapt_counts[b].powf(-0.6);
                let alpha = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
                let target_rate = self.blocks[b].target_accept;
                self.log_steps[b] = (self.log_steps[b] + gamma * (alpha - target_rate))
                    .clamp(LOG_STEP_BAND.0, LOG_STEP_BAND.1);
            } else {
                self.post_proposals[b] += 1;
                self.post_accepts[b] += u64::from(accepted);
            }
        }
    }

    /// Post-adaptation acceptance rates, one row per block.
    pub fn acceptance(&self) -> Vec<BlockAcceptance> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(b, block)| BlockAcceptance {
                name: block.name.clone(),
                target: block.target_accept,
                observed: if self.post_proposals[b] == 0 {
                    f64::NAN
                } else {
                    self.post_accepts[b] as f64 / self.post_proposals[b] as f64
                },
            })
            .collect()
    }
}
