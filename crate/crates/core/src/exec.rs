//! Ordered data parallelism and the shared gradient accumulation routine.
//!
//! Results are always combined in input order, so the number of workers
//! never changes a bit of the output.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{Gradients, TransformerPolicy, WeightedSequence};
use crate::scalar::Scalar;

pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    /// `n <= 1` runs everything on the calling thread.
    pub fn new(n: usize) -> Result<Self> {
        if n <= 1 {
            return Ok(Workers { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
        Ok(Workers { pool: Some(pool) })
    }

    pub fn serial() -> Self {
        Workers { pool: None }
    }

    pub fn map<I, R, F>(&self, items: &[I], f: F) -> Vec<R>
    where
        I: Sync,
        R: Send,
        F: Fn(usize, &I) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
            Some(pool) => pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()),
        }
    }
}

/// Loss value and gradient of a weighted next-symbol loss.
///
/// Each sequence is differentiated into its own buffer and the buffers are
/// summed in sequence order. Sequences whose weights are all zero are
/// skipped outright.
pub fn loss_and_gradients<T: Scalar>(
    policy: &TransformerPolicy<T>,
    sequences: &[WeightedSequence],
    workers: &Workers,
) -> Result<(f64, Gradients<T>)> {
    let parts = workers.map(sequences, |_, seq| -> Result<Option<(f64, Gradients<T>)>> {
        if seq.weights.iter().skip(1).all(|&w| w == 0.0) {
            return Ok(None);
        }
        let graph = policy.record_loss(std::slice::from_ref(seq))?;
        let mut grads = policy.zero_gradients();
        policy.backward(&graph, &mut grads)?;
        Ok(Some((graph.value(), grads)))
    });
    let mut loss = 0.0;
    let mut total = policy.zero_gradients();
    for part in parts {
        if let Some((value, grads)) = part? {
            loss += value;
            total.add_assign(&grads);
        }
    }
    Ok((loss, total))
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
