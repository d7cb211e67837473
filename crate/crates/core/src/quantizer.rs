//! Codebook vector quantization: nearest-code assignment, straight-through
//! gradients, commitment loss, and usage statistics.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{randn, Bound, ParamId, ParamSet, INIT_STD};
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Learned code table plus hit counters. Counters are atomic so read-only
/// quantization can run from multiple threads; table updates are the
/// optimizer's business.
pub struct Codebook {
    pub table: ParamId,
    pub k_c: usize,
    pub n_z: usize,
    hits: Vec<AtomicU64>,
    total: AtomicU64,
}

/// Result of one quantization call.
///
/// `vectors` forwards the selected code rows and backpropagates to the
/// encoder output unchanged (in surrogate tape mode it forwards the
/// encoder output itself, making the path finite-difference checkable).
/// `quant_loss` is ‖sg(z) − e‖² + β‖z − sg(e)‖², each term summed over
/// the code dimension and averaged over cells.
pub struct QuantOut {
    pub indices: Vec<usize>,
    pub vectors: NodeId,
    pub quant_loss: NodeId,
}

/// Index of the code row nearest to `z_row` in squared euclidean
/// distance; ties go to the smallest index.
pub fn nearest_index<S: Scalar>(z_row: &[S], table: &Tensor<S>) -> usize {
    let n_z = table.cols();
    let mut best = 0usize;
    let mut best_d = S::infinity();
    for k in 0..table.rows() {
        let row = &table.data()[k * n_z..(k + 1) * n_z];
        let mut d = S::zero();
        for j in 0..n_z {
            let diff = z_row[j] - row[j];
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

impl Codebook {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        k_c: usize,
        n_z: usize,
    ) -> Result<Self> {
        if k_c < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 codes, got {k_c}"
            )));
        }
        if n_z == 0 {
            return Err(Error::Config("codebook dimension must be positive".into()));
        }
        let table = params.register(name, randn(rng, &[k_c, n_z], INIT_STD))?;
        Ok(Codebook {
            table,
            k_c,
            n_z,
            hits: (0..k_c).map(|_| AtomicU64::new(0)).collect(),
            total: AtomicU64::new(0),
        })
    }

    /// Quantizes each row of `z` [n, n_z] to its nearest code (Eq. 1
    /// shape: argmin over squared distances). Increments usage counters.
    pub fn quantize<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        z: NodeId,
        beta: f64,
    ) -> Result<QuantOut> {
        let table_node = bound.node(self.table);
        let zv = tape.value(z);
        if zv.cols() != self.n_z {
            return Err(Error::Shape {
                op: "quantize",
                lhs: zv.shape().to_vec(),
                rhs: vec![self.k_c, self.n_z],
            });
        }
        if !zv.is_finite() {
            return Err(Error::Numeric("quantize input is not finite".into()));
        }
        let n = zv.rows();
        let table = tape.value(table_node).clone();
        let mut indices = Vec::with_capacity(n);
        for i in 0..n {
            indices.push(nearest_index(zv.row(i), &table));
        }
        for &k in &indices {
            self.hits[k].fetch_add(1, Ordering::Relaxed);
        }
        self.total.fetch_add(n as u64, Ordering::Relaxed);

        let selected = tape.rows(table_node, &indices)?;
        let z_detached = tape.detach(z);
        let sel_detached = tape.detach(selected);

        // codebook term pulls codes toward (frozen) encoder outputs
        let d1 = tape.sub(selected, z_detached)?;
        let d1sq = tape.mul(d1, d1)?;
        let sum1 = tape.sum_all(d1sq);
        // commitment term pulls encoder outputs toward (frozen) codes
        let d2 = tape.sub(z, sel_detached)?;
        let d2sq = tape.mul(d2, d2)?;
        let sum2 = tape.sum_all(d2sq);
        let inv_n = 1.0 / n as f64;
        let t1 = tape.scale(sum1, s(inv_n));
        let t2 = tape.scale(sum2, s(beta * inv_n));
        let quant_loss = tape.add(t1, t2)?;

        let vectors = tape.straight_through(selected, z)?;
        Ok(QuantOut {
            indices,
            vectors,
            quant_loss,
        })
    }

    /// Gathers code vectors for stored indices; differentiable w.r.t. the
    /// table.
    pub fn lookup<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        indices: &[usize],
    ) -> Result<NodeId> {
        tape.rows(bound.node(self.table), indices)
    }

    /// Fraction of codes hit at least once since the last reset.
    pub fn usage(&self) -> Result<f64> {
        if self.total.load(Ordering::Relaxed) == 0 {
            return Err(Error::EmptyStats);
        }
        let used = self
            .hits
            .iter()
            .filter(|h| h.load(Ordering::Relaxed) > 0)
            .count();
        Ok(used as f64 / self.k_c as f64)
    }

    pub fn hit_counts(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.load(Ordering::Relaxed)).collect()
    }

    pub fn total_quantized(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    pub fn reset_usage(&self) {
        for h in &self.hits {
            h.store(0, Ordering::Relaxed);
        }
        self.total.store(0, Ordering::Relaxed);
    }
}
