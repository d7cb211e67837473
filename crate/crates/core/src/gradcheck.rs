//! Central-difference gradient oracle.
//!
//! Rebuilds the computation from scratch for every probe, so the builder
//! closure must be a pure function of the input tensors. That purity is
//! enforced: the unperturbed loss is evaluated twice and must match
//! bitwise before any probing starts.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, StMode, Tape};
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error over all probed elements.
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) at the maximum.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Elements probed.
    pub probes: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    // Central differences carry roundoff noise of order eps*|f|/h, about
    // 1e-10 for unit-scale losses at h = 1e-5. Components below the floor
    // are indistinguishable from that noise, so the floor keeps them from
    // dominating the report.
    (a - n).abs() / (a.abs().max(n.abs())).max(1e-6)
}

/// Checks the tape gradient of `build` against central differences in the
/// given straight-through mode. `build` receives one leaf per input tensor
/// and must return a scalar loss node.
pub fn finite_diff_check_mode<S, F>(
    mode: StMode,
    inputs: &[Tensor<S>],
    h: f64,
    build: F,
) -> Result<FdReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<S>]| -> Result<(Tape<S>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::with_mode(mode);
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "finite_diff_check",
                lhs: tape.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        Ok((tape, ids, loss))
    };

    let base: Vec<Tensor<S>> = inputs.to_vec();
    let (tape_a, ids, loss_a) = eval(&base)?;
    let (tape_b, _, loss_b) = eval(&base)?;
    let va = tape_a.value(loss_a).item();
    let vb = tape_b.value(loss_b).item();
    if va.to_f64_lossy().to_bits() != vb.to_f64_lossy().to_bits() {
        return Err(Error::Determinism);
    }
    if !va.is_finite() {
        return Err(Error::Numeric(format!(
            "finite_diff_check: loss is {va} at the base point"
        )));
    }

    let grads = tape_a.backward(loss_a)?;
    let hs: S = s(h);

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        probes: 0,
    };
    for (pi, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], input.shape());
        for ei in 0..input.numel() {
            let orig = base[pi].data()[ei];

            let mut plus = base.clone();
            plus[pi].data_mut()[ei] = orig + hs;
            let (tp, _, lp) = eval(&plus)?;
            let fp = tp.value(lp).item().to_f64_lossy();

            let mut minus = base.clone();
            minus[pi].data_mut()[ei] = orig - hs;
            let (tm, _, lm) = eval(&minus)?;
            let fm = tm.value(lm).item().to_f64_lossy();

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric(format!(
                    "finite_diff_check: probe at input {pi} elem {ei} returned {fp}/{fm}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[ei].to_f64_lossy();
            let e = rel_err(a, numeric);
            report.probes += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((pi, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

/// [`finite_diff_check_mode`] with the default hard forward. Use the
/// surrogate mode explicitly when the graph contains straight-through
/// nodes; in hard mode their forward is piecewise constant and the
/// numeric derivative would measure nothing.
pub fn finite_diff_check<S, F>(inputs: &[Tensor<S>], h: f64, build: F) -> Result<FdReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check_mode(StMode::Hard, inputs, h, build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn detects_wrong_gradient() {
        // abs has a spurious-gradient trap at 0; a deliberately broken
        // build (grad scaled by detached copy mismatch) must be caught
        let x = Tensor::new(vec![1, 2], vec![0.7, -0.3]).unwrap();
        let report = finite_diff_check(&[x], 1e-5, |tape, ids| {
            let d = tape.detach(ids[0]); // gradient path severed
            let sq = tape.mul(d, d)?;
            let smooth = tape.mul(ids[0], ids[0])?;
            let both = tape.add(sq, smooth)?;
            Ok(tape.sum_all(both))
        })
        .unwrap();
        // analytic sees d(x²)=2x, numeric sees d(2x²)=4x
        assert!(report.max_rel_err > 0.4, "{report:?}");
    }

    #[test]
    fn accepts_correct_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 2]);
        let report = finite_diff_check(&[x, w], 1e-5, |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            let act = tape.silu(y);
            let norm = tape.layer_norm(act, 1e-5);
            let sm = tape.softmax(norm, 1.3)?;
            Ok(tape.mean_all(sm))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn nondeterministic_build_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let x = Tensor::scalar(1.0f64);
        let err = finite_diff_check(&[x], 1e-5, |tape, ids| {
            counter.set(counter.get() + 1.0);
            let c = tape.constant(Tensor::scalar(counter.get()));
            let y = tape.mul(ids[0], c)?;
            Ok(tape.sum_all(y))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Determinism));
    }
}
