//! Central-difference audit of every differentiable path the training
//! losses use. Gated paths run in surrogate mode, where straight-through
//! nodes forward their soft branch, so the probed function is exactly the
//! one the tape differentiates.

use graincode::{
    budget_loss, finite_diff_check, finite_diff_check_mode, route_from_logits, Bound, CodeGrid,
    Codebook, FdReport, GatePolicy, GrainGeometry, GrainSpec, NodeId, ParamSet, Prior,
    PriorConfig, Reduction, Result, Stage1, Stage1Config, StMode, Tensor, Vocab,
};
use graincode::nn::{gumbel_noise, randn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct SuiteEntry {
    pub name: &'static str,
    pub report: FdReport,
}

fn noise(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(&mut rng, shape, 1.0)
}

fn softmax_cross_entropy() -> Result<FdReport> {
    let logits = noise(1, &[5, 7]);
    let probed = noise(2, &[5, 7]);
    let weight = noise(3, &[5, 7]);
    finite_diff_check(&[logits, probed], 1e-5, move |tape, ids| {
        let sm = tape.softmax(ids[0], 0.7)?;
        let w = tape.constant(weight.clone());
        let weighted = tape.mul(sm, w)?;
        let a = tape.sum_all(weighted);
        let b = tape.cross_entropy(ids[1], &[3, 0, 6, 2, 1], &[], Reduction::Mean)?;
        tape.add(a, b)
    })
}

fn group_norm() -> Result<FdReport> {
    let x = noise(4, &[4, 12]);
    let weight = noise(5, &[4, 12]);
    finite_diff_check(&[x], 1e-5, move |tape, ids| {
        let gn = tape.group_norm(ids[0], 4, 1e-5)?;
        let w = tape.constant(weight.clone());
        let weighted = tape.mul(gn, w)?;
        Ok(tape.sum_all(weighted))
    })
}

fn vq_straight_through() -> Result<FdReport> {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let codebook = Codebook::new(&mut params, &mut rng, "codes", 5, 4)?;
    let table = params.iter().next().unwrap().1.clone();
    let z = noise(7, &[6, 4]);
    let weight = noise(8, &[6, 4]);
    finite_diff_check_mode(StMode::Surrogate, &[z], 1e-5, move |tape, ids| {
        let table_node = tape.constant(table.clone());
        let bound = Bound::from_nodes(vec![table_node]);
        let q = codebook.quantize(tape, &bound, ids[0], 0.25)?;
        let w = tape.constant(weight.clone());
        let weighted = tape.mul(q.vectors, w)?;
        Ok(tape.sum_all(weighted))
    })
}

fn gumbel_routing() -> Result<FdReport> {
    let logits = noise(9, &[6, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let frozen: Tensor<f64> = gumbel_noise(&mut rng, &[6, 3]);
    let w_p = noise(11, &[6, 1]);
    let w_oh = noise(12, &[6, 3]);
    finite_diff_check_mode(StMode::Surrogate, &[logits], 1e-5, move |tape, ids| {
        let g = tape.constant(frozen.clone());
        let noisy = tape.add(ids[0], g)?;
        let map = route_from_logits(tape, noisy, 1.0)?;
        let wp = tape.constant(w_p.clone());
        let woh = tape.constant(w_oh.clone());
        let a = tape.mul(map.p, wp)?;
        let b = tape.mul(map.onehot_st, woh)?;
        let sa = tape.sum_all(a);
        let sb = tape.sum_all(b);
        tape.add(sa, sb)
    })
}

fn budget() -> Result<FdReport> {
    let logits = noise(13, &[8, 2]);
    finite_diff_check_mode(StMode::Surrogate, &[logits], 1e-5, move |tape, ids| {
        let map = route_from_logits(tape, ids[0], 1.0)?;
        budget_loss(tape, map.onehot_st, &[0.3, 0.7])
    })
}

fn stage1_cfg() -> Result<Stage1Config> {
    Ok(Stage1Config {
        img_h: 8,
        img_w: 8,
        n_z: 4,
        k_c: 6,
        hidden: 8,
        beta: 0.25,
        tau: 1.0,
        spec: GrainSpec::new(vec![2, 4], vec![0.5, 0.5], 10.0)?,
    })
}

fn stage1_total() -> Result<FdReport> {
    let model = Stage1::<f64>::new(stage1_cfg()?, 41)?;
    let img = noise(14, &[64, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let frozen: Tensor<f64> = gumbel_noise(&mut rng, &[4, 2]);
    let w_g = model.params.get(model.gate.w_g).clone();
    finite_diff_check_mode(StMode::Surrogate, &[w_g], 1e-5, move |tape, ids| {
        let nodes: Vec<NodeId> = model
            .params
            .ids()
            .map(|id| {
                if id == model.gate.w_g {
                    ids[0]
                } else {
                    tape.leaf(model.params.get(id).clone())
                }
            })
            .collect();
        let bound = Bound::from_nodes(nodes);
        let fwd = model.forward(tape, &bound, &img, &GatePolicy::Train(&frozen))?;
        Ok(fwd.total)
    })
}

fn stage2_total() -> Result<FdReport> {
    let spec = GrainSpec::new(vec![2, 4], vec![0.5, 0.5], 10.0)?;
    let geo = GrainGeometry::new(spec, 8, 8)?;
    let vocab = Vocab::new(&geo, 5, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let grids: Vec<CodeGrid> = (0..2).map(|_| CodeGrid::random(&geo, 5, &mut rng)).collect();
    let pad_to = graincode::pad_plan(&grids, &geo, 1);
    let seqs: Vec<_> = grids
        .iter()
        .map(|g| graincode::encode_sequence(g, &geo, &vocab, &pad_to))
        .collect::<Result<_>>()?;
    let cfg = PriorConfig {
        d: 8,
        pos_depth: 1,
        content_depth: 1,
        heads: 2,
        max_len: 24,
        dropout: 0.0,
    };
    let model = Prior::<f64>::new(cfg, vocab, 17)?;
    let inputs: Vec<Tensor<f64>> = model.params.ids().map(|id| model.params.get(id).clone()).collect();
    finite_diff_check_mode(StMode::Hard, &inputs, 1e-5, move |tape, ids| {
        let bound = Bound::from_nodes(ids.to_vec());
        let loss = model.stage2_loss(tape, &bound, &seqs, None)?;
        Ok(loss.total)
    })
}

/// Runs every check; the caller decides the tolerance (1e-4 at f64).
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        SuiteEntry {
            name: "softmax_cross_entropy",
            report: softmax_cross_entropy()?,
        },
        SuiteEntry {
            name: "group_norm",
            report: group_norm()?,
        },
        SuiteEntry {
            name: "vq_straight_through",
            report: vq_straight_through()?,
        },
        SuiteEntry {
            name: "gumbel_routing_frozen_noise",
            report: gumbel_routing()?,
        },
        SuiteEntry {
            name: "budget_loss",
            report: budget()?,
        },
        SuiteEntry {
            name: "stage1_total_wrt_gate",
            report: stage1_total()?,
        },
        SuiteEntry {
            name: "stage2_total_all_params",
            report: stage2_total()?,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_path_matches_central_differences() {
        for entry in gradient_suite().unwrap() {
            assert!(
                entry.report.passes(1e-4),
                "{}: {:?}",
                entry.name,
                entry.report
            );
        }
    }
}
