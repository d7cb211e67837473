//! Autoregressive prior over token sequences: a position stack predicts
//! where the next code lands, a content stack predicts which code it is,
//! conditioned on the ground-truth next position.
//!
//! Input embedding sums four parts: shared content table, per-granularity
//! position tables, granularity table, absolute position table. Both
//! stacks are pre-norm causal transformers. Losses are mean NLL over
//! non-pad targets; pads stay present as inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    bind, collect_grads, randn, Adam, Bound, Linear, ParamId, ParamSet, TransformerBlock,
    INIT_STD,
};
use crate::scalar::{s, Scalar};
use crate::sequence::{TokenSequence, Vocab};
use crate::stage1::mix_seed;
use crate::tape::{NodeId, Reduction, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub d: usize,
    pub pos_depth: usize,
    pub content_depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must cover at least two tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Which embedding addends are active. `shared_position` reroutes every
/// granularity's position lookup through the finest (largest) table, for
/// the sharing ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedToggles {
    pub content: bool,
    pub position: bool,
    pub grain: bool,
    pub absolute: bool,
    pub shared_position: bool,
}

impl Default for EmbedToggles {
    fn default() -> Self {
        EmbedToggles {
            content: true,
            position: true,
            grain: true,
            absolute: true,
            shared_position: false,
        }
    }
}

struct EmbeddingBank {
    content: ParamId,
    position: Vec<ParamId>,
    grain: ParamId,
    absolute: ParamId,
}

pub struct Prior<S: Scalar> {
    pub cfg: PriorConfig,
    pub vocab: Vocab,
    pub params: ParamSet<S>,
    pub toggles: EmbedToggles,
    bank: EmbeddingBank,
    pos_blocks: Vec<TransformerBlock>,
    content_blocks: Vec<TransformerBlock>,
    pos_heads: Vec<Linear>,
    content_head: Linear,
}

/// Tape handles and target counts of one loss evaluation.
pub struct Stage2Loss {
    pub position: NodeId,
    pub content: NodeId,
    pub total: NodeId,
    pub position_targets: usize,
    pub content_targets: usize,
}

#[derive(Debug, Clone)]
pub struct PriorLosses {
    pub total: f64,
    pub position: f64,
    pub content: f64,
}

impl<S: Scalar> Prior<S> {
    pub fn new(cfg: PriorConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let bank = EmbeddingBank {
            content: params.register(
                "emb.content",
                randn(&mut rng, &[vocab.content_size(), d], INIT_STD),
            )?,
            position: (0..vocab.k_g())
                .map(|k| {
                    params.register(
                        format!("emb.pos{k}"),
                        randn(&mut rng, &[vocab.position_size(k), d], INIT_STD),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            grain: params.register("emb.grain", randn(&mut rng, &[vocab.k_g(), d], INIT_STD))?,
            absolute: params.register(
                "emb.abs",
                randn(&mut rng, &[cfg.max_len, d], INIT_STD),
            )?,
        };
        let pos_blocks = (0..cfg.pos_depth)
            .map(|j| TransformerBlock::new(&mut params, &mut rng, &format!("pos.b{j}"), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let pos_heads = (0..vocab.k_g())
            .map(|k| {
                Linear::new(
                    &mut params,
                    &mut rng,
                    &format!("pos.head{k}"),
                    d,
                    vocab.position_size(k),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let content_blocks = (0..cfg.content_depth)
            .map(|j| TransformerBlock::new(&mut params, &mut rng, &format!("cnt.b{j}"), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let content_head = Linear::new(
            &mut params,
            &mut rng,
            "cnt.head",
            d,
            vocab.content_size(),
            true,
        )?;
        Ok(Prior {
            cfg,
            vocab,
            params,
            toggles: EmbedToggles::default(),
            bank,
            pos_blocks,
            content_blocks,
            pos_heads,
            content_head,
        })
    }

    fn check_tokens(&self, content: &[usize], position: &[usize], grains: &[usize]) -> Result<usize> {
        let l = content.len();
        if position.len() != l || grains.len() != l {
            return Err(Error::Shape {
                op: "prior tokens",
                lhs: vec![l, position.len()],
                rhs: vec![grains.len()],
            });
        }
        if l == 0 || l > self.cfg.max_len {
            return Err(Error::Config(format!(
                "sequence length {l} outside 1..={}",
                self.cfg.max_len
            )));
        }
        for i in 0..l {
            if grains[i] >= self.vocab.k_g() {
                return Err(Error::Index {
                    what: "granularity tag",
                    index: grains[i],
                    len: self.vocab.k_g(),
                    cell: i,
                });
            }
            if content[i] >= self.vocab.content_size() {
                return Err(Error::Index {
                    what: "content token",
                    index: content[i],
                    len: self.vocab.content_size(),
                    cell: i,
                });
            }
            if position[i] >= self.vocab.position_size(grains[i]) {
                return Err(Error::Index {
                    what: "position token",
                    index: position[i],
                    len: self.vocab.position_size(grains[i]),
                    cell: i,
                });
            }
        }
        Ok(l)
    }

    /// Looks position tokens up in their granularity's table (or the
    /// shared finest table), preserving stream order. Runs of equal
    /// granularity are gathered together.
    pub fn position_rows(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        positions: &[usize],
        grains: &[usize],
    ) -> Result<NodeId> {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < positions.len() {
            let g = grains[i];
            let mut j = i;
            while j < positions.len() && grains[j] == g {
                j += 1;
            }
            let table = if self.toggles.shared_position { 0 } else { g };
            parts.push(tape.rows(bound.node(self.bank.position[table]), &positions[i..j])?);
            i = j;
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// Sum of the enabled embedding parts, [L, d].
    pub fn embed(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
    ) -> Result<NodeId> {
        let l = self.check_tokens(content, position, grains)?;
        let mut acc: Option<NodeId> = None;
        let push = |tape: &mut Tape<S>, acc: &mut Option<NodeId>, part: NodeId| -> Result<()> {
            *acc = Some(match *acc {
                None => part,
                Some(a) => tape.add(a, part)?,
            });
            Ok(())
        };
        if self.toggles.content {
            let part = tape.rows(bound.node(self.bank.content), content)?;
            push(tape, &mut acc, part)?;
        }
        if self.toggles.position {
            let part = self.position_rows(tape, bound, position, grains)?;
            push(tape, &mut acc, part)?;
        }
        if self.toggles.grain {
            let part = tape.rows(bound.node(self.bank.grain), grains)?;
            push(tape, &mut acc, part)?;
        }
        if self.toggles.absolute {
            let idx: Vec<usize> = (0..l).collect();
            let part = tape.rows(bound.node(self.bank.absolute), &idx)?;
            push(tape, &mut acc, part)?;
        }
        Ok(match acc {
            Some(x) => x,
            None => tape.constant(Tensor::zeros(&[l, self.cfg.d])),
        })
    }

    pub fn position_forward(&self, tape: &mut Tape<S>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for block in &self.pos_blocks {
            h = block.forward(tape, bound, h)?;
        }
        Ok(h)
    }

    /// Content stack over `h_p + next-position embedding`, then the shared
    /// content head: logits [L, content vocab].
    pub fn content_forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        h_p: NodeId,
        next_positions: NodeId,
    ) -> Result<NodeId> {
        let mut h = tape.add(h_p, next_positions)?;
        for block in &self.content_blocks {
            h = block.forward(tape, bound, h)?;
        }
        self.content_head.forward(tape, bound, h)
    }

    fn dropout(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let rate = self.cfg.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    s(1.0 / keep)
                } else {
                    S::zero()
                }
            })
            .collect();
        let mask = tape.constant(Tensor::new(shape, data)?);
        tape.mul(x, mask)
    }

    /// Both NLL terms for a batch of aligned sequences. Targets are the
    /// streams shifted by one; pad targets are excluded, everything else
    /// (cells, eos, segment openers) counts. Means are over all non-pad
    /// targets in the batch.
    pub fn stage2_loss(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        batch: &[TokenSequence],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Stage2Loss> {
        if batch.is_empty() {
            return Err(Error::EmptyLoss);
        }
        let mut pos_terms = Vec::new();
        let mut content_terms = Vec::new();
        let mut pos_count = 0usize;
        let mut content_count = 0usize;
        for seq in batch {
            let l = seq.len();
            if l < 2 {
                return Err(Error::Config("sequence too short to shift".into()));
            }
            let x = self.embed(
                tape,
                bound,
                &seq.content[..l - 1],
                &seq.position[..l - 1],
                &seq.grain_tag[..l - 1],
            )?;
            let x = self.dropout(tape, x, &mut dropout_rng)?;
            let h_p = self.position_forward(tape, bound, x)?;

            for g in 0..self.vocab.k_g() {
                let steps: Vec<usize> =
                    (0..l - 1).filter(|&i| seq.grain_tag[i + 1] == g).collect();
                if steps.is_empty() {
                    continue;
                }
                let targets: Vec<usize> = steps.iter().map(|&i| seq.position[i + 1]).collect();
                let pad = self.vocab.pad_p(g);
                let active = targets.iter().filter(|&&t| t != pad).count();
                if active == 0 {
                    continue;
                }
                let picked = tape.rows(h_p, &steps)?;
                let logits = self.pos_heads[g].forward(tape, bound, picked)?;
                pos_terms.push(tape.cross_entropy(logits, &targets, &[pad], Reduction::Sum)?);
                pos_count += active;
            }

            let next_p: Vec<usize> = seq.position[1..].to_vec();
            let next_g: Vec<usize> = seq.grain_tag[1..].to_vec();
            let injected = self.position_rows(tape, bound, &next_p, &next_g)?;
            let x_c = tape.add(h_p, injected)?;
            let x_c = self.dropout(tape, x_c, &mut dropout_rng)?;
            let mut h_c = x_c;
            for block in &self.content_blocks {
                h_c = block.forward(tape, bound, h_c)?;
            }
            let logits = self.content_head.forward(tape, bound, h_c)?;
            let targets: Vec<usize> = seq.content[1..].to_vec();
            let pad = self.vocab.pad_c();
            content_terms.push(tape.cross_entropy(logits, &targets, &[pad], Reduction::Sum)?);
            content_count += targets.iter().filter(|&&t| t != pad).count();
        }
        if pos_count == 0 || content_count == 0 {
            return Err(Error::EmptyLoss);
        }
        let fold = |tape: &mut Tape<S>, terms: &[NodeId]| -> Result<NodeId> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Ok(acc)
        };
        let pos_sum = fold(tape, &pos_terms)?;
        let content_sum = fold(tape, &content_terms)?;
        let position = tape.scale(pos_sum, s(1.0 / pos_count as f64));
        let content = tape.scale(content_sum, s(1.0 / content_count as f64));
        let total = tape.add(position, content)?;
        Ok(Stage2Loss {
            position,
            content,
            total,
            position_targets: pos_count,
            content_targets: content_count,
        })
    }

    /// One optimizer step over a batch; dropout noise is replayed from a
    /// stateless per-step stream.
    pub fn train_step(
        &mut self,
        opt: &mut Adam<S>,
        batch: &[TokenSequence],
        seed: u64,
        step: u64,
    ) -> Result<PriorLosses> {
        let mut tape = Tape::new();
        let bound = bind(&self.params, &mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, step));
        let drop_rng = (self.cfg.dropout > 0.0).then_some(&mut rng);
        let loss = self.stage2_loss(&mut tape, &bound, batch, drop_rng)?;
        let total = tape.value(loss.total).item().to_f64_lossy();
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "stage-2 loss diverged to {total} at step {step}"
            )));
        }
        let out = PriorLosses {
            total,
            position: tape.value(loss.position).item().to_f64_lossy(),
            content: tape.value(loss.content).item().to_f64_lossy(),
        };
        let grads = tape.backward(loss.total)?;
        let per_param = collect_grads(&bound, &grads);
        opt.step(&mut self.params, &per_param)?;
        Ok(out)
    }

    /// Logits over `target_grain`'s position vocabulary for the slot after
    /// the given prefix.
    pub fn next_position_logits(
        &self,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
        target_grain: usize,
    ) -> Result<Vec<f64>> {
        if target_grain >= self.vocab.k_g() {
            return Err(Error::Index {
                what: "granularity tag",
                index: target_grain,
                len: self.vocab.k_g(),
                cell: 0,
            });
        }
        let mut tape = Tape::new();
        let bound = bind(&self.params, &mut tape);
        let x = self.embed(&mut tape, &bound, content, position, grains)?;
        let h_p = self.position_forward(&mut tape, &bound, x)?;
        let last = tape.rows(h_p, &[content.len() - 1])?;
        let logits = self.pos_heads[target_grain].forward(&mut tape, &bound, last)?;
        Ok(tape.value(logits).data().iter().map(|v| v.to_f64_lossy()).collect())
    }

    /// Logits over the content vocabulary for the slot after the prefix,
    /// conditioned on that slot's already-chosen position.
    pub fn next_content_logits(
        &self,
        content: &[usize],
        position: &[usize],
        grains: &[usize],
        target_grain: usize,
        next_pos: usize,
    ) -> Result<Vec<f64>> {
        if target_grain >= self.vocab.k_g() {
            return Err(Error::Index {
                what: "granularity tag",
                index: target_grain,
                len: self.vocab.k_g(),
                cell: 0,
            });
        }
        if next_pos >= self.vocab.position_size(target_grain) {
            return Err(Error::Index {
                what: "position token",
                index: next_pos,
                len: self.vocab.position_size(target_grain),
                cell: content.len(),
            });
        }
        let mut tape = Tape::new();
        let bound = bind(&self.params, &mut tape);
        let l = content.len();
        let x = self.embed(&mut tape, &bound, content, position, grains)?;
        let h_p = self.position_forward(&mut tape, &bound, x)?;
        let mut np: Vec<usize> = position[1..l].to_vec();
        np.push(next_pos);
        let mut ng: Vec<usize> = grains[1..l].to_vec();
        ng.push(target_grain);
        let injected = self.position_rows(&mut tape, &bound, &np, &ng)?;
        let logits = self.content_forward(&mut tape, &bound, h_p, injected)?;
        let last = tape.rows(logits, &[l - 1])?;
        Ok(tape.value(last).data().iter().map(|v| v.to_f64_lossy()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::grain::{GrainGeometry, GrainSpec};
    use crate::sequence::{encode_sequence, pad_plan};
    use crate::stage1::CodeGrid;

    fn geo_8() -> GrainGeometry {
        GrainGeometry::new(GrainSpec::new(vec![2, 4], vec![0.5, 0.5], 1.0).unwrap(), 8, 8)
            .unwrap()
    }

    fn tiny_cfg(d: usize, depth: usize) -> PriorConfig {
        PriorConfig {
            d,
            pos_depth: depth,
            content_depth: depth,
            heads: 2,
            max_len: 40,
            dropout: 0.0,
        }
    }

    /// Four grids whose encoded sequences split at the very first body
    /// token, so an overfit model's only irreducible loss is that branch.
    fn branching_grids(geo: &GrainGeometry) -> Vec<CodeGrid> {
        let all_coarse = CodeGrid::new(
            geo,
            vec![1; 4],
            vec![vec![None; 16], vec![Some(1), Some(2), Some(3), Some(4)]],
        )
        .unwrap();
        let mut fine0 = vec![None; 16];
        for c in geo.region_cells(0, 0) {
            fine0[c] = Some(5);
        }
        let one_fine = CodeGrid::new(
            geo,
            vec![0, 1, 1, 1],
            vec![fine0.clone(), vec![None, Some(2), Some(3), Some(4)]],
        )
        .unwrap();
        let mut fine01 = fine0;
        for c in geo.region_cells(0, 1) {
            fine01[c] = Some(6);
        }
        let two_fine = CodeGrid::new(
            geo,
            vec![0, 0, 1, 1],
            vec![fine01, vec![None, None, Some(3), Some(4)]],
        )
        .unwrap();
        let all_fine = CodeGrid::new(
            geo,
            vec![0; 4],
            vec![(0..16).map(|c| Some(c % 7)).collect(), vec![None; 4]],
        )
        .unwrap();
        vec![all_coarse, one_fine, two_fine, all_fine]
    }

    fn batch_for(geo: &GrainGeometry, vocab: &Vocab, grids: &[CodeGrid]) -> Vec<TokenSequence> {
        let plan = pad_plan(grids, geo, 0);
        grids
            .iter()
            .map(|g| encode_sequence(g, geo, vocab, &plan).unwrap())
            .collect()
    }

    #[test]
    fn embedding_tables_are_grain_disjoint() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 0), vocab, 3).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        // same content token, same position index, different granularity
        let x = prior.embed(&mut tape, &bound, &[2, 2], &[1, 1], &[1, 0]).unwrap();
        let v = tape.value(x);
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn toggles_zero_their_addend() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let mut prior = Prior::<f64>::new(tiny_cfg(8, 0), vocab, 3).unwrap();
        let run = |prior: &Prior<f64>| {
            let mut tape = Tape::new();
            let bound = bind(&prior.params, &mut tape);
            let x = prior.embed(&mut tape, &bound, &[1, 2], &[0, 1], &[1, 1]).unwrap();
            tape.value(x).data().to_vec()
        };
        let full = run(&prior);
        prior.toggles.grain = false;
        let no_grain = run(&prior);
        assert_ne!(full, no_grain);
        prior.toggles = EmbedToggles {
            content: false,
            position: false,
            grain: false,
            absolute: false,
            shared_position: false,
        };
        assert!(run(&prior).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_position_reroutes_to_finest_table() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let mut prior = Prior::<f64>::new(tiny_cfg(8, 0), vocab, 3).unwrap();
        prior.toggles = EmbedToggles {
            content: false,
            position: true,
            grain: false,
            absolute: false,
            shared_position: true,
        };
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        // same cell index at both granularities now hits one table
        let x = prior.embed(&mut tape, &bound, &[0, 0], &[3, 3], &[1, 0]).unwrap();
        let v = tape.value(x);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn embedding_gradient_counts_occurrences() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 4, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 0), vocab, 5).unwrap();
        let table = prior.params.get(prior.bank.content).clone();
        let content = [1usize, 3, 1, 1, 0];
        let report = finite_diff_check(&[table], 1e-6, |tape, ids| {
            let nodes = prior
                .params
                .ids()
                .map(|id| {
                    if id == prior.bank.content {
                        ids[0]
                    } else {
                        tape.leaf(prior.params.get(id).clone())
                    }
                })
                .collect();
            let bound = Bound::from_nodes(nodes);
            let x = prior.embed(tape, &bound, &content, &[0, 1, 2, 3, 0], &[1, 1, 1, 0, 0])?;
            Ok(tape.sum_all(x))
        })
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");

        // direct check: each table row's gradient is its occurrence count
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        let x = prior
            .embed(&mut tape, &bound, &content, &[0, 1, 2, 3, 0], &[1, 1, 1, 0, 0])
            .unwrap();
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(bound.node(prior.bank.content)).unwrap();
        for (row, want) in [(0usize, 1.0), (1, 3.0), (2, 0.0), (3, 1.0)] {
            assert!(g.row(row).iter().all(|&v| v == want), "row {row}");
        }
    }

    #[test]
    fn position_stack_is_causal_and_depth0_is_identity() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 2), vocab.clone(), 7).unwrap();
        let run = |content: &[usize]| {
            let mut tape = Tape::new();
            let bound = bind(&prior.params, &mut tape);
            let x = prior
                .embed(&mut tape, &bound, content, &[4, 0, 1, 2], &[1, 1, 1, 1])
                .unwrap();
            let h = prior.position_forward(&mut tape, &bound, x).unwrap();
            tape.value(h).data().to_vec()
        };
        let a = run(&[8, 1, 2, 3]);
        let b = run(&[8, 1, 2, 7]);
        assert_eq!(a[0..3 * 8], b[0..3 * 8]);
        assert_ne!(a[3 * 8..], b[3 * 8..]);

        let shallow = Prior::<f64>::new(tiny_cfg(8, 0), vocab, 7).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&shallow.params, &mut tape);
        let x = shallow.embed(&mut tape, &bound, &[1, 2], &[0, 1], &[0, 0]).unwrap();
        let h = shallow.position_forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(h).data(), tape.value(x).data());
    }

    #[test]
    fn single_block_matches_hand_computed_attention() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 4, 0);
        let mut prior = Prior::<f64>::new(
            PriorConfig {
                d: 2,
                pos_depth: 1,
                content_depth: 0,
                heads: 1,
                max_len: 8,
                dropout: 0.0,
            },
            vocab,
            1,
        )
        .unwrap();
        let set = |p: &mut ParamSet<f64>, name: &str, shape: &[usize], data: Vec<f64>| {
            let id = p.id_of(name).unwrap();
            p.set(id, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
        };
        let wq = [[0.3, -0.1], [0.2, 0.4]];
        let wk = [[0.1, 0.3], [-0.2, 0.15]];
        let wv = [[0.25, -0.3], [0.1, 0.2]];
        let wo = [[0.4, 0.1], [-0.2, 0.3]];
        let bq = [0.05, -0.02];
        let bk = [0.0, 0.1];
        let bv = [-0.05, 0.0];
        let bo = [0.02, 0.03];
        let flat = |m: [[f64; 2]; 2]| vec![m[0][0], m[0][1], m[1][0], m[1][1]];
        set(&mut prior.params, "pos.b0.wq.w", &[2, 2], flat(wq));
        set(&mut prior.params, "pos.b0.wk.w", &[2, 2], flat(wk));
        set(&mut prior.params, "pos.b0.wv.w", &[2, 2], flat(wv));
        set(&mut prior.params, "pos.b0.wo.w", &[2, 2], flat(wo));
        set(&mut prior.params, "pos.b0.wq.b", &[1, 2], bq.to_vec());
        set(&mut prior.params, "pos.b0.wk.b", &[1, 2], bk.to_vec());
        set(&mut prior.params, "pos.b0.wv.b", &[1, 2], bv.to_vec());
        set(&mut prior.params, "pos.b0.wo.b", &[1, 2], bo.to_vec());
        let fc1_w: Vec<f64> = (0..16).map(|i| 0.1 * ((i as f64) * 0.13).sin()).collect();
        let fc1_b: Vec<f64> = (0..8).map(|j| 0.01 * j as f64).collect();
        let fc2_w: Vec<f64> = (0..16).map(|i| 0.1 * ((i as f64) * 0.29).cos()).collect();
        let fc2_b = vec![0.01, -0.01];
        set(&mut prior.params, "pos.b0.fc1.w", &[2, 8], fc1_w.clone());
        set(&mut prior.params, "pos.b0.fc1.b", &[1, 8], fc1_b.clone());
        set(&mut prior.params, "pos.b0.fc2.w", &[8, 2], fc2_w.clone());
        set(&mut prior.params, "pos.b0.fc2.b", &[1, 2], fc2_b.clone());

        let x = [[0.6, -0.4], [0.2, 0.9]];
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        let node = tape.constant(Tensor::new(vec![2, 2], vec![x[0][0], x[0][1], x[1][0], x[1][1]]).unwrap());
        let got = prior.position_forward(&mut tape, &bound, node).unwrap();
        let got = tape.value(got).data().to_vec();

        // host-side oracle with explicit arithmetic
        let ln = |v: [f64; 2]| {
            let m = (v[0] + v[1]) / 2.0;
            let var = ((v[0] - m).powi(2) + (v[1] - m).powi(2)) / 2.0;
            let inv = 1.0 / (var + 1e-5).sqrt();
            [(v[0] - m) * inv, (v[1] - m) * inv]
        };
        let mv = |w: [[f64; 2]; 2], v: [f64; 2], b: [f64; 2]| {
            [
                v[0] * w[0][0] + v[1] * w[1][0] + b[0],
                v[0] * w[0][1] + v[1] * w[1][1] + b[1],
            ]
        };
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let n0 = ln(x[0]);
        let n1 = ln(x[1]);
        let q1 = mv(wq, n1, bq);
        let k0 = mv(wk, n0, bk);
        let k1 = mv(wk, n1, bk);
        let v0 = mv(wv, n0, bv);
        let v1 = mv(wv, n1, bv);
        let scale = 1.0 / 2.0f64.sqrt();
        let s10 = (q1[0] * k0[0] + q1[1] * k0[1]) * scale;
        let s11 = (q1[0] * k1[0] + q1[1] * k1[1]) * scale;
        let mx = s10.max(s11);
        let (e0, e1) = ((s10 - mx).exp(), (s11 - mx).exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let attn = [
            [v0[0], v0[1]],
            [a0 * v0[0] + a1 * v1[0], a0 * v0[1] + a1 * v1[1]],
        ];
        let mut want = Vec::new();
        for (i, row) in attn.iter().enumerate() {
            let proj = mv(wo, [row[0], row[1]], bo);
            let y = [x[i][0] + proj[0], x[i][1] + proj[1]];
            let n = ln(y);
            let mut out = [y[0] + fc2_b[0], y[1] + fc2_b[1]];
            for h in 0..8 {
                let pre = n[0] * fc1_w[h] + n[1] * fc1_w[8 + h] + fc1_b[h];
                let act = silu(pre);
                out[0] += act * fc2_w[h * 2];
                out[1] += act * fc2_w[h * 2 + 1];
            }
            want.extend(out);
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn content_conditioning_and_causality() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 1), vocab.clone(), 11).unwrap();
        let grids = branching_grids(&geo);
        let batch = batch_for(&geo, &vocab, &grids[..1]);
        let seq = &batch[0];
        let l = seq.len();

        let logits_with = |content: &[usize], positions: &[usize]| {
            let mut tape = Tape::new();
            let bound = bind(&prior.params, &mut tape);
            let x = prior
                .embed(&mut tape, &bound, &content[..l - 1], &seq.position[..l - 1], &seq.grain_tag[..l - 1])
                .unwrap();
            let h_p = prior.position_forward(&mut tape, &bound, x).unwrap();
            let injected = prior
                .position_rows(&mut tape, &bound, &positions[1..], &seq.grain_tag[1..])
                .unwrap();
            let out = prior.content_forward(&mut tape, &bound, h_p, injected).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = logits_with(&seq.content, &seq.position);

        // perturbing a later content token leaves earlier logits intact
        let mut bumped = seq.content.clone();
        bumped[3] = (bumped[3] + 1) % vocab.k_c();
        let pert = logits_with(&bumped, &seq.position);
        let w = vocab.content_size();
        assert_eq!(base[..3 * w], pert[..3 * w]);
        assert_ne!(base[3 * w..], pert[3 * w..]);

        // swapping the injected ground-truth position moves the logits
        let mut moved = seq.position.clone();
        let (a, b) = (moved[1], moved[2]);
        moved[1] = b;
        moved[2] = a;
        let swapped = logits_with(&seq.content, &moved);
        assert_ne!(base[..w], swapped[..w]);
    }

    #[test]
    fn fresh_model_loss_sits_near_log_vocab() {
        let geo = GrainGeometry::new(GrainSpec::fixed(4, 0.0).unwrap(), 8, 8).unwrap();
        let vocab = Vocab::new(&geo, 16, 0);
        let prior = Prior::<f64>::new(tiny_cfg(16, 1), vocab.clone(), 13).unwrap();
        let grid = CodeGrid::new(
            &geo,
            vec![0; 4],
            vec![(0..4).map(Some).collect::<Vec<_>>()],
        )
        .unwrap();
        let batch = batch_for(&geo, &vocab, &[grid]);
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        let loss = prior.stage2_loss(&mut tape, &bound, &batch, None).unwrap();
        let pos = tape.value(loss.position).item();
        let cnt = tape.value(loss.content).item();
        assert!((pos - (vocab.position_size(0) as f64).ln()).abs() < 0.05, "{pos}");
        assert!((cnt - (vocab.content_size() as f64).ln()).abs() < 0.05, "{cnt}");
        let total = tape.value(loss.total).item();
        assert_eq!(total, pos + cnt);
    }

    #[test]
    fn identical_sequences_batch_like_one() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 1), vocab.clone(), 17).unwrap();
        let grids = branching_grids(&geo);
        let batch = batch_for(&geo, &vocab, &grids[..1]);
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        let single = prior.stage2_loss(&mut tape, &bound, &batch, None).unwrap();
        let tripled = vec![batch[0].clone(), batch[0].clone(), batch[0].clone()];
        let mut tape3 = Tape::new();
        let bound3 = bind(&prior.params, &mut tape3);
        let triple = prior.stage2_loss(&mut tape3, &bound3, &tripled, None).unwrap();
        let a = tape.value(single.total).item();
        let b = tape3.value(triple.total).item();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn stage2_loss_checks_out_against_finite_differences() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 6, 0);
        let prior = Prior::<f64>::new(
            PriorConfig {
                d: 8,
                pos_depth: 1,
                content_depth: 1,
                heads: 2,
                max_len: 40,
                dropout: 0.0,
            },
            vocab.clone(),
            19,
        )
        .unwrap();
        let grids = branching_grids(&geo);
        let batch = batch_for(&geo, &vocab, &grids[1..3]);
        let inputs: Vec<Tensor<f64>> =
            prior.params.ids().map(|id| prior.params.get(id).clone()).collect();
        let report = finite_diff_check(&inputs, 1e-5, |tape, ids| {
            let bound = Bound::from_nodes(ids.to_vec());
            let loss = prior.stage2_loss(tape, &bound, &batch, None)?;
            Ok(loss.total)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn overfit_one_sequence_drives_both_losses_under_a_tenth() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let mut prior = Prior::<f64>::new(tiny_cfg(16, 1), vocab.clone(), 23).unwrap();
        let grids = branching_grids(&geo);
        let batch = batch_for(&geo, &vocab, &grids[1..2]);
        let mut opt = Adam::new(&prior.params, 5e-3);
        let mut last = PriorLosses {
            total: f64::INFINITY,
            position: f64::INFINITY,
            content: f64::INFINITY,
        };
        for step in 0..800 {
            last = prior.train_step(&mut opt, &batch, 3, step).unwrap();
        }
        assert!(last.position < 0.1, "position {}", last.position);
        assert!(last.content < 0.1, "content {}", last.content);
    }

    #[test]
    fn overfit_four_sequences_to_a_twentieth_of_initial() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let mut prior = Prior::<f64>::new(tiny_cfg(16, 1), vocab.clone(), 29).unwrap();
        let grids = branching_grids(&geo);
        let batch = batch_for(&geo, &vocab, &grids);
        let mut opt = Adam::new(&prior.params, 3e-3);
        let initial = prior.train_step(&mut opt, &batch, 5, 0).unwrap().total;
        let mut last = initial;
        for step in 1..2000 {
            last = prior.train_step(&mut opt, &batch, 5, step).unwrap().total;
        }
        assert!(
            last < 0.05 * initial,
            "loss {last} did not reach 5% of initial {initial}"
        );
    }

    #[test]
    fn sampling_logits_match_teacher_forced_rows() {
        // the incremental interfaces must agree with the batched loss path
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 1), vocab.clone(), 31).unwrap();
        let grids = branching_grids(&geo);
        let batch = batch_for(&geo, &vocab, &grids[..1]);
        let seq = &batch[0];
        for l in 1..seq.len() {
            let target_grain = seq.grain_tag[l];
            let pos = prior
                .next_position_logits(
                    &seq.content[..l],
                    &seq.position[..l],
                    &seq.grain_tag[..l],
                    target_grain,
                )
                .unwrap();
            // teacher-forced reference: full forward, pick step l-1
            let mut tape = Tape::new();
            let bound = bind(&prior.params, &mut tape);
            let x = prior
                .embed(&mut tape, &bound, &seq.content[..l], &seq.position[..l], &seq.grain_tag[..l])
                .unwrap();
            let h_p = prior.position_forward(&mut tape, &bound, x).unwrap();
            let picked = tape.rows(h_p, &[l - 1]).unwrap();
            let logits = prior.pos_heads[target_grain]
                .forward(&mut tape, &bound, picked)
                .unwrap();
            let want: Vec<f64> = tape.value(logits).data().to_vec();
            assert_eq!(pos, want, "step {l}");

            let cnt = prior
                .next_content_logits(
                    &seq.content[..l],
                    &seq.position[..l],
                    &seq.grain_tag[..l],
                    target_grain,
                    seq.position[l],
                )
                .unwrap();
            assert_eq!(cnt.len(), vocab.content_size());
        }
    }

    #[test]
    fn token_range_violations_are_reported() {
        let geo = geo_8();
        let vocab = Vocab::new(&geo, 8, 0);
        let prior = Prior::<f64>::new(tiny_cfg(8, 0), vocab, 37).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&prior.params, &mut tape);
        assert!(matches!(
            prior.embed(&mut tape, &bound, &[99], &[0], &[0]),
            Err(Error::Index { what: "content token", .. })
        ));
        assert!(matches!(
            prior.embed(&mut tape, &bound, &[0], &[7], &[1]),
            Err(Error::Index { what: "position token", .. })
        ));
        let long = vec![0usize; 41];
        assert!(prior.embed(&mut tape, &bound, &long, &long, &vec![0; 41]).is_err());
    }
}
