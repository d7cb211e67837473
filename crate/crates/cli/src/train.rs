//! Training loops and evaluation passes shared by the subcommands and the
//! acceptance suite. Batching, noise, and dropout all derive from the run
//! seed through stateless per-step streams, so every run is replayable.

use std::path::Path;

use graincode::{
    bind, encode_sequence, make_conditional, mix_seed, pad_plan, warmup_lr, Adam, CodeGrid,
    EmbedToggles, GatePolicy, Prior, PriorLosses, Result, Stage1, Stage1Losses, Tape,
    Tensor, TokenSequence, Vocab,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::metrics::{MetricsRecord, MetricsWriter};

/// Shuffled index batches for one epoch. A trailing short batch is kept.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xba7c, epoch));
    order.shuffle(&mut rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Trains a fresh stage-1 model. `forced` pins per-image granularity
/// assignments (one row per dataset image) for the ablations; `ckpt_path`
/// enables periodic and final checkpointing.
pub fn run_stage1_training(
    cfg: &RunConfig,
    images: &[Tensor<f64>],
    forced: Option<&[Vec<usize>]>,
    steps: u64,
    mut metrics: Option<&mut MetricsWriter>,
    ckpt_path: Option<&Path>,
) -> Result<(Stage1<f64>, Adam<f64>)> {
    let mut model = Stage1::<f64>::new(cfg.stage1_config()?, cfg.seed)?;
    let mut opt = Adam::new(&model.params, cfg.stage1.lr);
    let expected = cfg.grain_spec()?.expected_code_length(cfg.image.h, cfg.image.w);
    model.codebook.reset_usage();
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: loop {
        for chunk in epoch_batches(images.len(), cfg.stage1.batch, cfg.seed, epoch) {
            if step >= steps {
                break 'outer;
            }
            opt.lr = warmup_lr(cfg.stage1.lr, step, cfg.optim.warmup);
            let batch: Vec<Tensor<f64>> = chunk.iter().map(|&i| images[i].clone()).collect();
            let rows: Option<Vec<Vec<usize>>> =
                forced.map(|f| chunk.iter().map(|&i| f[i].clone()).collect());
            let losses = model.train_step(&mut opt, &batch, cfg.seed, step, rows.as_deref())?;
            step += 1;
            if step % cfg.optim.log_every == 0 {
                log::info!(
                    "stage1 step {step}: total {:.4} recon {:.4} ratios {:?}",
                    losses.total,
                    losses.recon_l1,
                    losses.ratios
                );
                if let Some(w) = metrics.as_deref_mut() {
                    w.write(&stage1_record(step, &losses, &model, expected)?)?;
                    model.codebook.reset_usage();
                }
            }
            if step % cfg.optim.checkpoint_every == 0 {
                if let Some(path) = ckpt_path {
                    checkpoint::save_stage1(path, cfg, &model, Some(&opt), cfg.seed, step)?;
                }
            }
        }
        epoch += 1;
    }
    if let Some(path) = ckpt_path {
        checkpoint::save_stage1(path, cfg, &model, Some(&opt), cfg.seed, step)?;
    }
    Ok((model, opt))
}

fn stage1_record(
    step: u64,
    losses: &Stage1Losses,
    model: &Stage1<f64>,
    expected: f64,
) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        step,
        recon_l1: Some(losses.recon_l1),
        quant: Some(losses.quant),
        budget: Some(losses.budget),
        ratios: Some(losses.ratios.clone()),
        mean_length: Some(losses.mean_length),
        usage: Some(model.codebook.usage()?),
        expected_length: Some(expected),
        ..Default::default()
    })
}

/// Inference pass over a set of images. `forced` substitutes fixed
/// assignments for the gate (noise-free either way).
pub struct VaeEval {
    pub recon_l1: f64,
    pub per_image_l1: Vec<f64>,
    /// Per image, mean absolute error inside each region.
    pub per_region_l1: Vec<Vec<f64>>,
    pub assignments: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub ratios: Vec<f64>,
    pub mean_length: f64,
    pub var_length: f64,
    pub usage: f64,
}

pub fn eval_stage1(
    model: &Stage1<f64>,
    images: &[Tensor<f64>],
    forced: Option<&[Vec<usize>]>,
) -> Result<VaeEval> {
    if let Some(f) = forced {
        if f.len() != images.len() {
            return Err(graincode::Error::Shape {
                op: "eval_stage1 forced",
                lhs: vec![f.len()],
                rhs: vec![images.len()],
            });
        }
    }
    let geo = &model.geo;
    model.codebook.reset_usage();
    let mut per_image_l1 = Vec::with_capacity(images.len());
    let mut per_region_l1 = Vec::with_capacity(images.len());
    let mut assignments = Vec::with_capacity(images.len());
    let mut lengths = Vec::with_capacity(images.len());
    let mut counts = vec![0usize; geo.spec.k_g()];
    for (i, img) in images.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = bind(&model.params, &mut tape);
        let policy = match forced {
            Some(f) => GatePolicy::Forced(&f[i]),
            None => GatePolicy::Infer,
        };
        let fwd = model.forward(&mut tape, &bound, img, &policy)?;
        let recon = tape.value(fwd.recon).clone();
        let regional = region_l1(img, &recon, geo.h, geo.w, geo.spec.region_size());
        per_image_l1.push(regional.iter().sum::<f64>() / regional.len() as f64);
        per_region_l1.push(regional);
        for &k in &fwd.code_grid.assignments {
            counts[k] += 1;
        }
        lengths.push(fwd.code_grid.dynamic_length(geo));
        assignments.push(fwd.code_grid.assignments);
    }
    let total_regions: usize = counts.iter().sum();
    let ratios: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / total_regions as f64)
        .collect();
    let mean_length = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    let var_length = lengths
        .iter()
        .map(|&l| (l as f64 - mean_length).powi(2))
        .sum::<f64>()
        / lengths.len() as f64;
    Ok(VaeEval {
        recon_l1: per_image_l1.iter().sum::<f64>() / per_image_l1.len() as f64,
        per_image_l1,
        per_region_l1,
        assignments,
        lengths,
        ratios,
        mean_length,
        var_length,
        usage: model.codebook.usage()?,
    })
}

/// Mean absolute error of each region-size tile, row-major over regions.
pub fn region_l1(img: &Tensor<f64>, recon: &Tensor<f64>, h: usize, w: usize, s: usize) -> Vec<f64> {
    let (rh, rw) = (h / s, w / s);
    let mut out = vec![0.0; rh * rw];
    for ry in 0..rh {
        for rx in 0..rw {
            let mut acc = 0.0;
            for y in ry * s..(ry + 1) * s {
                for x in rx * s..(rx + 1) * s {
                    let p = y * w + x;
                    for c in 0..3 {
                        acc += (img.data()[p * 3 + c] - recon.data()[p * 3 + c]).abs();
                    }
                }
            }
            out[ry * rw + rx] = acc / (s * s * 3) as f64;
        }
    }
    out
}

/// Token sequences for a corpus under one shared pad plan.
pub struct SeqCache {
    pub grids: Vec<CodeGrid>,
    pub sequences: Vec<TokenSequence>,
    pub pad_to: Vec<usize>,
}

pub fn build_seq_cache(
    model: &Stage1<f64>,
    images: &[Tensor<f64>],
    vocab: &Vocab,
    headroom: usize,
    labels: Option<&[usize]>,
) -> Result<SeqCache> {
    let geo = &model.geo;
    let grids: Vec<CodeGrid> = images
        .iter()
        .map(|img| model.infer_codes(img).map(|(g, _)| g))
        .collect::<Result<_>>()?;
    // headroom absorbs later grids with longer segments, but no valid
    // segment outgrows its full position map
    let pad_to: Vec<usize> = pad_plan(&grids, geo, headroom)
        .into_iter()
        .enumerate()
        .map(|(k, p)| p.min(geo.cells(k) + 2))
        .collect();
    let sequences: Vec<TokenSequence> = grids
        .iter()
        .enumerate()
        .map(|(i, grid)| {
            let seq = encode_sequence(grid, geo, vocab, &pad_to)?;
            match labels {
                Some(l) => make_conditional(&seq, l[i], vocab),
                None => Ok(seq),
            }
        })
        .collect::<Result<_>>()?;
    Ok(SeqCache {
        grids,
        sequences,
        pad_to,
    })
}

/// Trains a fresh prior on cached sequences.
pub fn run_stage2_training(
    cfg: &RunConfig,
    sequences: &[TokenSequence],
    toggles: EmbedToggles,
    steps: u64,
    mut metrics: Option<&mut MetricsWriter>,
    ckpt_path: Option<&Path>,
) -> Result<(Prior<f64>, Adam<f64>)> {
    let mut model = Prior::<f64>::new(cfg.prior_config()?, cfg.vocab()?, cfg.seed)?;
    model.toggles = toggles;
    let mut opt = Adam::new(&model.params, cfg.stage2.lr);
    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: loop {
        for chunk in epoch_batches(sequences.len(), cfg.stage2.batch, cfg.seed ^ 1, epoch) {
            if step >= steps {
                break 'outer;
            }
            opt.lr = warmup_lr(cfg.stage2.lr, step, cfg.optim.warmup);
            let batch: Vec<TokenSequence> =
                chunk.iter().map(|&i| sequences[i].clone()).collect();
            let losses = model.train_step(&mut opt, &batch, cfg.seed, step)?;
            step += 1;
            if step % cfg.optim.log_every == 0 {
                log::info!(
                    "stage2 step {step}: total {:.4} position {:.4} content {:.4}",
                    losses.total,
                    losses.position,
                    losses.content
                );
                if let Some(w) = metrics.as_deref_mut() {
                    w.write(&MetricsRecord {
                        step,
                        position_nll: Some(losses.position),
                        content_nll: Some(losses.content),
                        ..Default::default()
                    })?;
                }
            }
            if step % cfg.optim.checkpoint_every == 0 {
                if let Some(path) = ckpt_path {
                    checkpoint::save_prior(path, cfg, &model, Some(&opt), cfg.seed, step)?;
                }
            }
        }
        epoch += 1;
    }
    if let Some(path) = ckpt_path {
        checkpoint::save_prior(path, cfg, &model, Some(&opt), cfg.seed, step)?;
    }
    Ok((model, opt))
}

/// Exact corpus-mean losses, evaluated in bounded chunks with no dropout.
pub fn prior_eval_loss(
    model: &Prior<f64>,
    sequences: &[TokenSequence],
    chunk: usize,
) -> Result<PriorLosses> {
    let mut pos_sum = 0.0;
    let mut content_sum = 0.0;
    let (mut pos_n, mut content_n) = (0usize, 0usize);
    for batch in sequences.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let bound = bind(&model.params, &mut tape);
        let loss = model.stage2_loss(&mut tape, &bound, batch, None)?;
        let p = tape.value(loss.position).item();
        let c = tape.value(loss.content).item();
        pos_sum += p * loss.position_targets as f64;
        content_sum += c * loss.content_targets as f64;
        pos_n += loss.position_targets;
        content_n += loss.content_targets;
    }
    let position = pos_sum / pos_n as f64;
    let content = content_sum / content_n as f64;
    Ok(PriorLosses {
        total: position + content,
        position,
        content,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CodebookCfg, ImageCfg};
    use crate::data::synth_corpus;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.image = ImageCfg { h: 16, w: 16 };
        cfg.grains.factors = vec![2, 4];
        cfg.grains.ratios = vec![0.4, 0.6];
        cfg.codebook = CodebookCfg { entries: 16, dim: 4 };
        cfg.stage1.hidden = 8;
        cfg.stage1.batch = 4;
        cfg.stage2.d = 16;
        cfg.stage2.pos_depth = 1;
        cfg.stage2.content_depth = 1;
        cfg.stage2.heads = 2;
        cfg.stage2.batch = 4;
        cfg.optim.log_every = 10;
        cfg.optim.checkpoint_every = 50;
        cfg
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let batches = epoch_batches(10, 4, 3, 0);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 4, 3, 0), epoch_batches(10, 4, 3, 1));
        assert_eq!(epoch_batches(10, 4, 3, 5), epoch_batches(10, 4, 3, 5));
    }

    #[test]
    fn short_stage1_run_learns_and_evaluates() {
        let cfg = tiny_cfg();
        let corpus = synth_corpus(8, 16, 16, 4, 0.4, cfg.seed).unwrap();
        let (model, _) =
            run_stage1_training(&cfg, &corpus.images, None, 30, None, None).unwrap();
        let eval = eval_stage1(&model, &corpus.images, None).unwrap();
        assert_eq!(eval.assignments.len(), 8);
        assert_eq!(eval.per_region_l1[0].len(), 16);
        assert!((eval.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(eval.usage > 0.0);
        // forced all-coarsest must shorten every image to one code per region
        let forced = vec![vec![1usize; 16]; 8];
        let coarse = eval_stage1(&model, &corpus.images, Some(&forced)).unwrap();
        assert!(coarse.lengths.iter().all(|&l| l == 16));
    }

    #[test]
    fn seq_cache_feeds_the_prior() {
        let cfg = tiny_cfg();
        let corpus = synth_corpus(6, 16, 16, 4, 0.4, cfg.seed).unwrap();
        let (model, _) =
            run_stage1_training(&cfg, &corpus.images, None, 20, None, None).unwrap();
        let vocab = cfg.vocab().unwrap();
        let cache = build_seq_cache(&model, &corpus.images, &vocab, 4, None).unwrap();
        assert_eq!(cache.sequences.len(), 6);
        let cap: usize = cache.pad_to.iter().sum();
        assert!(cap <= cfg.max_seq_len().unwrap());
        for seq in &cache.sequences {
            assert_eq!(seq.len(), cap);
        }
        let (prior, _) =
            run_stage2_training(&cfg, &cache.sequences, EmbedToggles::default(), 12, None, None)
                .unwrap();
        let eval = prior_eval_loss(&prior, &cache.sequences, 3).unwrap();
        assert!(eval.total.is_finite());
        // chunked evaluation must match one-shot evaluation exactly
        let whole = prior_eval_loss(&prior, &cache.sequences, 64).unwrap();
        assert!((eval.total - whole.total).abs() < 1e-9);
    }
}
