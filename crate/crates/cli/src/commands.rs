//! Subcommand bodies. Each writes a run manifest into the output directory
//! so a run can be traced back to its config, seed, and tree state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use graincode::{mix_seed, sample_batch, Error, GrainSpec, Result, SampleSettings, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{fineness, grain_counts, shuffled_assignment, spearman};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::fdsuite;
use crate::metrics::{write_manifest, MetricsWriter};
use crate::train::{
    build_seq_cache, eval_stage1, prior_eval_loss, run_stage1_training, run_stage2_training,
};

pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Loads the configured corpus: a directory of PNGs, a raw tensor file, or
/// a freshly synthesized set when `data.source` is "synth".
fn load_corpus(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.source == "synth" {
        let region = cfg.grains.factors.iter().copied().max().unwrap();
        return data::synth_corpus(
            cfg.data.images,
            cfg.image.h,
            cfg.image.w,
            region,
            cfg.data.busy_fraction,
            cfg.seed,
        );
    }
    let (ds, warnings) = data::ingest(Path::new(&cfg.data.source), cfg.image.h, cfg.image.w)?;
    if warnings > 0 {
        log::warn!("skipped {warnings} unreadable files during ingest");
    }
    Ok(ds)
}

pub fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    prepare_out(&args.out)?;
    let ds = load_corpus(&cfg)?;
    let dqtn_path = args.out.join("corpus.dqtn");
    data::export_dqtn(&ds, cfg.image.h, cfg.image.w, &dqtn_path)?;
    if let Some(busy) = &ds.busy {
        let json = serde_json::to_string(busy).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(args.out.join("masks.json"), json)?;
    }
    println!(
        "synthesized {} images ({}x{}) -> {}",
        ds.images.len(),
        cfg.image.h,
        cfg.image.w,
        dqtn_path.display()
    );
    write_manifest(&args.out, "synth", &cfg, cfg.seed, None)?;
    Ok(())
}

pub fn cmd_train_vae(args: &CommonArgs, steps: Option<u64>) -> Result<()> {
    let cfg = load_config(args)?;
    let steps = steps.unwrap_or(cfg.stage1.steps);
    prepare_out(&args.out)?;
    let ds = load_corpus(&cfg)?;
    let (train_set, test_set) = ds.split(cfg.data.test_fraction, cfg.seed);
    log::info!(
        "training stage 1 on {} images, holding out {}",
        train_set.images.len(),
        test_set.images.len()
    );
    let metrics_path = args.out.join("vae-metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let ckpt = args.out.join("vae.ckpt");
    let (model, _opt) = run_stage1_training(
        &cfg,
        &train_set.images,
        None,
        steps,
        Some(&mut writer),
        Some(&ckpt),
    )?;
    let eval_images = if test_set.images.is_empty() {
        &train_set.images
    } else {
        &test_set.images
    };
    let eval = eval_stage1(&model, eval_images, None)?;
    println!(
        "held-out recon L1 {:.4}, mean code length {:.1}, codebook usage {:.2}",
        eval.recon_l1, eval.mean_length, eval.usage
    );
    write_manifest(&args.out, "train-vae", &cfg, cfg.seed, Some(&metrics_path))?;
    Ok(())
}

pub fn cmd_train_prior(args: &CommonArgs, steps: Option<u64>) -> Result<()> {
    let cfg = load_config(args)?;
    let steps = steps.unwrap_or(cfg.stage2.steps);
    prepare_out(&args.out)?;
    let vae_path = args.out.join("vae.ckpt");
    let (vae, _, _) = checkpoint::load_stage1(&vae_path, &cfg)?;
    let ds = load_corpus(&cfg)?;
    let labels = if cfg.stage2.labels > 0 {
        Some(ds.labels(cfg.stage2.labels)?)
    } else {
        None
    };
    let vocab = cfg.vocab()?;
    let cache = build_seq_cache(
        &vae,
        &ds.images,
        &vocab,
        cfg.stage2.pad_headroom,
        labels.as_deref(),
    )?;
    let n_test = ((ds.images.len() as f64) * cfg.data.test_fraction).round() as usize;
    let n_test = n_test.min(cache.sequences.len().saturating_sub(1));
    let split = cache.sequences.len() - n_test;
    let (train_seqs, test_seqs) = cache.sequences.split_at(split);
    let metrics_path = args.out.join("prior-metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let ckpt = args.out.join("prior.ckpt");
    let (prior, _opt) = run_stage2_training(
        &cfg,
        train_seqs,
        Default::default(),
        steps,
        Some(&mut writer),
        Some(&ckpt),
    )?;
    if !test_seqs.is_empty() {
        let val = prior_eval_loss(&prior, test_seqs, cfg.stage2.batch)?;
        println!(
            "held-out nll: position {:.4}, content {:.4}, total {:.4}",
            val.position, val.content, val.total
        );
    }
    write_manifest(&args.out, "train-prior", &cfg, cfg.seed, Some(&metrics_path))?;
    Ok(())
}

/// Per-region scalar field rendered as a grayscale PNG at one pixel per
/// region cell, upsampled to image size.
fn save_region_map(path: &Path, values: &[f64], rh: usize, rw: usize, side: usize) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let h = rh * side;
    let w = rw * side;
    let mut data = vec![0.0f64; h * w * 3];
    for ry in 0..rh {
        for rx in 0..rw {
            let v = (values[ry * rw + rx] - lo) / span * 2.0 - 1.0;
            for dy in 0..side {
                for dx in 0..side {
                    let p = ((ry * side + dy) * w + (rx * side + dx)) * 3;
                    data[p] = v;
                    data[p + 1] = v;
                    data[p + 2] = v;
                }
            }
        }
    }
    data::save_png(path, h, w, &Tensor::new(vec![h * w, 3], data)?)
}

pub fn cmd_reconstruct(args: &CommonArgs, batch: usize) -> Result<()> {
    let cfg = load_config(args)?;
    prepare_out(&args.out)?;
    let (model, _, _) = checkpoint::load_stage1(&args.out.join("vae.ckpt"), &cfg)?;
    let ds = load_corpus(&cfg)?;
    let n = batch.min(ds.images.len());
    let images = &ds.images[..n];
    let geo = cfg.geometry()?;
    let (rh, rw) = (geo.regions_h(), geo.regions_w());
    let side = cfg.image.h / rh;
    let spec = cfg.grain_spec()?;

    let dynamic = eval_stage1(&model, images, None)?;
    let coarsest = vec![vec![0usize; geo.regions()]; n];
    let baseline = eval_stage1(&model, images, Some(&coarsest))?;

    let mut fineness_all = Vec::new();
    let mut err_all = Vec::new();
    for i in 0..n {
        data::save_png(
            &args.out.join(format!("input-{i:03}.png")),
            cfg.image.h,
            cfg.image.w,
            &images[i],
        )?;
        let (grid, _) = model.infer_codes(&images[i])?;
        let recon = model.decode_grid(&grid)?;
        data::save_png(
            &args.out.join(format!("recon-{i:03}.png")),
            cfg.image.h,
            cfg.image.w,
            &recon,
        )?;
        let fine: Vec<f64> = dynamic.assignments[i]
            .iter()
            .map(|&k| fineness(&spec, k))
            .collect();
        save_region_map(
            &args.out.join(format!("grains-{i:03}.png")),
            &fine,
            rh,
            rw,
            side,
        )?;
        save_region_map(
            &args.out.join(format!("error-{i:03}.png")),
            &baseline.per_region_l1[i],
            rh,
            rw,
            side,
        )?;
        fineness_all.extend(fine);
        err_all.extend(baseline.per_region_l1[i].iter().copied());
    }
    let corr = spearman(&err_all, &fineness_all);
    println!(
        "reconstructed {n} images: dynamic L1 {:.4}, coarse-only L1 {:.4}",
        dynamic.recon_l1, baseline.recon_l1
    );
    println!("rank correlation of assigned fineness vs coarse-only region error: {corr:.3}");
    if let Some(busy) = &ds.busy {
        let busy_flat: Vec<f64> = busy[..n]
            .iter()
            .flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        println!(
            "rank correlation of assigned fineness vs busy mask: {:.3}",
            spearman(&busy_flat, &fineness_all)
        );
    }
    write_manifest(&args.out, "reconstruct", &cfg, cfg.seed, None)?;
    Ok(())
}

pub fn cmd_stats(args: &CommonArgs, mode: Option<&str>) -> Result<()> {
    let cfg = load_config(args)?;
    let spec = cfg.grain_spec()?;
    let expected = spec.expected_code_length(cfg.image.h, cfg.image.w);
    prepare_out(&args.out)?;
    if mode == Some("expected") {
        println!("expected code length: {expected}");
        write_manifest(&args.out, "stats", &cfg, cfg.seed, None)?;
        return Ok(());
    }
    let (model, _, _) = checkpoint::load_stage1(&args.out.join("vae.ckpt"), &cfg)?;
    let ds = load_corpus(&cfg)?;
    let eval = eval_stage1(&model, &ds.images, None)?;
    println!("images: {}", ds.images.len());
    println!(
        "code length: mean {:.2}, variance {:.2}, expected {expected}",
        eval.mean_length, eval.var_length
    );
    for (k, r) in eval.ratios.iter().enumerate() {
        println!(
            "  grain {k} (factor {}): empirical {:.3}, target {:.3}",
            spec.factor(k),
            r,
            spec.ratios()[k]
        );
    }
    println!("codebook usage: {:.3}", eval.usage);
    write_manifest(&args.out, "stats", &cfg, cfg.seed, None)?;
    Ok(())
}

#[derive(Serialize)]
struct AblateReport {
    mode: String,
    seed: u64,
    results: BTreeMap<String, f64>,
}

fn write_report(out: &Path, report: &AblateReport) -> Result<()> {
    let json =
        serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    let path = out.join(format!("ablate-{}.json", report.mode));
    fs::write(&path, json)?;
    println!("report written to {}", path.display());
    Ok(())
}

/// Fixed single-grain baseline against the dynamic allocator, at equal
/// expected code length. Requires a config whose ratio-weighted length
/// lands exactly on one of the pure grains.
fn ablate_fixed_vs_dynamic(cfg: &RunConfig, out: &Path) -> Result<AblateReport> {
    let spec = cfg.grain_spec()?;
    let expected = spec.expected_code_length(cfg.image.h, cfg.image.w);
    let fixed_factor = spec
        .factors()
        .iter()
        .copied()
        .find(|&f| {
            GrainSpec::fixed(f, spec.lambda)
                .map(|s| (s.expected_code_length(cfg.image.h, cfg.image.w) - expected).abs() < 1e-6)
                .unwrap_or(false)
        })
        .ok_or_else(|| {
            Error::Config(format!(
                "no single grain matches the expected code length {expected}; \
                 pick ratios whose weighted length equals one factor's length"
            ))
        })?;
    let ds = load_corpus(cfg)?;
    let (train_set, test_set) = ds.split(cfg.data.test_fraction, cfg.seed);

    let (dyn_model, _) =
        run_stage1_training(cfg, &train_set.images, None, cfg.stage1.steps, None, None)?;
    let dyn_eval = eval_stage1(&dyn_model, &test_set.images, None)?;

    let mut fixed_cfg = cfg.clone();
    fixed_cfg.grains.factors = vec![fixed_factor];
    fixed_cfg.grains.ratios = vec![1.0];
    let (fix_model, _) =
        run_stage1_training(&fixed_cfg, &train_set.images, None, cfg.stage1.steps, None, None)?;
    let fix_eval = eval_stage1(&fix_model, &test_set.images, None)?;

    println!(
        "matched expected length {expected}: dynamic L1 {:.4}, fixed f={fixed_factor} L1 {:.4}",
        dyn_eval.recon_l1, fix_eval.recon_l1
    );
    let mut results = BTreeMap::new();
    results.insert("expected_length".into(), expected);
    results.insert("fixed_factor".into(), fixed_factor as f64);
    results.insert("dynamic_l1".into(), dyn_eval.recon_l1);
    results.insert("fixed_l1".into(), fix_eval.recon_l1);
    results.insert("dynamic_mean_length".into(), dyn_eval.mean_length);
    results.insert("fixed_mean_length".into(), fix_eval.mean_length);
    let report = AblateReport {
        mode: "fixed-vs-dynamic".into(),
        seed: cfg.seed,
        results,
    };
    write_report(out, &report)?;
    Ok(report)
}

/// Same per-image grain counts, shuffled placement. Isolates whether the
/// allocator puts fine grains where they help or only spends the budget.
fn ablate_random_assignment(cfg: &RunConfig, out: &Path) -> Result<AblateReport> {
    let spec = cfg.grain_spec()?;
    let ds = load_corpus(cfg)?;
    let (train_set, test_set) = ds.split(cfg.data.test_fraction, cfg.seed);

    let (adaptive, _) =
        run_stage1_training(cfg, &train_set.images, None, cfg.stage1.steps, None, None)?;
    let shuffle = |images: &[Tensor<f64>], offset: usize| -> Result<Vec<Vec<usize>>> {
        let eval = eval_stage1(&adaptive, images, None)?;
        Ok(eval
            .assignments
            .iter()
            .enumerate()
            .map(|(i, a)| {
                shuffled_assignment(&grain_counts(a, spec.k_g()), cfg.seed, (offset + i) as u64)
            })
            .collect())
    };
    let train_forced = shuffle(&train_set.images, 0)?;
    let test_forced = shuffle(&test_set.images, train_set.images.len())?;

    let (random, _) = run_stage1_training(
        cfg,
        &train_set.images,
        Some(&train_forced),
        cfg.stage1.steps,
        None,
        None,
    )?;
    let adaptive_eval = eval_stage1(&adaptive, &test_set.images, None)?;
    let random_eval = eval_stage1(&random, &test_set.images, Some(&test_forced))?;
    println!(
        "identical per-image grain counts: adaptive L1 {:.4}, shuffled L1 {:.4}",
        adaptive_eval.recon_l1, random_eval.recon_l1
    );
    let mut results = BTreeMap::new();
    results.insert("adaptive_l1".into(), adaptive_eval.recon_l1);
    results.insert("random_l1".into(), random_eval.recon_l1);
    results.insert("adaptive_mean_length".into(), adaptive_eval.mean_length);
    results.insert("random_mean_length".into(), random_eval.mean_length);
    let report = AblateReport {
        mode: "random-assignment".into(),
        seed: cfg.seed,
        results,
    };
    write_report(out, &report)?;
    Ok(report)
}

/// Trains the prior with each embedding input removed in turn (plus a
/// shared-position-table variant) and reports held-out loss per config.
fn ablate_input_layers(cfg: &RunConfig, out: &Path) -> Result<AblateReport> {
    use graincode::EmbedToggles;
    let ds = load_corpus(cfg)?;
    let (vae, _) = run_stage1_training(cfg, &ds.images, None, cfg.stage1.steps, None, None)?;
    let vocab = cfg.vocab()?;
    let cache = build_seq_cache(&vae, &ds.images, &vocab, cfg.stage2.pad_headroom, None)?;
    let n_test = ((cache.sequences.len() as f64) * cfg.data.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, cache.sequences.len() - 1);
    let split = cache.sequences.len() - n_test;
    let (train_seqs, test_seqs) = cache.sequences.split_at(split);

    let variants: Vec<(&str, EmbedToggles)> = vec![
        ("full", EmbedToggles::default()),
        (
            "shared_position",
            EmbedToggles {
                shared_position: true,
                ..Default::default()
            },
        ),
        (
            "no_grain",
            EmbedToggles {
                grain: false,
                ..Default::default()
            },
        ),
        (
            "no_absolute",
            EmbedToggles {
                absolute: false,
                ..Default::default()
            },
        ),
    ];
    let mut results = BTreeMap::new();
    for (name, toggles) in variants {
        let (prior, _) =
            run_stage2_training(cfg, train_seqs, toggles, cfg.stage2.steps, None, None)?;
        let val = prior_eval_loss(&prior, test_seqs, cfg.stage2.batch)?;
        println!("input layers [{name}]: held-out total nll {:.4}", val.total);
        results.insert(name.to_string(), val.total);
    }
    let report = AblateReport {
        mode: "input-layers".into(),
        seed: cfg.seed,
        results,
    };
    write_report(out, &report)?;
    Ok(report)
}

pub fn cmd_ablate(args: &CommonArgs, mode: &str) -> Result<()> {
    let cfg = load_config(args)?;
    prepare_out(&args.out)?;
    match mode {
        "fixed-vs-dynamic" => ablate_fixed_vs_dynamic(&cfg, &args.out)?,
        "random-assignment" => ablate_random_assignment(&cfg, &args.out)?,
        "input-layers" => ablate_input_layers(&cfg, &args.out)?,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation mode '{other}' \
                 (expected fixed-vs-dynamic, random-assignment, or input-layers)"
            )))
        }
    };
    write_manifest(&args.out, "ablate", &cfg, cfg.seed, None)?;
    Ok(())
}

#[derive(Serialize)]
struct SampleDump {
    label: Option<usize>,
    lengths: Vec<usize>,
    mean_length: f64,
    sequences: Vec<SampleSeq>,
}

#[derive(Serialize)]
struct SampleSeq {
    content: Vec<usize>,
    position: Vec<usize>,
}

pub fn cmd_sample(args: &CommonArgs, batch: usize, label: Option<usize>) -> Result<()> {
    let cfg = load_config(args)?;
    prepare_out(&args.out)?;
    let (vae, _, _) = checkpoint::load_stage1(&args.out.join("vae.ckpt"), &cfg)?;
    let (prior, _, _) = checkpoint::load_prior(&args.out.join("prior.ckpt"), &cfg)?;
    if let Some(l) = label {
        if l >= cfg.stage2.labels {
            return Err(Error::Config(format!(
                "label {l} out of range; prior trained with {} labels",
                cfg.stage2.labels
            )));
        }
    }
    let geo = cfg.geometry()?;
    let labels: Option<Vec<usize>> = label.map(|l| vec![l; batch]);
    let settings = SampleSettings {
        temperature: 1.0,
        top_k: 0,
        top_p: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5a3));
    let out = sample_batch(
        &prior,
        &geo,
        &prior.vocab,
        batch,
        labels.as_deref(),
        &settings,
        &mut rng,
    )?;
    let mut lengths = Vec::with_capacity(batch);
    for (i, grid) in out.grids.iter().enumerate() {
        let img = vae.decode_grid(grid)?;
        data::save_png(
            &args.out.join(format!("sample-{i:03}.png")),
            cfg.image.h,
            cfg.image.w,
            &img,
        )?;
        lengths.push(geo.dynamic_length(&grid.assignments)?);
    }
    let mean_length = lengths.iter().sum::<usize>() as f64 / lengths.len().max(1) as f64;
    let dump = SampleDump {
        label,
        lengths: lengths.clone(),
        mean_length,
        sequences: out
            .sequences
            .iter()
            .map(|s| SampleSeq {
                content: s.content.clone(),
                position: s.position.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&dump).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(args.out.join("samples.json"), json)?;
    println!("sampled {batch} images, mean code length {mean_length:.1}");
    write_manifest(&args.out, "sample", &cfg, cfg.seed, None)?;
    Ok(())
}

pub fn cmd_gradcheck(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    prepare_out(&args.out)?;
    let tol = 1e-4;
    let mut failed = 0;
    for entry in fdsuite::gradient_suite()? {
        let ok = entry.report.passes(tol);
        println!(
            "{:<30} max rel err {:.3e}  {}",
            entry.name,
            entry.report.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed += 1;
        }
    }
    write_manifest(&args.out, "gradcheck", &cfg, cfg.seed, None)?;
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} gradient checks exceeded rel err {tol}"
        )));
    }
    Ok(())
}
