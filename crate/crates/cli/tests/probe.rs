use std::path::Path;

use graincode_cli::RunConfig;
use graincode_cli::{checkpoint, data::synth_corpus, train::eval_stage1};

#[test]
#[ignore]
fn region_differential() {
    let cfg = RunConfig::load(Path::new("/tmp/c6.toml")).unwrap();
    let region = *cfg.grains.factors.iter().max().unwrap();
    let ds = synth_corpus(
        cfg.data.images,
        cfg.image.h,
        cfg.image.w,
        region,
        cfg.data.busy_fraction,
        cfg.seed,
    )
    .unwrap();
    let (model, _, _) =
        checkpoint::load_stage1(Path::new("/tmp/c6run/vae.ckpt"), &cfg).unwrap();

    let n = ds.images.len();
    let regions = (cfg.image.h / region) * (cfg.image.w / region);
    let coarse = vec![vec![1usize; regions]; n];
    let fine = vec![vec![0usize; regions]; n];
    let dyn_eval = eval_stage1(&model, &ds.images, None).unwrap();

    let per_region = |forced: &[Vec<usize>]| -> Vec<Vec<f64>> {
        let ev = eval_stage1(&model, &ds.images, Some(forced)).unwrap();
        ev.per_region_l1
    };
    let coarse_err = per_region(&coarse);
    let fine_err = per_region(&fine);
    let busy = ds.busy.as_ref().unwrap();

    let mut stats = [[0.0f64; 4]; 2]; // [smooth,busy] x [coarse,fine,diff,fine_rate]
    let mut counts = [0.0f64; 2];
    for i in 0..n {
        for r in 0..regions {
            let b = busy[i][r] as usize;
            counts[b] += 1.0;
            stats[b][0] += coarse_err[i][r];
            stats[b][1] += fine_err[i][r];
            stats[b][2] += coarse_err[i][r] - fine_err[i][r];
            stats[b][3] += (dyn_eval.assignments[i][r] == 0) as usize as f64;
        }
    }
    for (label, row, c) in [("smooth", stats[0], counts[0]), ("busy", stats[1], counts[1])] {
        println!(
            "{label}: coarse L1 {:.4}, fine L1 {:.4}, differential {:.4}, fine rate {:.3} (n={c})",
            row[0] / c,
            row[1] / c,
            row[2] / c,
            row[3] / c
        );
    }
}
