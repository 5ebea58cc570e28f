// temporary probe for the training criterion
use specfuse::cube::{Cube, MultiResCube};
use specfuse::learn::*;
use specfuse::metrics::{rmse, sam};
use specfuse::simulate::*;
use std::time::Instant;

fn make_pairs(n: usize, seed0: u64, noise: f64) -> Vec<(MultiResCube<f64>, Cube<f64>)> {
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                width: 24, height: 24, bands_h: 32, bands_m: 6,
                n_sources: 5, seed: seed0 + i as u64, noise_sigma: noise,
            };
            let p = simulate_pair(&spec, 0.8).unwrap();
            (p.y_s, p.y_h)
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);

    let t0 = Instant::now();
    let train_set = make_pairs(64, 100, 0.0);
    let val_set = make_pairs(8, 900, 0.0);
    let held_out = make_pairs(8, 5000, 0.0);
    println!("data gen: {:.1}s", t0.elapsed().as_secs_f64());

    let rho_init: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let chunk: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);
    let wl = default_hsi_wavelengths(32);

    let score = |model: &specfuse::learn::Model| -> (f64, f64, f64, f64) {
        let mut sm = 0.0; let mut sb = 0.0; let mut rm = 0.0; let mut rb = 0.0;
        for (ys, gt) in &held_out {
            let (_, y_star) = model.forward(ys).unwrap();
            let baseline = spectral_upsample_init(ys, &wl).unwrap();
            sm += sam(&y_star, gt).unwrap().0;
            sb += sam(&baseline, gt).unwrap().0;
            rm += rmse(&y_star, gt).unwrap();
            rb += rmse(&baseline, gt).unwrap();
        }
        let n = held_out.len() as f64;
        (sm / n, sb / n, rm / n, rb / n)
    };

    // train in chunks, re-seeding deterministically is NOT possible across
    // chunks, so emulate longer runs by one config per chunk boundary
    let mut done = 0usize;
    while done < epochs {
        let e = (done + chunk).min(epochs);
        let mut cfg = TrainConfig::desk_default(wl.clone());
        cfg.epochs = e;
        cfg.batch_size = batch;
        cfg.base_lr = lr;
        cfg.seed = 7;
        cfg.pipeline.rho_init = rho_init;
        let t0 = Instant::now();
        let result = train(&train_set, &val_set, &cfg).unwrap();
        let (sm, sb, rm, rb) = score(&result.model);
        println!(
            "epochs={e}: {:.0}s loss {:.5} val {:.5} | SAM {:.3} vs {:.3} ({:+.1}%) RMSE {:.5} vs {:.5} ({:+.1}%)",
            t0.elapsed().as_secs_f64(),
            result.log.last().unwrap().train_loss,
            result.log.last().unwrap().val_loss,
            sm, sb, 100.0 * (1.0 - sm / sb),
            rm, rb, 100.0 * (1.0 - rm / rb)
        );
        done = e;
    }
}
