//! Scratch calibration runs (not part of the deliverable test suite).

use rbpdip_core::autodiff::RmsProp;
use rbpdip_core::mbir::mbir_reconstruct;
use rbpdip_core::metrics::snr_db;
use rbpdip_core::projection::forward_project;
use rbpdip_core::rbpdip::{reconstruct, RbpConfig, ReconMode};
use rbpdip_core::simulate::shepp_logan;
use rbpdip_core::ParallelGeometry;

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let n = 64usize;
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let views = envf("RBP_VIEWS", 30.0) as usize;
    let span = envf("RBP_SPAN", 180.0);
    let truth = shepp_logan(n, n).unwrap();
    let geom = ParallelGeometry::uniform_spaced(views, span, n, n, 0.5).unwrap();
    let sino = forward_project(&truth, &geom).unwrap();

    let (mb, _) = mbir_reconstruct(&sino, &geom, 1500, 1e-6).unwrap();
    println!("mbir: {:6.2} dB", snr_db(&mb, &truth).unwrap());

    let optimizer =
        RmsProp::new(envf("RBP_RHO", 0.99), 1e-8, envf("RBP_LR", 1e-4), 0.9, 1000).unwrap();
    let config = RbpConfig {
        max_iters: iters,
        beta_max: envf("RBP_BETAMAX", 1e-3),
        n_c: envf("RBP_NC", 4.0),
        n_s: envf("RBP_NS", 1000.0),
        huber_delta: envf("RBP_DELTA", 1.0),
        optimizer: optimizer.clone(),
        ..RbpConfig::default()
    };
    for mode in [ReconMode::RbpDip, ReconMode::DipFixed] {
        if mode == ReconMode::DipFixed && envf("RBP_SKIPDIP", 0.0) > 0.0 {
            continue;
        }
        let config = RbpConfig { mode, ..config.clone() };
        let t0 = std::time::Instant::now();
        match reconstruct(&sino, &geom, &config, Some(&truth)) {
            Ok((img, run)) => {
                print!("{mode:?}: {:6.2} dB [{:?}] traj:", snr_db(&img, &truth).unwrap(), t0.elapsed());
                for k in (0..iters).step_by((iters / 8).max(1)) {
                    print!(" {:.1}", run.records[k].snr_db.unwrap());
                }
                println!();
            }
            Err(e) => println!("{mode:?}: FAILED {e}"),
        }
    }
}
