// scratch pilot, not part of the repo
use lrd_cli::commands;
use lrd_cli::config::ExperimentConfig;
use lrd_core::targets::LeadLabel;
use std::time::Instant;

fn main() {
    let mut c = ExperimentConfig::default();
    c.experiment.id = "pilot".into();
    c.experiment.seed = 1234;
    c.experiment.out_dir = "/tmp/pilot/out".into();
    c.teacher.k = 32;
    c.teacher.j = 1;
    c.teacher.dt = 0.01;
    c.generation.seed = 1234;
    c.generation.num_members = 40;
    c.generation.duration_years = 27.0;
    c.generation.spinup_years = 2.0;
    c.training.width = 32;
    c.training.depth = 2;
    c.training.kernel = 5;
    c.training.steps = 3000;
    c.training.lr = 1e-3;
    c.training.val_every = 100;
    c.training.max_val_samples = 256;
    c.perturbation.mode = "tune".into();
    c.calibration.eval_dates = 128;
    c.calibration.ensemble_size = 16;
    c.evaluation.n_boot = 500;

    let t0 = Instant::now();
    if !c.corpus_dir().join("manifest.json").exists() {
        let sum = commands::cmd_generate(&c).unwrap();
        println!("[{:?}] generated {} members, std={:.3}", t0.elapsed(), sum.members, sum.normalizer_std);
    }
    if !c.experiment.out_dir.join("model_medium.lrkp").exists() {
        let t1 = Instant::now();
        let ts = commands::cmd_train(&c, LeadLabel::Medium).unwrap();
        println!("[{:?}] medium model: best val {:.4} at {}", t1.elapsed(), ts.best_val_loss, ts.best_step);
    }
    let t2 = Instant::now();
    let cal = commands::cmd_calibrate(&c).unwrap();
    println!("[{:?}] calibration (amplitude {:.4}):", t2.elapsed(), cal.amplitude);
    println!("clim spread {:.4}, prob clim crps {:.4}, det clim crps {:.4}", cal.climatological_spread, cal.prob_clim_crps, cal.det_clim_crps);
    for p in &cal.sweep {
        println!("  w={:>4.2} spread={:.4} rmse={:.4} crps={:.4} ss={:.3}", p.weight, p.spread, p.rmse, p.crps, p.spread_skill);
    }
}
