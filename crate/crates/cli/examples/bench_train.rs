// scratch benchmark, not part of the repo
use lrd_core::datagen::*;
use lrd_core::dynsys::*;
use lrd_core::student::*;
use lrd_core::targets::*;
use std::time::Instant;

fn main() {
    let params = SystemParams { k: 40, ..Default::default() };
    let config = GenerationConfig {
        num_members: 6,
        seed: 1,
        duration_years: 3.0,
        spinup_years: 1.0,
        ..Default::default()
    };
    let t0 = Instant::now();
    let trajs = generate_ensemble_members(&config, &params).unwrap();
    println!("gen 6 members x 2y (K=40,J=4,dt=0.005): {:?}", t0.elapsed());
    let per_year = t0.elapsed().as_secs_f64() / 12.0;
    println!("  => {:.1} s per 100 sim-years, {:.0} s per 10k years", per_year * 100.0, per_year * 10000.0);

    let day_len = 0.2;
    let pool = SamplePool::new(trajs, LeadSpec::medium_range(), 4, day_len).unwrap();
    for (w, d, batch) in [(32usize, 2usize, 64usize), (24, 3, 64), (32, 2, 32), (48, 2, 64)] {
        let arch = Arch::student(40, w, d, 5);
        let tc = TrainConfig { steps: 20, batch_size: batch, val_every: 100, max_val_samples: 8, seed: 3, ..Default::default() };
        let t1 = Instant::now();
        let r = train(arch, &pool, &pool, &tc).unwrap();
        let dt = t1.elapsed().as_secs_f64() / 20.0;
        println!("w={w} d={d} batch={batch}: {:.3} s/step -> 3000 steps = {:.1} min (val {:.4})", dt, dt * 3000.0 / 60.0, r.best_val_loss);
    }

    // sampling throughput
    let arch = Arch::student(40, 32, 2, 5);
    let p = NetParams::init(arch, 1, false).unwrap();
    let spec = SigmaSpec::default();
    let cond = vec![0.0; 160];
    let den = lrd_core::sampler::GuidedStudent { params: &p, conditioning: &cond, phase: (0.0, 1.0), sigma_spec: spec, weight: 1.0 };
    let sc = lrd_core::sampler::SamplerConfig::default();
    let t2 = Instant::now();
    let n = 200;
    for i in 0..n {
        let mut rng = lrd_core::rng::stream_rng(5, 0x99, i);
        let _ = lrd_core::sampler::heun_solve(&den, &sc, &mut rng).unwrap();
    }
    let per = t2.elapsed().as_secs_f64() / n as f64;
    println!("heun w=1 (18 steps, w32d2): {:.4} s/member => 400 dates x E32 = {:.1} min single-thread", per, per * 400.0 * 32.0 / 60.0);
}
