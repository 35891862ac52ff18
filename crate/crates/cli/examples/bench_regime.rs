// scratch probe, not part of the repo
use lrd_core::datagen::*;
use lrd_core::dynsys::*;

fn main() {
    for (k, j, dt) in [(32usize, 1usize, 0.01f64), (32, 2, 0.01), (40, 4, 0.005)] {
        let params = SystemParams { k, j, dt, ..Default::default() };
        let config = GenerationConfig {
            num_members: 1, seed: 7, duration_years: 12.0, spinup_years: 2.0, ..Default::default()
        };
        let nature = run_nature(0, &config, &params).unwrap();
        let frames = &nature.traj;
        let n = frames.num_frames();
        let all: Vec<f64> = frames.frames.clone();
        let maxabs = all.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;

        // seasonal cycle amplitude: mean by doy
        let mut doy_mean = vec![0.0; 360];
        let mut doy_count = vec![0usize; 360];
        for f in 0..n {
            let doy = nature.traj.day_of_year(f, &params);
            let fr = frames.frame(f);
            doy_mean[doy] += fr.iter().sum::<f64>() / k as f64;
            doy_count[doy] += 1;
        }
        for d in 0..360 { doy_mean[d] /= doy_count[d].max(1) as f64; }
        let smin = doy_mean.iter().cloned().fold(f64::INFINITY, f64::min);
        let smax = doy_mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        // chaos: tiny perturbation doubling time & day-7 error vs climatological sd
        let mut s0 = nature.day_end_states[100].clone();
        let e0 = 1e-4;
        s0.x[0] += e0;
        let f7 = teacher_forecast_frames(&s0, 7, &params).unwrap();
        let truth7 = frames.frame(101 + 6); // day offset 7 = frame 107? careful: forecast day d -> frame 100+d
        let mut err7 = 0.0;
        for (a, b) in f7[(6 * k)..].iter().zip(frames.frame(107)) { err7 += (a - b) * (a - b); }
        let _ = truth7;
        let err7 = (err7 / k as f64).sqrt();
        // day-1 error
        let mut err1 = 0.0;
        for (a, b) in f7[..k].iter().zip(frames.frame(101)) { err1 += (a - b) * (a - b); }
        let err1 = (err1 / k as f64).sqrt();

        println!("K={k} J={j} dt={dt}: max|X|={maxabs:.1} std={:.2} seasonal doy-mean range [{smin:.2},{smax:.2}] err(1e-4 pert): day1={err1:.2e} day7={err7:.3} (sd={:.2})", var.sqrt(), var.sqrt());
    }
}
