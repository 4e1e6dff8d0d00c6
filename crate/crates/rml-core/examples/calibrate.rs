// scratch calibration probe; removed before release
use rml_core::sem::{efficiency_study, SemMethod, SemOptions, SemSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let reps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2024);
    let iters: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let spec = SemSpec::zero(2);
    let opts = SemOptions {
        max_iterations: iters,
        ..SemOptions::default()
    };
    {
        use rml_core::rng::derive_rng;
        use rml_core::sem::{estimate_engression, estimate_mle, estimate_rml, sem_sample};
        let mut rng = derive_rng(seed, &[99]);
        let data = sem_sample(&spec, n, &mut rng);
        let t = std::time::Instant::now();
        estimate_engression(&data, &opts, &mut rng).unwrap();
        println!("one engression: {:.2}s", t.elapsed().as_secs_f64());
        let t = std::time::Instant::now();
        estimate_rml(&data, &opts, &mut rng).unwrap();
        println!("one rml: {:.2}s", t.elapsed().as_secs_f64());
        let t = std::time::Instant::now();
        estimate_mle(&data).unwrap();
        println!("one mle: {:.4}s", t.elapsed().as_secs_f64());
    }
    let t0 = std::time::Instant::now();
    let report = efficiency_study(&spec, &[n], reps, &opts, seed, 1).unwrap();
    for m in SemMethod::ALL {
        let s = report.summary(m, n);
        println!(
            "{}: n*Var = {:.4}  bias^2 = {:.6}  nonconv = {}",
            m.name(),
            n as f64 * s.variance_sum,
            s.bias_sq_sum,
            s.non_converged
        );
    }
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
}
