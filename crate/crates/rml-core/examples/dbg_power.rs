use rml_core::twosample::*;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2024);
    let spec = TestSpec {
        dim: 5,
        n_per_sample: 200,
        null_simulations: 500,
        level: 0.05,
        separations: vec![0.0, 0.02, 0.05, 0.1, 0.15, 0.2],
        replications: 200,
    };
    let t = std::time::Instant::now();
    let study = power_study(&spec, seed, 1).unwrap();
    for r in &study.rows {
        println!("sep {:.2}  {:<13} power {:.3}  crit {:.5}", r.separation, r.family.name(), r.power, r.critical_value);
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
}
