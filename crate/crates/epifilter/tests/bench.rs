#[test]
fn bench_desk_scale_step() {
    use epifilter::cascade::CascadeConfig;
    use epifilter::datagen::{generate_dataset, SceneConfig};
    use epifilter::prior::fit_ratio_densities;
    use epifilter::trainer::{TrainConfig, TrainSession};
    use std::time::Instant;

    let mut scfg = SceneConfig::with_seed(1);
    scfg.num_correspondences = 500;
    let dataset = generate_dataset(&scfg, 40).unwrap();
    let mut ratios = Vec::new();
    let mut labels = Vec::new();
    for p in &dataset.pairs {
        ratios.extend_from_slice(&p.lowe_ratios);
        labels.extend_from_slice(&p.labels);
    }
    let prior = fit_ratio_densities(&ratios, &labels, 50).unwrap();
    let tcfg = TrainConfig {
        batch_size: 16,
        total_iterations: 10,
        eta3_warmup_iterations: 5,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut session = TrainSession::new(tcfg, CascadeConfig::desk_default(), &dataset, &prior).unwrap();
    // Warm up one step, then time.
    session.step().unwrap();
    let t0 = Instant::now();
    for _ in 0..5 {
        session.step().unwrap();
    }
    let per_iter = t0.elapsed().as_secs_f64() / 5.0;
    println!("seconds per iteration: {per_iter:.3}");
    println!("projected 5000 iterations: {:.1} min", per_iter * 5000.0 / 60.0);
    let t1 = Instant::now();
    session.validate().unwrap();
    println!("validation pass: {:.3} s", t1.elapsed().as_secs_f64());
}
