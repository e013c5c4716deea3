use epifilter::cascade::CascadeConfig;
use epifilter::datagen::{generate_dataset, SceneConfig, Dataset};
use epifilter::metrics::{run_comparison, Method, PostProcess};
use epifilter::prior::{fit_ratio_densities, RatioDensityModel};
use epifilter::trainer::{LossMode, TrainConfig, TrainSession, ValMetrics};

fn setup(pairs: usize, n: usize, noise: f64, lo: f64, hi: f64, seed: u64) -> (Dataset, RatioDensityModel) {
    let mut cfg = SceneConfig::with_seed(seed);
    cfg.num_correspondences = n;
    cfg.noise_std_px = noise;
    cfg.outlier_ratio_min = lo;
    cfg.outlier_ratio_max = hi;
    let dataset = generate_dataset(&cfg, pairs).unwrap();
    let mut ratios = Vec::new();
    let mut labels = Vec::new();
    for p in &dataset.pairs {
        ratios.extend_from_slice(&p.lowe_ratios);
        labels.extend_from_slice(&p.labels);
    }
    let prior = fit_ratio_densities(&ratios, &labels, 50).unwrap();
    (dataset, prior)
}

fn train_once(dataset: &Dataset, prior: &RatioDensityModel, ccfg: CascadeConfig,
              loss: LossMode, iters: usize, seed: u64) -> (TrainSession, ValMetrics) {
    let tcfg = TrainConfig {
        batch_size: 8,
        total_iterations: iters,
        eta3_warmup_iterations: iters * 6 / 10,
        seed,
        val_every: 250,
        loss,
        ..TrainConfig::default()
    };
    let mut session = TrainSession::new(tcfg, ccfg, dataset, prior).unwrap();
    let v = session.run(|_| {}).unwrap();
    (session, v)
}

#[test]
fn pilot_extreme_imbalance() {
    let single = CascadeConfig {
        trunk_depth: 4, refine_depth: 1, channels: 16, groups: 4, reduction: 4,
        cascade: false, ..CascadeConfig::desk_default()
    };
    let (dataset, prior) = setup(256, 300, 1.0, 0.85, 0.92, 77);
    for seed in [1u64, 2] {
        let (_, g2) = train_once(&dataset, &prior, single.clone(), LossMode::Guided, 1000, seed);
        let (_, ib) = train_once(&dataset, &prior, single.clone(), LossMode::IbCe, 1000, seed);
        println!("seed {seed}: guidedF2 P {:.3} R {:.3} F2 {:.3} | ibce P {:.3} R {:.3} F2 {:.3} | diff {:+.4}",
            g2.precision, g2.recall, g2.f2, ib.precision, ib.recall, ib.f2, g2.f2 - ib.f2);
    }
}

#[test]
fn pilot_cascade_vs_single2() {
    let cascade = CascadeConfig {
        trunk_depth: 4, refine_depth: 2, channels: 16, groups: 4, reduction: 4,
        cascade: true, ..CascadeConfig::desk_default()
    };
    let single = CascadeConfig { cascade: false, ..cascade.clone() };
    let (dataset, prior) = setup(256, 200, 0.5, 0.5, 0.9, 88);
    let (test_set, _) = setup(48, 200, 0.5, 0.5, 0.9, 880);
    for seed in [1u64, 2] {
        let (cas_sess, cv) = train_once(&dataset, &prior, cascade.clone(), LossMode::Guided, 800, seed);
        let (sin_sess, sv) = train_once(&dataset, &prior, single.clone(), LossMode::Guided, 800, seed);
        let rc = run_comparison(&test_set, &prior, Some(&cas_sess.model), &[Method::Learned], &[PostProcess::WeightedEightPoint], 7).unwrap();
        let rs = run_comparison(&test_set, &prior, Some(&sin_sess.model), &[Method::Learned], &[PostProcess::WeightedEightPoint], 7).unwrap();
        let mc = rc.row(Method::Learned, PostProcess::WeightedEightPoint).unwrap();
        let ms = rs.row(Method::Learned, PostProcess::WeightedEightPoint).unwrap();
        println!("seed {seed}: cascade mAP5 {:.2} mAP10 {:.2} valF2 {:.3} | single mAP5 {:.2} mAP10 {:.2} valF2 {:.3}",
            mc.map5, mc.map10, cv.f2, ms.map5, ms.map10, sv.f2);
    }
}
