#[test]
fn bench_breakdown() {
    use epifilter::cascade::{total_loss, CascadeConfig, CascadeModel, StageLossSpec};
    use epifilter::datagen::{generate_scene_pair, SceneConfig};
    use epifilter::loss::FnGuidance;
    use epifilter::cascade::coords_array;
    use std::time::Instant;

    let mut scfg = SceneConfig::with_seed(1);
    scfg.num_correspondences = 500;
    let pair = generate_scene_pair(&scfg).unwrap();
    let model = CascadeModel::build(CascadeConfig::desk_default(), 1).unwrap();
    let coords = coords_array(&pair.correspondences);
    let prior = vec![0.5; 500];
    let specs = vec![
        StageLossSpec::Guided(FnGuidance::new(3.0).unwrap()),
        StageLossSpec::Guided(FnGuidance::new(2.5).unwrap()),
        StageLossSpec::Guided(FnGuidance::new(2.0).unwrap()),
    ];
    // forward only
    let t0 = Instant::now();
    for _ in 0..20 {
        let _ = model.forward(&coords, &prior, true, None).unwrap();
    }
    println!("forward(train): {:.2} ms", t0.elapsed().as_secs_f64() * 50.0);
    let t0 = Instant::now();
    for _ in 0..20 {
        let _ = model.forward(&coords, &prior, false, None).unwrap();
    }
    println!("forward(eval): {:.2} ms", t0.elapsed().as_secs_f64() * 50.0);
    // forward + loss
    let t0 = Instant::now();
    for _ in 0..20 {
        let mut pass = model.forward(&coords, &prior, true, None).unwrap();
        let _ = total_loss(&mut pass, &pair.labels, &pair.correspondences, &pair.gt_e,
            &model.config, 1000, 500, &specs).unwrap();
    }
    println!("forward+loss: {:.2} ms", t0.elapsed().as_secs_f64() * 50.0);
    // full
    let t0 = Instant::now();
    for _ in 0..20 {
        let mut pass = model.forward(&coords, &prior, true, None).unwrap();
        let parts = total_loss(&mut pass, &pair.labels, &pair.correspondences, &pair.gt_e,
            &model.config, 1000, 500, &specs).unwrap();
        let grads = pass.graph.backward(parts.total).unwrap();
        let _ = grads;
    }
    println!("forward+loss+backward: {:.2} ms", t0.elapsed().as_secs_f64() * 50.0);
    // grads extraction
    let t0 = Instant::now();
    for _ in 0..20 {
        let mut pass = model.forward(&coords, &prior, true, None).unwrap();
        let parts = total_loss(&mut pass, &pair.labels, &pair.correspondences, &pair.gt_e,
            &model.config, 1000, 500, &specs).unwrap();
        let grads = pass.graph.backward(parts.total).unwrap();
        let arrays: Vec<_> = pass.graph.parameters().iter().map(|&id| grads.wrt_or_zeros(&pass.graph, id)).collect();
        let _ = arrays;
    }
    println!("full pair step: {:.2} ms", t0.elapsed().as_secs_f64() * 50.0);
}
