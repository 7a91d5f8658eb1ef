use cdsl_lab::labeler::{build_centroids, knn_assign, pseudo_label, select_top_confident, select_top_similar, LabelMethod};
use cdsl_lab::protocol::{
    ablate, compute_metrics, evaluate_row, prepare_domains, run_cdsl, run_stationary, AblationVariant, ModelShape,
    RunConfig,
};
use cdsl_lab::synthdata::{DomainSpec, GeneratorKind};

fn tiny() -> RunConfig {
    RunConfig {
        epochs: 2,
        steps_per_epoch: 3,
        batch_size: 16,
        replay_n: 4,
        model: ModelShape { hidden: vec![8], bottleneck: Some([8, 4]) },
        ..RunConfig::default()
    }
}

fn blob(name: &str, rotation_deg: f64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        kind: GeneratorKind::GaussMix,
        rotation_deg,
        translation: [0.5, 0.5],
        noise_sigma: 0.5,
        classes: 2,
        samples: 120,
    }
}

#[test]
fn single_domain_gives_one_by_one_matrix() {
    let cfg = RunConfig { domains: Some(vec![blob("only", 0.0)]), ..tiny() };
    let out = run_cdsl(&cfg).unwrap();
    assert_eq!(out.matrix.rows.len(), 1);
    assert_eq!(out.matrix.rows[0].len(), 1);
    assert_eq!(out.metrics.tdg, vec![None]);
    assert_eq!(out.metrics.fa, vec![None]);
    assert_eq!(out.metrics.tda, vec![out.matrix.get(0, 0)]);
    assert_eq!(out.metrics.avg_tdg, None);
    assert_eq!(out.snapshots, 1);
}

#[test]
fn zero_epochs_reproduce_untrained_row() {
    let cfg = RunConfig { epochs: 0, untrained_row: true, ..tiny() };
    let out = run_cdsl(&cfg).unwrap();
    let untrained = out.untrained.unwrap();
    assert_eq!(out.matrix.rows.len(), 5);
    for row in &out.matrix.rows {
        assert_eq!(row, &untrained);
    }
    assert!(out.log.is_empty());
}

#[test]
fn same_seed_same_bits() {
    let a = run_cdsl(&tiny()).unwrap();
    let b = run_cdsl(&tiny()).unwrap();
    let bits = |m: &cdsl_lab::protocol::AccuracyMatrix| -> Vec<u64> { m.rows.iter().flatten().map(|v| v.to_bits()).collect() };
    assert_eq!(bits(&a.matrix), bits(&b.matrix));
    assert_eq!(a.model.fingerprint(), b.model.fingerprint());
    assert_eq!(a.log.len(), b.log.len());
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
    let c = run_cdsl(&RunConfig { seed: 2023, ..tiny() }).unwrap();
    assert_ne!(a.model.fingerprint(), c.model.fingerprint());
}

#[test]
fn stationary_equals_continual_run_without_memory_and_distillation() {
    let (s, t) = (blob("src", 0.0), blob("tgt", 40.0));
    let cfg = tiny();
    let st = run_stationary(&cfg, &s, &t).unwrap();
    let plain = RunConfig { domains: Some(vec![s, t]), ..cfg.with_stationary_removals() };
    let cont = run_cdsl(&plain).unwrap();
    assert_eq!(st.run.matrix.rows.len(), 2);
    for (a, b) in st.run.matrix.rows.iter().flatten().zip(cont.matrix.rows.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    assert_eq!(st.accuracy, st.run.matrix.get(1, 1));
    assert!(st.run.log.iter().all(|r| r.dis == 0.0));
    assert!(st.run.memory.is_none());
    assert_eq!(st.run.rng_usage.replay, 0);
}

#[test]
fn stationary_on_identical_domains_keeps_source_accuracy() {
    let s = blob("same", 0.0);
    let cfg = RunConfig { epochs: 10, steps_per_epoch: 10, ..tiny() };
    let st = run_stationary(&cfg, &s, &s).unwrap();
    let source = st.run.matrix.get(0, 0);
    assert!((st.accuracy - source).abs() <= 0.05, "adapted {} vs source {}", st.accuracy, source);
}

#[test]
fn ablations_touch_only_their_switch() {
    let full = run_cdsl(&tiny()).unwrap();
    assert!(full.rng_usage.randmix > 0);

    let no_mix = run_cdsl(&AblationVariant::NoRandMix.apply(&tiny())).unwrap();
    assert_eq!(no_mix.rng_usage.randmix, 0);
    assert_eq!(no_mix.rng_usage.batch, full.rng_usage.batch);
    assert_eq!(no_mix.rng_usage.replay, full.rng_usage.replay);

    for m in [LabelMethod::Softmax, LabelMethod::ShotStyle] {
        let swapped = run_cdsl(&AblationVariant::Labeler(m).apply(&tiny())).unwrap();
        assert_eq!(swapped.rng_usage, full.rng_usage, "{m}");
        assert!(swapped.pseudo_labels.iter().all(|p| p.method == m));
    }
    assert!(full.pseudo_labels.iter().all(|p| p.method == LabelMethod::T2pl));

    let no_pca = run_cdsl(&AblationVariant::NoPca.apply(&tiny())).unwrap();
    assert!(no_pca.log.iter().all(|r| r.pca == 0.0));
    assert_eq!(no_pca.rng_usage, full.rng_usage);
}

#[test]
fn ablate_matches_direct_run() {
    let report = ablate(&tiny(), AblationVariant::NoPca).unwrap();
    let direct = run_cdsl(&RunConfig { disable_pca: true, ..tiny() }).unwrap();
    assert_eq!(report, direct.metrics);
}

#[test]
fn diagnostics_do_not_perturb_training() {
    let plain = run_cdsl(&tiny()).unwrap();
    let diag = run_cdsl(&RunConfig { diagnose_labels: true, ..tiny() }).unwrap();
    assert_eq!(plain.matrix, diag.matrix);
    assert_eq!(plain.rng_usage, diag.rng_usage);
    // 4 target stages, 2 epochs, 3 labelers.
    assert_eq!(diag.label_diagnostics.len(), 4 * 2 * 3);
    assert!(plain.label_diagnostics.is_empty());
}

#[test]
fn evaluation_is_read_only() {
    let cfg = tiny();
    let out = run_cdsl(&cfg).unwrap();
    let domains = prepare_domains(&cfg, &cfg.resolve_sequence().unwrap()).unwrap();
    let before = out.model.fingerprint();
    let row = evaluate_row(&out.model, &domains).unwrap();
    assert_eq!(out.model.fingerprint(), before);
    assert_eq!(&row, out.matrix.rows.last().unwrap());
}

#[test]
fn one_snapshot_per_stage() {
    let out = run_cdsl(&tiny()).unwrap();
    assert_eq!(out.snapshots, 5);
    assert_eq!(out.pseudo_labels.len(), 4);
    assert_eq!(compute_metrics(&out.matrix).unwrap(), out.metrics);
}

#[test]
fn memory_trace_respects_quota() {
    let cfg = RunConfig { memory_capacity: 50, ..tiny() };
    let out = run_cdsl(&cfg).unwrap();
    assert_eq!(out.memory_trace.len(), 5);
    for (i, stat) in out.memory_trace.iter().enumerate() {
        let seen = i + 1;
        assert_eq!(stat.stage, i);
        assert!(stat.total <= 50);
        assert_eq!(stat.total, stat.buckets.iter().sum::<usize>());
        for (d, &b) in stat.buckets.iter().enumerate() {
            assert!(b <= 50 / seen, "stage {i} bucket {d} holds {b}");
            if d >= seen {
                assert_eq!(b, 0);
            }
        }
    }
}

#[test]
fn memory_keeps_admission_labels() {
    let cfg = tiny();
    let out = run_cdsl(&cfg).unwrap();
    let domains = prepare_domains(&cfg, &cfg.resolve_sequence().unwrap()).unwrap();
    let mem = out.memory.as_ref().unwrap();
    for (t, labels) in out.pseudo_labels.iter().enumerate().map(|(i, l)| (i + 1, l)) {
        let data = &domains[t].train.inputs;
        for ex in mem.bucket(t) {
            let row = (0..data.rows()).find(|&r| data.row(r) == ex.input.as_slice()).expect("exemplar comes from its domain");
            assert_eq!(ex.label, labels.labels[row]);
        }
    }
    for ex in mem.bucket(0) {
        let src = &domains[0].train;
        let row = (0..src.inputs.rows()).find(|&r| src.inputs.row(r) == ex.input.as_slice()).unwrap();
        assert_eq!(ex.label, src.labels[row], "source exemplars carry true labels");
    }
}

#[test]
fn final_labels_match_chained_stages() {
    let cfg = tiny();
    let out = run_cdsl(&cfg).unwrap();
    let domains = prepare_domains(&cfg, &cfg.resolve_sequence().unwrap()).unwrap();
    let last = domains.len() - 1;
    let data = &domains[last].train.inputs;
    let top = select_top_confident(&out.model, data, &cfg.labeler).unwrap();
    let centroids = build_centroids(&out.model, &top, data).unwrap();
    let similar = select_top_similar(&centroids, &out.model, data, &cfg.labeler).unwrap();
    let chained = knn_assign(&similar, &out.model, data, &cfg.labeler, last).unwrap();
    let stored = out.pseudo_labels.last().unwrap();
    assert_eq!(stored.labels, chained.labels);
    assert_eq!(stored.labels, pseudo_label(&out.model, data, &cfg.labeler, last).unwrap().labels);
}
