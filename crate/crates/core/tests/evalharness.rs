use std::collections::BTreeSet;

use neurotune::diffcore::OptimizerConfig;
use neurotune::evalharness::*;
use neurotune::lora::{LoraConfig, TargetKind};
use neurotune::modelzoo::{reference, Model, PreparedData};
use neurotune::synthdata::{generate, SynthSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn subjects(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("P{i:02}")).collect()
}

#[test]
fn fold_plan_rejects_bad_k() {
    assert!(split_subject_kfold(&subjects(5), 1, 0).is_err());
    assert!(split_subject_kfold(&subjects(5), 6, 0).is_err());
    assert!(split_subject_kfold(&subjects(5), 5, 0).is_ok());
}

#[test]
fn fold_plan_is_seeded_and_balanced() {
    let s = subjects(23);
    let a = split_subject_kfold(&s, 10, 4).unwrap();
    assert_eq!(a, split_subject_kfold(&s, 10, 4).unwrap());
    assert_ne!(a, split_subject_kfold(&s, 10, 5).unwrap());
    let sizes: Vec<usize> = (0..10).map(|f| a.validation_subjects(f).len()).collect();
    assert!(sizes.iter().all(|&n| n == 2 || n == 3), "{sizes:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_subjects(n in 2usize..40, k in 2usize..12, seed in any::<u64>(), reps in 1usize..4) {
        prop_assume!(k <= n);
        let s = subjects(n);
        let trial_subjects: Vec<String> = s.iter().flat_map(|x| std::iter::repeat_n(x.clone(), reps)).collect();
        let plan = split_subject_kfold(&s, k, seed).unwrap();
        let mut seen = BTreeSet::new();
        for f in 0..k {
            let (tr, va) = plan.split(&trial_subjects, f).unwrap();
            prop_assert_eq!(tr.len() + va.len(), trial_subjects.len());
            assert_disjoint(&trial_subjects, &tr, &va).unwrap();
            for v in plan.validation_subjects(f) {
                prop_assert!(seen.insert(v.to_string()), "{} validated twice", v);
            }
        }
        prop_assert_eq!(seen.len(), n);
    }
}

#[test]
fn disjointness_check_catches_leaks() {
    let ts: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
    assert!(assert_disjoint(&ts, &[0], &[1, 2]).is_err());
    assert!(assert_disjoint(&ts, &[0, 1], &[2]).is_ok());
}

#[test]
fn ttest_matches_an_independent_student_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(0.4..0.9)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(0.4..0.9)).collect();
        let r = paired_ttest(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / 10.0;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let t = mean / (sd / 10f64.sqrt());
        let p = 2.0 * StudentsT::new(0.0, 1.0, 9.0).unwrap().cdf(-t.abs());
        assert_eq!(r.df, 9);
        assert!((r.t - t).abs() < 1e-9 * t.abs().max(1.0));
        assert!((r.p - p).abs() < 1e-6, "{} vs {p}", r.p);
        let s = paired_ttest(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }
}

#[test]
fn student_t_tails_match_the_oracle_across_df() {
    for df in [1.0, 2.0, 3.5, 9.0, 30.0, 200.0] {
        let o = StudentsT::new(0.0, 1.0, df).unwrap();
        for t in [-8.0, -2.3, -0.4, 0.0, 0.7, 1.9, 5.0] {
            assert!((student_t_cdf(t, df) - o.cdf(t)).abs() < 1e-10, "df {df} t {t}");
        }
    }
}

#[test]
fn alternating_differences_give_t_zero_p_one() {
    let r = paired_ttest(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
    assert!(paired_ttest(&[1.0], &[0.0]).is_err());
    assert!(paired_ttest(&[1.0, 2.0], &[0.0]).is_err());
}

fn task(subjects: usize, seed: u64) -> (Model, PreparedData) {
    let set = generate(&SynthSpec { subjects, seed, ..SynthSpec::default() }).unwrap();
    let m = Model::build(&reference::get("eegnet").unwrap()).unwrap();
    let d = PreparedData::new(&set, m.input_spec()).unwrap();
    (m, d)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, optimizer: Some(OptimizerConfig::adam(5e-3)), ..TrainConfig::default() }
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let (base, data) = task(4, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let run = |seed| {
        let mut m = prepare(&base, &Variant::Full, seed).unwrap();
        let mut r = train_run(&mut m, &data, &idx[..90], &idx[90..], &quick(2), seed, 0, String::new()).unwrap();
        r.wall_time_s = 0.0;
        (r, m.params().clone())
    };
    let (a, pa) = run(1);
    let (b, pb) = run(1);
    assert_eq!(a, b);
    assert!(pa == pb);
    assert_ne!(run(2).0.epoch_loss, a.epoch_loss);
}

#[test]
fn a_small_cnn_learns_the_separable_task() {
    let (base, data) = task(10, 1);
    let plan = split_subject_kfold(&data.subjects, 5, 0).unwrap();
    let (tr, va) = plan.split(&data.subjects, 0).unwrap();
    let mut m = prepare(&base, &Variant::Full, 0).unwrap();
    let r = train_run(&mut m, &data, &tr, &va, &quick(15), 0, 0, String::new()).unwrap();
    assert!(r.ok());
    assert!(r.accuracy >= 0.95, "accuracy {} losses {:?}", r.accuracy, r.epoch_loss);
    assert!(r.epoch_loss.last() < r.epoch_loss.first());
}

#[test]
fn variants_train_the_expected_parameter_sets() {
    let (base, _) = task(2, 0);
    let total = base.count_params().total;
    assert_eq!(prepare(&base, &Variant::Full, 0).unwrap().count_params().trainable, total);
    let head = prepare(&base, &Variant::HeadOnly, 0).unwrap().count_params();
    assert_eq!(head.trainable, head.head);
    let lora = prepare(&base, &Variant::Lora(LoraConfig::new([TargetKind::Conv], 1)), 0).unwrap().count_params();
    assert_eq!(lora.trainable, lora.head + lora.adapter);
    assert!(lora.adapter > 0);
}

#[test]
fn cross_validation_reuses_cached_folds() {
    let (base, data) = task(6, 2);
    let plan = split_subject_kfold(&data.subjects, 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache = RunCache::open(dir.path()).unwrap();
    let tc = quick(1);
    let ctx = CvContext { base: &base, data: &data, data_id: "synth", plan: &plan, train: &tc, seed: 7, cache: Some(&cache) };
    let first = cross_validate(&ctx, &Variant::HeadOnly).unwrap();
    assert_eq!(first.runs.len(), 3);
    assert_eq!(cache.len().unwrap(), 3);
    assert!(first.runs.iter().all(|r| r.n_val == 60));
    let again = cross_validate(&ctx, &Variant::HeadOnly).unwrap();
    assert_eq!(first, again);
    assert_eq!(cache.len().unwrap(), 3);
    let uncached = cross_validate(&CvContext { cache: None, ..ctx }, &Variant::HeadOnly).unwrap();
    assert_eq!(uncached.accuracies(), first.accuracies());
    // Any change to the run's inputs gives fresh fingerprints.
    assert_ne!(run_fingerprint(&ctx, &Variant::HeadOnly, 0), run_fingerprint(&CvContext { seed: 8, ..ctx }, &Variant::HeadOnly, 0));
    assert_ne!(run_fingerprint(&ctx, &Variant::HeadOnly, 0), run_fingerprint(&ctx, &Variant::Full, 0));
    assert_ne!(run_fingerprint(&ctx, &Variant::HeadOnly, 0), run_fingerprint(&ctx, &Variant::HeadOnly, 1));
}

#[test]
fn ablation_grid_has_the_expected_structure() {
    let set = generate(&SynthSpec { subjects: 4, trials_per_subject: 6, ..SynthSpec::default() }).unwrap();
    let base = Model::build(&reference::get("labram_tiny").unwrap()).unwrap();
    let data = PreparedData::new(&set, base.input_spec()).unwrap();
    let plan = split_subject_kfold(&data.subjects, 2, 0).unwrap();
    let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let cache = RunCache::open(dir.path()).unwrap();
    let ctx = CvContext { base: &base, data: &data, data_id: "synth", plan: &plan, train: &tc, seed: 0, cache: Some(&cache) };
    let spec = AblationSpec { ranks: vec![1, 2, 4, 8, 16], ..AblationSpec::default() };
    let rep = run_ablation(&ctx, &spec).unwrap();
    assert_eq!(rep.sweep.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 4, 8, 16]);
    assert!(rep.sweep.iter().all(|r| r.targets == "attention+fully_connected+conv"));
    assert!(rep.sweep.windows(2).all(|w| w[0].trainable_params < w[1].trainable_params));
    assert!(spec.ranks.contains(&rep.r_prime));
    let best = rep.sweep.iter().map(|r| r.summary.unwrap().mean).fold(f64::MIN, f64::max);
    assert_eq!(rep.sweep.iter().find(|r| r.rank == rep.r_prime).unwrap().summary.unwrap().mean, best);
    assert_eq!(rep.layers.len(), 6);
    assert!(rep.layers.iter().all(|r| r.rank == rep.r_prime));
    assert_eq!(rep.dropout.len(), 5);
    assert!(rep.dropout.iter().all(|d| d.delta == d.acc_with - d.acc_without));
    // 5 sweep + 6 combos + 5 dropout grid points, 2 folds each.
    assert_eq!(rep.runs.len(), 16);
    assert_eq!(cache.len().unwrap(), 32);
    // A repeated sweep is served from the cache and reproduces the report.
    assert_eq!(run_ablation(&ctx, &spec).unwrap(), rep);

    let out = tempfile::tempdir().unwrap();
    report::ablation_tables(out.path(), &rep).unwrap();
    let (head, rows) = report::read_csv(&out.path().join(report::TABLE_RANKS)).unwrap();
    assert_eq!(head[0], "targets");
    assert_eq!(rows.len(), 5);
    let (_, rows) = report::read_csv(&out.path().join(report::TABLE_DROPOUT)).unwrap();
    assert_eq!(rows.last().unwrap()[0], "mean");
}

#[test]
fn fifty_sweep_records_for_five_ranks_and_ten_folds() {
    let set = generate(&SynthSpec { subjects: 10, trials_per_subject: 4, duration_s: 1.0, ..SynthSpec::default() }).unwrap();
    let mut cfg = reference::get("eegnet").unwrap();
    if let neurotune::modelzoo::Architecture::EegnetLike(e) = &mut cfg.arch {
        e.samples = 200;
    }
    let base = Model::build(&cfg).unwrap();
    let data = PreparedData::new(&set, base.input_spec()).unwrap();
    let plan = split_subject_kfold(&data.subjects, 10, 0).unwrap();
    let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let ctx = CvContext { base: &base, data: &data, data_id: "synth", plan: &plan, train: &tc, seed: 0, cache: None };
    let spec = AblationSpec { combos: Some(vec![]), ..AblationSpec::default() };
    assert!(spec.validate().is_err());
    let rep = run_ablation(&ctx, &AblationSpec::default()).unwrap();
    let sweep: usize = rep.runs[..5].iter().map(|r| r.runs.len()).sum();
    assert_eq!(sweep, 50);
    assert!(rep.sweep.iter().all(|r| r.targets == "conv" && r.conv_rank.is_some()));
    // Only the conv singleton is realisable on a pure CNN.
    assert_eq!(rep.layers.len(), 1);
}
