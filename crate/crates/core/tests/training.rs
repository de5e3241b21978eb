mod common;

use std::sync::OnceLock;

use predann::data::{Dataset, WindowItem};
use predann::evaluation::{accuracy, evaluate_model};
use predann::model::{strip_decoder, ModelConfig};
use predann::nn::AdamConfig;
use predann::par::Execution;
use predann::teacher::{TeacherKind, TeacherSet};
use predann::training::{
    finetune_model, init_model, load_trained, pretrain_model, read_metric_log, save_trained, EpochLog, Stage,
    TrainPlan, Trained, Trainer,
};

struct Fixture {
    model: ModelConfig,
    ds: Dataset,
    train: Vec<WindowItem>,
    teachers: TeacherSet,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("training-fixture");
        let p = common::desk_pipeline(&dir);
        let (ds, train, _) = p.dataset().unwrap();
        Fixture {
            model: p.config.model.clone(),
            ds,
            train,
            teachers: p.load_teachers().unwrap(),
        }
    })
}

fn trainer<'a>(f: &'a Fixture, items: &'a [WindowItem], teachers: bool, exec: Execution) -> Trainer<'a> {
    Trainer {
        data: &f.ds,
        items,
        teachers: teachers.then_some(&f.teachers),
        exec,
    }
}

fn plan(stage: Stage, epochs: usize, batch_size: usize, seed: u64, teacher: Option<TeacherKind>) -> TrainPlan {
    TrainPlan {
        stage,
        epochs,
        batch_size,
        adam: AdamConfig::default(),
        seed,
        teacher,
    }
}

fn muq_dim(f: &Fixture) -> usize {
    f.teachers.codebook.dim()
}

fn without_wall(logs: &[EpochLog]) -> Vec<EpochLog> {
    logs.iter().map(|l| EpochLog { wall_s: 0.0, ..l.clone() }).collect()
}

fn same_params(a: &Trained, b: &Trained) -> bool {
    a.store.len() == b.store.len()
        && a.store.iter().zip(b.store.iter()).all(|(x, y)| x.name == y.name && x.value == y.value)
}

#[test]
fn sequential_and_parallel_runs_are_identical() {
    let f = fixture();
    let items = &f.train[..40];
    let pl = plan(Stage::Pretrain, 2, 16, 42, Some(TeacherKind::Surprisal));
    let run = |exec| {
        let mut t = pretrain_model(&f.model, TeacherKind::Surprisal, muq_dim(f), 42).unwrap();
        let logs = trainer(f, items, true, exec).run(&mut t, &pl, None).unwrap();
        (t, without_wall(&logs))
    };
    let (a, la) = run(Execution::Sequential);
    let (b, lb) = run(Execution::Parallel);
    let (c, lc) = run(Execution::Parallel);
    assert!(same_params(&a, &b) && same_params(&b, &c));
    assert_eq!(la, lb);
    assert_eq!(lb, lc);
    assert!(la.iter().all(|l| l.l_m.is_some() && l.loss.is_finite()));
}

#[test]
fn masked_loss_drops_below_uniform_baseline() {
    let f = fixture();
    let items = &f.train[..64];
    let pl = plan(Stage::Pretrain, 200, 16, 42, Some(TeacherKind::Muq));
    let mut t = pretrain_model(&f.model, TeacherKind::Muq, muq_dim(f), 42).unwrap();
    let logs = trainer(f, items, true, Execution::Parallel).run(&mut t, &pl, None).unwrap();
    let first = logs[0].l_m.unwrap();
    let last = logs.last().unwrap().l_m.unwrap();
    println!("L_M epoch 0 {first:.4}, epoch 199 {last:.4}, baseline {:.4}", 128f64.ln());
    assert!(last < 128f64.ln(), "L_M {last}");
    assert!(last < first);
}

#[test]
fn zero_classification_weight_freezes_the_head() {
    let f = fixture();
    let model = ModelConfig { w_c: 0.0, ..f.model.clone() };
    let before = pretrain_model(&model, TeacherKind::Entropy, muq_dim(f), 1).unwrap();
    let mut t = before.clone();
    let pl = plan(Stage::Pretrain, 2, 16, 1, Some(TeacherKind::Entropy));
    let logs = trainer(f, &f.train[..32], true, Execution::Parallel).run(&mut t, &pl, None).unwrap();
    assert!(logs.iter().all(|l| l.l_c == 0.0 && l.l_m.is_some()));
    for (p, q) in before.store.iter().zip(t.store.iter()) {
        if p.name.starts_with("head.") {
            assert_eq!(p.value, q.value, "{} moved", p.name);
        }
    }
    let moved = |prefix: &str| {
        before
            .store
            .iter()
            .zip(t.store.iter())
            .any(|(p, q)| p.name.starts_with(prefix) && p.value != q.value)
    };
    assert!(moved("encoder.") && moved("decoder."));
}

#[test]
fn zero_masked_weight_is_pure_classification() {
    let f = fixture();
    let items = &f.train[..32];
    let model = ModelConfig { w_m: 0.0, ..f.model.clone() };
    let mut pre = pretrain_model(&model, TeacherKind::Muq, muq_dim(f), 5).unwrap();
    let mut cls = init_model(model.without_decoder(), 5).unwrap();
    let before = pre.clone();
    let pl = plan(Stage::Pretrain, 2, 16, 5, Some(TeacherKind::Muq));
    let la = trainer(f, items, true, Execution::Parallel).run(&mut pre, &pl, None).unwrap();
    let lb = trainer(f, items, false, Execution::Parallel).run(&mut cls, &pl, None).unwrap();
    assert_eq!(without_wall(&la), without_wall(&lb));
    for p in cls.store.iter() {
        assert_eq!(&p.value, pre.store.by_name(&p.name).unwrap(), "{}", p.name);
    }
    for (p, q) in before.store.iter().zip(pre.store.iter()) {
        if p.name.starts_with("decoder.") {
            assert_eq!(p.value, q.value, "{} moved", p.name);
        }
    }
}

#[test]
fn finetune_starts_from_the_pretrained_classifier() {
    let f = fixture();
    let items = &f.train[..48];
    let mut pre = pretrain_model(&f.model, TeacherKind::Muq, muq_dim(f), 42).unwrap();
    let pl = plan(Stage::Pretrain, 1, 16, 42, Some(TeacherKind::Muq));
    trainer(f, items, true, Execution::Parallel).run(&mut pre, &pl, None).unwrap();

    let ft = finetune_model(&pre, 42).unwrap();
    let names: Vec<&str> = ft.store.iter().map(|p| p.name.as_str()).collect();
    let stripped = strip_decoder(&pre.store);
    let kept: Vec<&str> = stripped.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, kept);

    let ft_plan = plan(Stage::Finetune, 1, 16, 42, None);
    let tr = trainer(f, items, false, Execution::Parallel);
    let batch = &tr.epoch_batches(&ft_plan, 0)[0];
    let a = tr.batch_loss(&ft, &ft_plan, 0, batch).unwrap();
    let mut no_mask = pre.clone();
    no_mask.model.config.w_m = 0.0;
    let b = tr.batch_loss(&no_mask, &ft_plan, 0, batch).unwrap();
    assert_eq!(a.l_c, b.l_c);
    assert_eq!(a.loss, a.l_c);
    assert!(a.l_m.is_none());
}

#[test]
fn overfits_a_tiny_set() {
    let f = fixture();
    // Two windows per song.
    let mut items = Vec::new();
    for song in 0..10 {
        items.extend(f.train.iter().filter(|w| w.label() == song).take(2).cloned());
    }
    assert_eq!(items.len(), 20);
    let mut t = init_model(f.model.clone(), 42).unwrap();
    let pl = plan(Stage::Fullscratch, 400, 10, 42, None);
    let logs = trainer(f, &items, false, Execution::Parallel).run(&mut t, &pl, None).unwrap();
    let cache = evaluate_model(&t, &f.ds, &items, "overfit", Execution::Parallel).unwrap();
    println!(
        "train acc {:.3} (training mode), {:.3} (evaluation mode)",
        logs.last().unwrap().train_acc,
        accuracy(&cache)
    );
    assert!(accuracy(&cache) >= 0.95);
}

#[test]
fn seeds_give_distinct_initializations() {
    let f = fixture();
    let models: Vec<Trained> = [0u64, 1, 42].iter().map(|&s| init_model(f.model.clone(), s).unwrap()).collect();
    assert!(!same_params(&models[0], &models[1]));
    assert!(!same_params(&models[1], &models[2]));
    assert!(!same_params(&models[0], &models[2]));
    assert!(same_params(&models[2], &init_model(f.model.clone(), 42).unwrap()));
}

#[test]
fn log_and_checkpoint_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.log.jsonl");
    let pl = plan(Stage::Fullscratch, 2, 16, 3, None);
    let mut t = init_model(f.model.clone(), 3).unwrap();
    let logs = trainer(f, &f.train[..17], false, Execution::Parallel)
        .run(&mut t, &pl, Some(&log))
        .unwrap();
    assert_eq!(read_metric_log(&log).unwrap(), logs);
    // 17 windows in batches of 16 leave one single-sample batch per epoch.
    assert!(logs.iter().all(|l| l.steps == 1 && l.skipped_batches == 1));

    let stem = dir.path().join("model");
    save_trained(&stem, &t, &pl).unwrap();
    let (back, back_plan) = load_trained(&stem).unwrap();
    assert_eq!(back_plan, pl);
    assert!(same_params(&t, &back));
    assert_eq!(back.model.config, t.model.config);

    let mut t2 = init_model(f.model.clone(), 3).unwrap();
    trainer(f, &f.train[..17], false, Execution::Parallel)
        .run(&mut t2, &pl, Some(&log))
        .unwrap();
    assert_eq!(read_metric_log(&log).unwrap().len(), 4);
}

#[test]
fn invalid_plans_are_rejected() {
    let f = fixture();
    let mut t = init_model(f.model.clone(), 0).unwrap();
    let tr = trainer(f, &f.train[..4], false, Execution::Sequential);
    assert!(tr.run(&mut t, &plan(Stage::Finetune, 0, 4, 0, None), None).is_err());
    assert!(tr.run(&mut t, &plan(Stage::Finetune, 1, 0, 0, None), None).is_err());
    let mut pre = pretrain_model(&f.model, TeacherKind::Muq, muq_dim(f), 0).unwrap();
    let p = plan(Stage::Pretrain, 1, 4, 0, Some(TeacherKind::Muq));
    assert!(tr.run(&mut pre, &p, None).is_err());
}
