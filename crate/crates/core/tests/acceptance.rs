//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use predann::alignment::{muq_slice, surp_ent_slice};
use predann::config::PipelineConfig;
use predann::evaluation::{accuracy, ensemble, evaluate_model, mcnemar_exact, PredictionCache};
use predann::model::{combine_losses, ModelConfig, PredAnnModel, TeacherSpec};
use predann::nn::{Graph, ParamStore};
use predann::par::Execution;
use predann::pipeline::Pipeline;
use predann::rng::substream;
use predann::signal_prep::make_windows;
use predann::synth::MarkovFile;
use predann::teacher::{
    build_teachers, enumerate_segments, fit_kmeans, fit_quantile_bins, sliding_window_features,
    surprisal_entropy, KMeansConfig, LogitWindow, MarkovLogitProvider, TeacherKind, TracingProvider,
};
use rand::Rng;

use common::oracles::{
    brute_segments, codebook_inertia, exhaustive_inertia, frame_at, mcnemar_oracle, rank_populations,
};
use common::tiny::{self, multitask_loss, samples, zero_outputs, Sample};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Check {
    let started = Instant::now();
    let mut worst_op = 0.0f64;
    for (name, inputs, build) in common::op_cases() {
        let err = common::grad_check(&inputs, 1e-3, |t, v| build(t, v));
        ensure(err < 1e-4, || format!("{name}: relative error {err:.2e} >= 1e-4"))?;
        worst_op = worst_op.max(err);
    }
    let cfg = tiny::config();
    let mut store = ParamStore::<f64>::new();
    let model = PredAnnModel::new(cfg.clone(), &mut store, &mut substream(5, "init", &[])).unwrap();
    let batch = samples(&cfg, 2);
    let e2e = common::store_grad_check(&store, 1e-5, 6, |g| multitask_loss(&model, g, &batch));
    ensure(e2e < 1e-3, || format!("end-to-end relative error {e2e:.2e} >= 1e-3"))?;
    let took = started.elapsed();
    ensure(took < Duration::from_secs(120), || format!("took {took:.1?}, budget 120 s"))?;
    Ok(format!("ops max rel err {worst_op:.2e} < 1e-4, end-to-end {e2e:.2e} < 1e-3, {took:.1?} < 120 s"))
}

fn feature_oracles() -> Check {
    // Uniform and one-hot logits.
    for v in [2usize, 10, 128, 2048] {
        let w = LogitWindow::new(2, v, vec![0.3; 2 * v]).unwrap();
        let (s, h) = surprisal_entropy(&w, &[0, (v - 1) as u32]).unwrap();
        let ln_v = (v as f64).ln();
        ensure(s.iter().chain(&h).all(|x| (x - ln_v).abs() < 1e-9), || format!("uniform V={v}"))?;
    }
    let mut one_hot = vec![-1000.0; 16];
    one_hot[5] = 0.0;
    let (s, h) = surprisal_entropy(&LogitWindow::new(1, 16, one_hot).unwrap(), &[5]).unwrap();
    ensure(s[0].abs() < 1e-9 && h[0].abs() < 1e-9, || "one-hot".into())?;

    // Markov chain with hand-computed values.
    let p = [0.5, 0.25, 0.25, 0.0, 0.5, 0.5, 1.0, 0.0, 0.0];
    let m = MarkovLogitProvider::new(&p, 3).unwrap();
    let tokens: Vec<u32> = (0..400).map(|i| [0u32, 1, 2, 0, 0, 2][i % 6]).collect();
    let ln2 = 2f64.ln();
    let h_of = |a: u32| [1.5 * ln2, ln2, 0.0][a as usize];
    for seg in sliding_window_features(0, &tokens, 400, &m, Execution::Sequential).unwrap() {
        for (i, (&s, &h)) in seg.surprisal.iter().zip(&seg.entropy).enumerate() {
            let t = seg.start_frame + i;
            let (ws, wh) = if t == 0 {
                (ln2, 1.5 * ln2)
            } else {
                let (a, b) = (tokens[t - 1], tokens[t]);
                (-p[a as usize * 3 + b as usize].ln(), h_of(a))
            };
            ensure((s - ws).abs() < 1e-9 && (h - wh).abs() < 1e-9, || format!("markov frame {t}"))?;
        }
    }

    // Entropy bound over random frames.
    let mut rng = substream(11, "acceptance", &[0]);
    let mut frames = 0usize;
    for case in 0..500 {
        let v = rng.random_range(2..64usize);
        let scale = [0.01, 1.0, 30.0, 800.0][case % 4];
        let rows = 40;
        let data: Vec<f64> = (0..rows * v).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let observed: Vec<u32> = (0..rows).map(|_| rng.random_range(0..v as u32)).collect();
        let (_, h) = surprisal_entropy(&LogitWindow::new(rows, v, data).unwrap(), &observed).unwrap();
        let cap = (v as f64).ln();
        ensure(h.iter().all(|&x| (0.0..=cap).contains(&x)), || format!("entropy above ln {v}"))?;
        frames += rows;
    }

    // Quantile populations against the rank oracle.
    for case in 0..60 {
        let n = rng.random_range(128..1500usize);
        let bins = [4usize, 16, 128][case % 3];
        let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(-1000.0..1000.0)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let q = fit_quantile_bins(&values, bins, TeacherKind::Entropy).unwrap();
        let mut got = vec![0i64; bins];
        for &v in &values {
            got[q.discretize(v)] += 1;
        }
        let want = rank_populations(values.len(), bins);
        ensure(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1), || format!("quantile case {case}"))?;
    }

    // k-means against exhaustive partitioning.
    let instances = 400;
    for case in 0..instances {
        let n = rng.random_range(2..=8usize);
        let dim = rng.random_range(1..=3usize);
        let k = rng.random_range(1..=n.min(3));
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-10..=10i32) as f64 * 0.5).collect())
            .collect();
        let flat: Vec<f32> = points.iter().flatten().map(|&x| x as f32).collect();
        let cfg = KMeansConfig { k, seed: case, restarts: 100, tol: 1e-9, max_iter: 300 };
        let got = codebook_inertia(&fit_kmeans(&flat, dim, &cfg, Execution::Sequential).unwrap(), &points);
        let want = exhaustive_inertia(&points, k);
        ensure((got - want).abs() <= 1e-5 * (1.0 + want), || format!("k-means {got} vs exhaustive {want}"))?;
    }
    Ok(format!(
        "closed forms to 1e-9, entropy <= ln V on {frames} frames, quantiles within 1, k-means optimal on {instances} instances"
    ))
}

fn index_math() -> Check {
    for t in 150..=3000usize {
        ensure(enumerate_segments(t, 150, 5) == brute_segments(t, 150, 5), || format!("T = {t}"))?;
    }
    let mut rng = substream(12, "acceptance", &[]);
    for _ in 0..1000 {
        let k: u64 = rng.random_range(0..=27 * 125);
        let t0 = k as f64 / 125.0;
        let (i0, j0) = (frame_at(k, 125, 50), frame_at(k, 125, 25));
        ensure(surp_ent_slice(t0, 1500).unwrap() == (i0..i0 + 150), || format!("surprisal slice t0 = {t0}"))?;
        ensure(muq_slice(t0, 750).unwrap() == (j0..j0 + 75), || format!("embedding slice t0 = {t0}"))?;
    }
    let w = make_windows(30.0, 8.0, 1.6).len();
    ensure(w == 14, || format!("{w} windows per excerpt"))?;
    Ok("segments for T in [150, 3000], 1000 random starts, 14 windows per excerpt".into())
}

fn statistics() -> Check {
    let mut worst = 0.0f64;
    for n in 0..=60u64 {
        for b in 0..=n {
            let p = mcnemar_exact(b, n - b);
            worst = worst.max((p - mcnemar_oracle(b, n - b)).abs());
            ensure(p == mcnemar_exact(n - b, b), || format!("asymmetric at b={b} c={}", n - b))?;
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.2e}"))?;
    let p = mcnemar_exact(5, 0);
    ensure(p == 0.0625, || format!("b=5 c=0 gave {p}"))?;
    Ok(format!("max |p - oracle| {worst:.1e} <= 1e-12 for b+c <= 60, symmetric, p(5,0) = 0.0625"))
}

fn losses() -> Check {
    let cfg = ModelConfig {
        vocab: 128,
        classes: 10,
        teacher: Some(TeacherSpec { kind: TeacherKind::Surprisal, length: 150, raw_dim: 1 }),
        ..tiny::config()
    };
    let mut store = ParamStore::<f64>::new();
    let model = PredAnnModel::new(cfg.clone(), &mut store, &mut substream(2, "init", &[])).unwrap();
    zero_outputs(&mut store);
    let batch: Vec<Sample> = samples(&cfg, 3);
    let mut g = Graph::new(&store);
    let mut hs = Vec::new();
    let mut lms = Vec::new();
    for s in &batch {
        let sv = model.encode_segment(&mut g, &s.eeg).unwrap();
        hs.push(sv.h_cls);
        let u = model.decoder_input(&mut g, &s.raw, &s.mask).unwrap();
        let logits = model.decode(&mut g, sv.states, u).unwrap();
        let l = model.masked_loss(&mut g, logits, &s.disc, &s.mask).unwrap().unwrap();
        lms.push(g.tape.value(l).data()[0]);
    }
    let h = g.tape.concat_rows(&hs).unwrap();
    let (logits, _) = model.classify_train(&mut g, h).unwrap();
    let l_c = g.tape.cross_entropy(logits, &[0, 4, 9]).unwrap();
    let l_c = g.tape.value(l_c).data()[0];
    let l_m = lms.iter().sum::<f64>() / lms.len() as f64;
    let total = combine_losses(1.0, l_c, 0.1, Some(l_m));
    let want = 10f64.ln() + 0.1 * 128f64.ln();
    ensure((l_c - 10f64.ln()).abs() < 1e-9, || format!("L_C = {l_c}"))?;
    ensure(lms.iter().all(|l| (l - 128f64.ln()).abs() < 1e-9), || format!("L_M = {lms:?}"))?;
    ensure((total - want).abs() < 1e-9, || format!("L = {total}"))?;
    Ok(format!("L_C {l_c:.12}, L_M {l_m:.12}, L {total:.12}, all within 1e-9"))
}

fn desk_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.paths.work_dir = dir.to_path_buf();
    cfg
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Metric logs carry wall-clock time; everything else must match byte for byte.
fn without_wall_time(bytes: &[u8]) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_s");
            v
        })
        .collect()
}

fn determinism(root: &Path) -> Check {
    let started = Instant::now();
    for run in ["a", "b"] {
        let p = Pipeline::new(desk_config(&root.join(run)), Execution::Parallel).unwrap();
        p.run_all().map_err(|e| format!("run {run}: {e}"))?;
    }
    let took = started.elapsed();
    let (a, b) = (tree(&root.join("a")), tree(&root.join("b")));
    ensure(a.keys().eq(b.keys()), || "runs wrote different file sets".into())?;
    let mut logs = 0;
    for (path, bytes) in &a {
        let other = &b[path];
        if path.to_string_lossy().ends_with(".log.jsonl") {
            logs += 1;
            ensure(without_wall_time(bytes) == without_wall_time(other), || format!("{} differs", path.display()))?;
        } else {
            ensure(bytes == other, || format!("{} differs", path.display()))?;
        }
    }
    ensure(took < Duration::from_secs(15 * 60), || format!("two runs took {took:.1?}, budget 15 min"))?;
    Ok(format!(
        "{} files identical ({logs} metric logs up to wall time), two runs in {took:.1?} < 15 min",
        a.len()
    ))
}

fn toy_reproduction(root: &Path) -> Check {
    let p = Pipeline::new(desk_config(&root.join("a")), Execution::Parallel).unwrap();
    let load = |tag: &str| PredictionCache::load(&p.cache_path(tag)).map_err(|e| format!("{tag}: {e}"));
    let acc = |tag: &str| load(tag).map(|c| accuracy(&c));

    // (a) untrained models sit near chance.
    let (ds, _, val) = p.dataset().unwrap();
    let mut untrained = Vec::new();
    for &seed in &p.config.fullscratch.seeds {
        let t = predann::training::init_model(p.config.model.clone(), seed).unwrap();
        untrained.push(accuracy(&evaluate_model(&t, &ds, &val, "untrained", Execution::Parallel).unwrap()));
    }
    let mean_untrained = untrained.iter().sum::<f64>() / untrained.len() as f64;
    let a = (0.05..=0.15).contains(&mean_untrained);

    // (b) pretraining helps on at least two of three seeds.
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in [0u64, 1, 42] {
        let ft = acc(&format!("finetune-muq-s{seed}"))?;
        let fs = acc(&format!("fullscratch-s{seed}"))?;
        wins += usize::from(ft >= fs);
        pairs.push(format!("s{seed} {ft:.3}/{fs:.3}"));
    }
    let b = wins >= 2;

    // (c) the teacher ensemble is at least as good as its best member.
    let singles: Vec<f64> = ["muq", "surprisal", "entropy"]
        .iter()
        .map(|k| acc(&format!("finetune-{k}-s42")))
        .collect::<std::result::Result<_, _>>()?;
    let best_single = singles.iter().cloned().fold(f64::MIN, f64::max);
    let ens = acc("ensemble-teachers")?;
    let c = ens >= best_single;

    // (d) ensembling identical caches is a no-op.
    let cache = load("finetune-muq-s42")?;
    let tripled = ensemble(&[&cache, &cache, &cache], "tripled").unwrap();
    let d = cache.predictions() == tripled.predictions();

    let detail = format!(
        "(a) untrained mean {mean_untrained:.3} {untrained:.3?} in [0.05, 0.15]: {}; \
         (b) finetune >= fullscratch on {wins}/3 [{}]: {}; \
         (c) teacher ensemble {ens:.3} >= best single {best_single:.3}: {}; \
         (d) identical-cache ensemble unchanged: {}",
        verdict(a),
        pairs.join(", "),
        verdict(b),
        verdict(c),
        verdict(d),
    );
    if a && b && c && d {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn chunk_isolation(root: &Path) -> Check {
    let mut cfg = desk_config(&root.join("a"));
    cfg.teacher.chunk_mode = true;
    let p = Pipeline::new(cfg, Execution::Parallel).unwrap();
    let songs = p.load_songs().unwrap();
    let markov: MarkovFile =
        serde_json::from_slice(&std::fs::read(p.stage_dir("synth").join("markov.json")).unwrap()).unwrap();
    let provider = MarkovLogitProvider::new(&markov.transition, markov.vocab).unwrap();
    let tracer = TracingProvider::new(&provider, songs.iter().map(|s| (s.song_id, s.tokens.clone())).collect());
    build_teachers(&songs, &p.config.teacher, &tracer, Execution::Parallel).unwrap();
    let calls = tracer.records().len();
    let violations = tracer.chunk_violations(1500).len();
    ensure(calls > 0 && violations == 0, || format!("{violations} violations over {calls} calls"))?;
    Ok(format!("0 violations over {calls} provider calls on {} songs", songs.len()))
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn run(name: &str, check: impl FnOnce() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    match &outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => println!("FAIL {name}: {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        std::fs::remove_dir_all(&root).unwrap();
    }
    let results = [
        run("gradient suite", gradient_suite),
        run("feature oracles", feature_oracles),
        run("index math", index_math),
        run("statistics", statistics),
        run("losses", losses),
        run("determinism", || determinism(&root)),
        run("toy reproduction", || toy_reproduction(&root)),
        run("chunk-mode isolation", || chunk_isolation(&root)),
    ];
    let failed = results.iter().filter(|&&ok| !ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
