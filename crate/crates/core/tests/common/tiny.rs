//! A shrunken model with hand-made inputs for end-to-end checks.

use predann::model::{sample_mask, MaskSet, ModelConfig, PredAnnModel, TeacherSpec};
use predann::nn::{Graph, Var};
use predann::rng::substream;
use predann::teacher::TeacherKind;
use rand::Rng;

/// 4 channels, 1 second, width 16, 2 heads, 10 teacher positions, vocab 8.
pub fn config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        seconds: 1,
        rate: 125,
        conv_channels: [4, 4, 4],
        gn_groups: 4,
        embed_dim: 16,
        heads: 2,
        head_hidden: 8,
        dropout: 0.0,
        teacher: Some(TeacherSpec {
            kind: TeacherKind::Muq,
            length: 10,
            raw_dim: 3,
        }),
        vocab: 8,
        ..ModelConfig::default()
    }
}

pub fn random_values(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = substream(seed, "values", &[]);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub struct Sample {
    pub eeg: Vec<f32>,
    pub raw: Vec<f32>,
    pub disc: Vec<u8>,
    pub mask: MaskSet,
    pub label: usize,
}

pub fn samples(cfg: &ModelConfig, n: usize) -> Vec<Sample> {
    let spec = cfg.teacher.as_ref().unwrap();
    (0..n)
        .map(|i| {
            let mut rng = substream(11, "sample", &[i as u64]);
            Sample {
                eeg: random_values(cfg.channels * cfg.seconds * cfg.rate, 100 + i as u64),
                raw: random_values(spec.length * spec.raw_dim, 200 + i as u64),
                disc: (0..spec.length).map(|_| rng.random_range(0..cfg.vocab as u8)).collect(),
                mask: sample_mask(spec.length, cfg.mask_ratio, &mut rng),
                label: i % cfg.classes,
            }
        })
        .collect()
}

/// `w_c · L_C + w_m · mean L_M` over a batch, on one tape.
pub fn multitask_loss(model: &PredAnnModel, g: &mut Graph<'_, f64>, batch: &[Sample]) -> Var {
    let cfg = &model.config;
    let mut hs = Vec::new();
    let mut lms = Vec::new();
    for s in batch {
        let sv = model.encode_segment(g, &s.eeg).unwrap();
        hs.push(sv.h_cls);
        let u = model.decoder_input(g, &s.raw, &s.mask).unwrap();
        let logits = model.decode(g, sv.states, u).unwrap();
        lms.push(model.masked_loss(g, logits, &s.disc, &s.mask).unwrap().unwrap());
    }
    let h = g.tape.concat_rows(&hs).unwrap();
    let (logits, _) = model.classify_train(g, h).unwrap();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let l_c = g.tape.cross_entropy(logits, &labels).unwrap();
    let mut l_m = lms[0];
    for &l in &lms[1..] {
        l_m = g.tape.add(l_m, l).unwrap();
    }
    let l_m = g.tape.scale(l_m, cfg.w_m / lms.len() as f64);
    let l_c = g.tape.scale(l_c, cfg.w_c);
    g.tape.add(l_c, l_m).unwrap()
}

/// Zeroes both output layers so every prediction is uniform.
pub fn zero_outputs(store: &mut predann::nn::ParamStore<f64>) {
    let names: Vec<String> = store
        .iter()
        .map(|p| p.name.clone())
        .filter(|n| n.starts_with("head.fc2.") || n.starts_with("decoder.out."))
        .collect();
    assert_eq!(names.len(), 4);
    for n in names {
        let id = store.id(&n).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
