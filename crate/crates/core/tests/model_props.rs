use std::path::Path;

use darl::config::RunConfig;
use darl::model::{Model, ModelConfig};
use darl::patch::{patchify, ImageRecord, OrderingStrategy, PatchSequence};
use darl::positional::PosEncoding;
use darl::training::{Checkpoint, OptimState, Trainer};
use darl::{Graph, Rng, Tensor};
use proptest::prelude::*;

fn small(pos: PosEncoding, ordering: OrderingStrategy, depth: usize) -> ModelConfig {
    ModelConfig {
        image_size: (8, 8),
        patch_size: 2,
        depth,
        width: 16,
        heads: 2,
        pos_encoding: pos,
        ordering,
        ..ModelConfig::default()
    }
}

fn sequence(seed: u64) -> PatchSequence {
    let px = Rng::seed_from_u64(seed).uniform_tensor(&[8, 8, 1]);
    patchify(&ImageRecord::new(px, None).unwrap(), 2).unwrap()
}

fn bump(seq: &PatchSequence, row: usize) -> PatchSequence {
    let mut s = seq.clone();
    for v in s.patches.row_mut(row) {
        *v = 1.0 - *v;
    }
    s
}

fn predictions(model: &Model, seq: &PatchSequence) -> Tensor {
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let y = b.predict(&mut g, seq, None).unwrap();
    g.value(y).clone()
}

fn queries(model: &Model, seq: &PatchSequence) -> Tensor {
    let mut g = Graph::new();
    let b = model.bind_frozen(&mut g);
    let (_, q) = b.two_stream(&mut g, seq).unwrap();
    g.value(q).clone()
}

fn pos_strategy() -> impl Strategy<Value = PosEncoding> {
    prop::sample::select(PosEncoding::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prediction_t_reads_patch_before_t_when_attention_is_cut(seed in any::<u64>(), t in 1usize..16, pos in pos_strategy()) {
        let mut model = Model::new(small(pos, OrderingStrategy::raster(), 1), &mut Rng::seed_from_u64(seed)).unwrap();
        for name in ["blocks.0.proj.w", "blocks.0.proj.b"] {
            let id = model.params.find(name).unwrap();
            let zero = Tensor::zeros(model.params.get(id).shape());
            model.params.set(id, zero).unwrap();
        }
        let seq = sequence(seed ^ 1);
        let base = predictions(&model, &seq);
        for j in 0..seq.len() {
            let moved = predictions(&model, &bump(&seq, j));
            let same = base.row(t) == moved.row(t);
            prop_assert_eq!(same, j != t - 1, "patch {} vs prediction {}", j, t);
        }
    }

    #[test]
    fn query_stream_never_sees_its_own_patch(seed in any::<u64>(), t in 1usize..16, pos in prop::sample::select(vec![PosEncoding::Absolute, PosEncoding::Learnable, PosEncoding::Rope1d, PosEncoding::Rope2d])) {
        let model = Model::new(small(pos, OrderingStrategy::random(), 2), &mut Rng::seed_from_u64(seed)).unwrap();
        let seq = sequence(seed ^ 2);
        let base = queries(&model, &seq);
        let own = queries(&model, &bump(&seq, t));
        let prev = queries(&model, &bump(&seq, t - 1));
        prop_assert_eq!(base.row(t), own.row(t));
        prop_assert_ne!(base.row(t), prev.row(t));
    }

    #[test]
    fn parameter_count_depends_only_on_config(s1 in any::<u64>(), s2 in any::<u64>(), depth in 1usize..4, pos in pos_strategy()) {
        let config = small(pos, OrderingStrategy::raster(), depth);
        let a = Model::new(config.clone(), &mut Rng::seed_from_u64(s1)).unwrap();
        let b = Model::new(config.clone(), &mut Rng::seed_from_u64(s2)).unwrap();
        prop_assert_eq!(a.param_count(), b.param_count());
        let c = Model::from_params(config, b.params.clone()).unwrap();
        prop_assert_eq!(c.param_count(), a.param_count());
    }

    #[test]
    fn config_text_round_trips(
        depth in 1usize..8,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        pos in pos_strategy(),
        ordering in prop::sample::select(vec!["raster", "nested_raster:2", "round_robin:2x1", "random"]),
        diffusion in any::<bool>(),
        lr in 1e-5f64..1.0,
        a in 0.01f64..10.0,
        seed in any::<u64>(),
        clip in prop::option::of(0.1f64..10.0),
    ) {
        let mut c = RunConfig::default();
        c.set("model.objective", if diffusion { "diffusion" } else { "mse" }).unwrap();
        c.model.depth = depth;
        c.model.heads = heads;
        c.model.pos_encoding = pos;
        c.set("model.ordering", ordering).unwrap();
        c.train.base_lr = lr;
        c.train.schedule.a = a;
        c.train.seed = seed;
        c.train.grad_clip = clip;
        let back = RunConfig::from_text(&c.to_string(), &[]).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn checkpoints_round_trip_byte_identically(seed in any::<u64>(), step in any::<u64>(), loss in -1e6f64..1e6) {
        let config = RunConfig {
            model: small(PosEncoding::Rope2d, OrderingStrategy::raster(), 1),
            ..RunConfig::default()
        };
        let model = Model::new(config.model.clone(), &mut Rng::seed_from_u64(seed)).unwrap();
        let mut optim = OptimState::for_params(config.train.optimizer, &model.params);
        optim.step = step / 2;
        let mut rng = Rng::seed_from_u64(seed ^ 1);
        for m in optim.m.iter_mut() {
            *m = rng.gaussian_tensor(m.shape());
        }
        let ckpt = Checkpoint { config, model, optim, step, rng: rng.state(), last_loss: loss };
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, ckpt);
    }
}

#[test]
fn same_seed_gives_identical_training_steps() {
    let text = "model.depth = 1\nmodel.width = 16\nmodel.heads = 2\nmodel.objective = diffusion\ndataset.count = 32\ntrain.batch_size = 8\n";
    let config = RunConfig::from_text(text, &[]).unwrap();
    let d = &config.dataset;
    let data = darl::patch::load_dataset(d.format, None, &d.synthetic_spec()).unwrap();
    let run = |c: RunConfig| {
        let mut t = Trainer::new(c).unwrap();
        (0..2).map(|_| t.step(&data).unwrap().loss).collect::<Vec<_>>()
    };
    let a = run(config.clone());
    assert_eq!(a, run(config.clone()));
    let mut other = config;
    other.train.seed = 1;
    assert_ne!(a, run(other));
}
