use focus_core::autodiff::Tape;
use focus_core::lab::{
    load_checkpoint, save_checkpoint, train_phase, train_pipeline, write_metrics_csv, CorpusConfig, LabConfig,
    Normalization, Phase, RoutingMode, ToyModel, ToyModelConfig, TrainConfig, TrainData, TrainState,
};
use focus_core::tensor::rng::SeedStream;
use rand::Rng;

fn small_model(norm: Normalization) -> ToyModelConfig {
    ToyModelConfig {
        d: 16,
        layers: 2,
        heads: 2,
        ffn_dim: 24,
        context: 16,
        w: 3,
        groups: 3,
        d_g: 8,
        normalization: norm,
        ..Default::default()
    }
}

#[test]
fn memorises_a_repeated_phrase() {
    let cfg = ToyModelConfig { d: 32, layers: 1, heads: 2, ffn_dim: 64, context: 32, ..Default::default() };
    let text = b"the cat sat on the mat. ".repeat(200);
    let window: Vec<usize> = text[..33].iter().map(|&b| b as usize).collect();
    let data = TrainData { train: text, eval_windows: vec![window.clone()] };
    let mut state = TrainState::new(ToyModel::new(cfg, 3).unwrap());
    let before = state.model.lm_loss(&[window.clone()], RoutingMode::Bypass).unwrap();
    assert!((before - 256f64.ln()).abs() < 0.2, "untrained loss {before}");
    let train = TrainConfig { lr_pretrain: 3e-3, ..Default::default() };
    train_phase(&mut state, Phase::Pretrain, 500, &data, &train, 1).unwrap();
    let after = state.model.lm_loss(&[window], RoutingMode::Bypass).unwrap();
    assert!(after < 0.5, "loss after 500 steps {after}");
}

#[test]
fn routing_gradients_match_central_differences() {
    for norm in [Normalization::Sinkhorn, Normalization::SoftmaxWithBalanceLoss] {
        let model = ToyModel::new(small_model(norm), 21).unwrap();
        let mut rng = SeedStream::new(4).stream(0);
        let ids: Vec<usize> = (0..17).map(|_| rng.random_range(0..256)).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, |_, p| p.routing);
        let out = model.forward_sequence(&mut tape, &vars, &ids, RoutingMode::Gated, false).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        let batch = vec![ids];
        // Steps of 1e-6 are dominated by roundoff on the smallest entries.
        let h = 1e-5;
        let mut probe = model.clone();
        let mut checked = 0;
        for (p, param) in model.params.iter().enumerate().filter(|(_, p)| p.routing) {
            let g = grads.get(vars[p]).expect("routing params receive gradient");
            assert!(g.data().iter().any(|x| x.abs() > 1e-6), "{} gradient vanished", param.name);
            for e in 0..g.len() {
                let a = g.data()[e];
                if a.abs() <= 1e-6 {
                    continue;
                }
                let x = param.value.data()[e];
                probe.params[p].value.data_mut()[e] = x + h;
                let up = probe.lm_loss(&batch, RoutingMode::Gated).unwrap();
                probe.params[p].value.data_mut()[e] = x - h;
                let down = probe.lm_loss(&batch, RoutingMode::Gated).unwrap();
                probe.params[p].value.data_mut()[e] = x;
                let n = (up - down) / (2.0 * h);
                assert!((a - n).abs() / a.abs() < 1e-4, "{} [{e}]: {a} vs {n}", param.name);
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} entries checked");
    }
}

fn tiny_lab() -> LabConfig {
    LabConfig {
        seed: 8,
        model: small_model(Normalization::Sinkhorn),
        train: TrainConfig { batch: 2, pretrain_steps: 6, centroid_steps: 12, full_steps: 6, eval_every: 6, eval_sequences: 2, ..Default::default() },
        corpus: CorpusConfig { train_bytes: 3000, eval_bytes: 300, words: 16, entities: 3 },
    }
}

#[test]
fn pipeline_metrics_are_reproducible() {
    let csv = |cfg: &LabConfig| {
        let outcome = train_pipeline(cfg).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&outcome.state.history, &mut buf).unwrap();
        buf
    };
    let cfg = tiny_lab();
    let a = csv(&cfg);
    assert_eq!(a, csv(&cfg));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 4);
    let other = LabConfig { seed: 9, ..cfg };
    assert_ne!(csv(&tiny_lab()), csv(&other));
}

#[test]
fn checkpoint_round_trip_preserves_the_loss_bitwise() {
    let outcome = train_pipeline(&tiny_lab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&outcome.state.model, outcome.state.step, dir.path()).unwrap();
    let (back, step) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(step, outcome.state.step);
    let batch = vec![(0..17).map(|i| (i * 13) % 256).collect::<Vec<_>>()];
    let a = outcome.state.model.lm_loss(&batch, RoutingMode::Gated).unwrap();
    let b = back.lm_loss(&batch, RoutingMode::Gated).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
