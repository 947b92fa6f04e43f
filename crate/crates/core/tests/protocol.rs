use sfprompt_core::client::{ClientState, GradMsg, SmashedMsg};
use sfprompt_core::data::{gen_synthetic, read_csv, write_csv};
use sfprompt_core::experiment::{load_config, ExperimentConfig};
use sfprompt_core::model::{
    build_model, model_forward, split_model, ModelConfig, PromptParams, SplitSpec,
};
use sfprompt_core::server::{evaluate, run_training, ServerState};
use sfprompt_core::simnet::{LinkConfig, MessageKind, Network};
use sfprompt_core::tensor::Tensor;
use sfprompt_core::{checkpoint, Error};

fn cfg() -> ModelConfig {
    ModelConfig {
        seq_len: 8,
        d_model: 16,
        n_layers: 4,
        n_classes: 4,
        input_dim: 8,
    }
}

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        model: cfg(),
        n_clients: 4,
        clients_per_round: 2,
        rounds: 2,
        local_epochs: 1,
        batch_size: 8,
        ..Default::default()
    };
    c.data.n_train = 80;
    c.data.n_test = 40;
    c
}

#[test]
fn one_batch_through_the_network() {
    let c = cfg();
    let params = build_model(&c, 9).unwrap();
    let part = split_model(&c, &params, SplitSpec { cut1: 1, cut2: 3 }).unwrap();
    let data = gen_synthetic(4, &c, 5.0, 9).unwrap();
    let mut client = ClientState::new(0, c, part.head.clone(), data, 9).unwrap();
    let mut server = ServerState::new(c, part.body.clone());
    let mut net = Network::new(LinkConfig {
        uplink_rate: 1000.0,
        downlink_rate: 2000.0,
        concurrent_share: false,
    })
    .unwrap();

    client
        .begin_round(1, part.tail.clone(), PromptParams::init(4, 16, 9))
        .unwrap();
    client.prune(0.0, false).unwrap();
    client.local_loss_update(0, 0.0, 2).unwrap();
    net.begin_round(1).unwrap();
    let s = client.forward_update(0, &[0, 1]).unwrap();
    assert_eq!(s.byte_size, 3072);
    net.record_transfer(0, MessageKind::Smashed, s.byte_size, 1)
        .unwrap();
    let s2 = server.server_forward(&s).unwrap();
    assert_eq!(s2.activations.shape(), s.activations.shape());
    assert!(matches!(server.server_forward(&s), Err(Error::Protocol(_))));
    net.record_transfer(0, MessageKind::BodyOutput, s2.byte_size, 1)
        .unwrap();
    let summary = net.close_round().unwrap();
    assert_eq!((summary.bytes_up, summary.bytes_down), (3072, 3072));
    assert!((summary.latency_s - (3.072 + 1.536)).abs() < 1e-12);
    assert!(net.record_transfer(0, MessageKind::Smashed, 1, 1).is_err());

    let zero = GradMsg::new(0, 1, 0, Tensor::zeros(s2.activations.shape()));
    let back = server.server_backward(&zero).unwrap();
    assert!(back.gradients.data().iter().all(|&g| g == 0.0));
    assert_eq!(back.gradients.shape(), s.activations.shape());
    assert!(server.server_backward(&zero).is_err());
    assert!(server.body().params.bits_eq(&part.body.params));
    let _ = SmashedMsg::new(0, 1, 0, Tensor::zeros(&[1]));
}

#[test]
fn zero_rounds_returns_initial_model() {
    let mut c = tiny();
    c.rounds = 0;
    let out = run_training(&c).unwrap();
    assert!(out.reports.is_empty());
    let (a, b) = (
        out.final_params().unwrap().flatten(),
        out.initial_params.flatten(),
    );
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len());
    assert!(out.prompt.bits_eq(&out.initial_prompt));
    assert_eq!(out.initial_accuracy, out.final_accuracy);
}

#[test]
fn reports_match_the_ledger_and_distribution_bytes() {
    let c = tiny();
    let out = run_training(&c).unwrap();
    let ledger = out.network.ledger();
    let tail = out.partition.tail.scalar_count() as u64;
    let prompt = (c.n_prompts * c.model.d_model) as u64;
    for r in &out.reports {
        assert_eq!(
            r.bytes_up,
            ledger.payload(r.round, sfprompt_core::simnet::Direction::Up)
        );
        let down = ledger.kind_totals(r.round, MessageKind::ModelDown);
        assert_eq!(
            down.payload_bytes,
            (tail + prompt) * 8 * r.selected.len() as u64
        );
        let head = ledger.kind_totals(r.round, MessageKind::HeadBroadcast);
        assert_eq!(
            head.messages,
            if r.round == 1 { c.n_clients as u64 } else { 0 }
        );
        assert_eq!(r.pruned_sizes.len(), r.selected.len());
    }
}

#[test]
fn evaluation_is_order_invariant_and_bounded() {
    let c = cfg();
    let params = build_model(&c, 2).unwrap();
    let part = split_model(&c, &params, SplitSpec { cut1: 1, cut2: 2 }).unwrap();
    let prompt = PromptParams::init(2, 16, 2);
    let test = gen_synthetic(30, &c, 3.0, 2).unwrap();
    let reversed: Vec<usize> = (0..30).rev().collect();
    let a = evaluate(&part, &prompt, &test).unwrap();
    let b = evaluate(&part, &prompt, &test.subset(&reversed).unwrap()).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));

    // a classifier with zero weights and a bias favouring class 2 predicts 2 everywhere
    let mut constant = part.clone();
    let w = constant.tail.params.get_mut("classifier.w").unwrap();
    w.value = Tensor::zeros(w.value.shape());
    let b = constant.tail.params.get_mut("classifier.b").unwrap();
    b.value = Tensor::from_vec(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let balanced = gen_synthetic(40, &c, 3.0, 5).unwrap();
    assert_eq!(evaluate(&constant, &prompt, &balanced).unwrap(), 0.25);
    let logits = model_forward(
        &c,
        &constant.recompose().unwrap(),
        &prompt,
        &balanced.batch(&[0]).unwrap().0,
    )
    .unwrap();
    assert_eq!(logits.value().shape(), &[1, 4]);
}

#[test]
fn dataset_csv_and_checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg();
    let data = gen_synthetic(12, &c, 2.0, 4).unwrap();
    let path = dir.path().join("d.csv");
    write_csv(&data, std::fs::File::create(&path).unwrap()).unwrap();
    let back = read_csv(std::fs::File::open(&path).unwrap(), 4).unwrap();
    assert!(back.bits_eq(&data));

    let params = build_model(&c, 4).unwrap();
    let prompt = PromptParams::init(3, 16, 4);
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::write(&ckpt, &c, &params, &prompt).unwrap();
    let loaded = checkpoint::read(&ckpt).unwrap();
    assert!(loaded.params.bits_eq(&params));
    assert!(loaded.prompt.bits_eq(&prompt));
}

#[test]
fn config_files_load_with_positions() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, r#"{"rounds": 2, "partition": {"kind": "iid"}}"#).unwrap();
    assert_eq!(load_config(&good).unwrap().rounds, 2);
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(load_config(&empty).unwrap(), ExperimentConfig::default());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"rounds\": 2\n  \"seed\": 1\n}").unwrap();
    match load_config(&bad) {
        Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert!(load_config(&dir.path().join("missing.json")).is_err());
}
