use super::checkpoint::{decode, encode};
use super::*;
use crate::attention::KvPolicy;
use rand::{Rng, SeedableRng};

fn tiny(placement: Placement, n_layers: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        placement,
        attention: AttentionConfig { d_model, n_heads: 4, n_mobius_heads: 2, ..AttentionConfig::default() },
        ..ModelConfig::default()
    }
}

#[test]
fn placement_expansion() {
    use LayerKind::{MobiusMixed as M, Vanilla as V};
    assert_eq!(Placement::Framed.expand(4, M).unwrap(), vec![M, V, V, M]);
    assert_eq!(Placement::Framed.expand(1, M).unwrap(), vec![M]);
    assert_eq!(Placement::Top.expand(3, M).unwrap(), vec![M, V, V]);
    assert_eq!(Placement::Stacked.expand(4, M).unwrap(), vec![M, M, V, V]);
    assert_eq!(Placement::Alternating.expand(8, M).unwrap(), vec![M, V, V, M, V, V, M, V]);
    assert_eq!(Placement::Custom.expand(2, M), None);
    for l in 3..10 {
        let k = Placement::Framed.expand(l, M).unwrap();
        assert!(k[0] == M && k[l - 1] == M && k[1..l - 1].iter().all(|&x| x == V));
    }
    let custom = ModelConfig { placement: Placement::Custom, n_layers: 2, layers: vec![V], ..ModelConfig::default() };
    assert!(matches!(custom.validate(), Err(Error::Config(_))));
}

#[test]
fn complex_input_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tok = Tensor::new(&[10, 4], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let pos = Tensor::new(&[6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ids = [3, 0, 9, 3];

    let zero = build_complex_input(&ids, &tok, &Tensor::zeros(&[6, 4])).unwrap();
    assert!(zero.im().data().iter().all(|&v| v == 0.0));

    let rho = build_complex_input(&ids, &tok, &pos).unwrap();
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..4 {
            assert_eq!(rho.at(&[i, j]), (tok.at(&[id, j]), pos.at(&[i, j])));
        }
    }
    assert!(matches!(build_complex_input(&[10], &tok, &pos), Err(Error::OutOfVocab { id: 10, vocab: 10 })));
    assert!(matches!(build_complex_input(&[0; 7], &tok, &pos), Err(Error::SequenceTooLong { len: 7, max: 6 })));
}

#[test]
fn last_layer_input_and_collapse() {
    let prev = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let toks = Tensor::new(&[2, 2], vec![0.5, -0.5, 0.25, 0.0]).unwrap();
    let c = build_last_layer_input(&prev, &toks).unwrap();
    assert_eq!(c.shape(), &[2, 2]);
    assert_eq!(c.im(), &toks);
    assert!(build_last_layer_input(&prev, &Tensor::zeros(&[2, 3])).is_err());

    assert_eq!(collapse_to_real(&ComplexTensor::from_real(prev.clone())), prev);
    let neg = ComplexTensor::new(prev.clone(), prev.map(|x| -x)).unwrap();
    assert!(collapse_to_real(&neg).data().iter().all(|&v| v == 0.0));
}

#[test]
fn logits_shape_for_every_preset() {
    for placement in [Placement::Framed, Placement::Top, Placement::Stacked, Placement::Alternating, Placement::Vanilla] {
        for mobius_layer in [LayerKind::MobiusMixed, LayerKind::MobiusDual] {
            let cfg = ModelConfig { mobius_layer, ..tiny(placement, 4, 16) };
            let m = Model::new(cfg).unwrap();
            assert_eq!(m.forward(&[1, 2, 3, 4, 5]).unwrap().shape(), &[5, 32]);
            assert_eq!(m.forward_batch(&[1, 2, 3, 4, 5, 6], 2, 3).unwrap().shape(), &[2, 3, 32]);
        }
    }
}

#[test]
fn rotary_and_untied_variants_run() {
    let mut cfg = tiny(Placement::Framed, 3, 16);
    cfg.attention.positional = PositionalPolicy::Rotary;
    cfg.tie_embeddings = false;
    let m = Model::new(cfg).unwrap();
    assert!(!m.params.contains("embeddings.position"));
    assert!(m.params.contains("mlm.decoder.weight"));
    assert_eq!(m.forward(&[1, 2, 3]).unwrap().shape(), &[3, 32]);
}

#[test]
fn vanilla_model_without_positions_is_permutation_equivariant() {
    let mut m = Model::new(tiny(Placement::Vanilla, 2, 16)).unwrap();
    *m.params.get_mut("embeddings.position").unwrap() = Tensor::zeros(&[16, 16]);
    let ids = [4, 9, 1, 30, 7, 12];
    let perm = [2, 0, 5, 1, 4, 3];
    let base = m.forward(&ids).unwrap();
    let permuted: Vec<usize> = perm.iter().map(|&p| ids[p]).collect();
    let out = m.forward(&permuted).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for v in 0..32 {
            assert!((out.at(&[i, v]) - base.at(&[p, v])).abs() < 1e-9);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let a = Model::new(tiny(Placement::Framed, 3, 16)).unwrap();
    let b = Model::new(tiny(Placement::Framed, 3, 16)).unwrap();
    let ids = [1, 5, 2, 8];
    assert_eq!(a.forward(&ids).unwrap(), b.forward(&ids).unwrap());
    let other = Model::new(ModelConfig { seed: 3, ..tiny(Placement::Framed, 3, 16) }).unwrap();
    assert_ne!(a.forward(&ids).unwrap(), other.forward(&ids).unwrap());
}

#[test]
fn forward_errors() {
    let m = Model::new(tiny(Placement::Framed, 2, 16)).unwrap();
    assert!(matches!(m.forward(&[32]), Err(Error::OutOfVocab { .. })));
    assert!(matches!(m.forward(&[0; 17]), Err(Error::SequenceTooLong { len: 17, max: 16 })));
}

#[test]
fn complex_parameters_count_twice() {
    let mut store = ParamStore::new();
    let dh = 8;
    let head = MobiusHeadParams::identity(dh);
    head.write_to(&mut store, "h");
    let key: usize = ["h.key_re", "h.key_im"].iter().map(|n| store.get(n).unwrap().numel()).sum();
    assert_eq!(key, 16);

    let mut store = ParamStore::new();
    MobiusHeadParams::identity(4).write_to(&mut store, "h");
    let query: usize =
        store.iter().filter(|(n, _)| ["a_", "b_", "c_", "d_"].iter().any(|c| n.starts_with(&format!("h.{c}")))).map(|(_, t)| t.numel()).sum();
    assert_eq!(query, 32);
}

// Hand enumeration for d = 16, vocab 32, max_seq_len 16, 4 heads of width 4.
const D: usize = 16;
const EMB: usize = 32 * D + 16 * D;
const FFN: usize = D * 4 * D + 4 * D + 4 * D * D + D;
const TAIL: usize = (D * D + D) + 2 * D + FFN + 2 * D;
const VANILLA_LAYER: usize = 3 * (D * D + D) + TAIL;
const MOBIUS_HEAD: usize = 4 * 2 * 4 + 2 * 2 * 4;
const MIXED_LAYER: usize = 2 * D + 3 * (D * 8 + 8) + 2 * MOBIUS_HEAD + TAIL;
const MLM: usize = (D * D + D) + 2 * D + 32;

#[test]
fn parameter_counts_match_hand_enumeration() {
    let vanilla = Model::new(tiny(Placement::Vanilla, 2, D)).unwrap().count_parameters();
    assert_eq!(vanilla.total, EMB + 2 * D + 2 * VANILLA_LAYER + MLM);
    assert_eq!(vanilla.total, 7696);
    let framed = Model::new(tiny(Placement::Framed, 2, D)).unwrap().count_parameters();
    assert_eq!(framed.per_module["layers.0"], MIXED_LAYER);
    assert_eq!(framed.total, EMB + 2 * MIXED_LAYER + MLM);
    assert_eq!(framed.total, 7104);
}

#[test]
fn parameter_counts_on_every_preset() {
    for d in [16, 32] {
        let dh = d / 4;
        let ffn = d * 4 * d + 4 * d + 4 * d * d + d;
        let tail = (d * d + d) + 2 * d + ffn + 2 * d;
        let head = 12 * dh;
        let vanilla = 3 * (d * d + d) + tail;
        let mixed = 2 * d + 3 * (d * 2 * dh + 2 * dh) + 2 * head + tail;
        let dual = 2 * d + 4 * head + 2 * (d * d + d) + 2 * ffn + 4 * d;
        for placement in [Placement::Framed, Placement::Top, Placement::Stacked, Placement::Alternating, Placement::Vanilla] {
            for (mobius_layer, mob) in [(LayerKind::MobiusMixed, mixed), (LayerKind::MobiusDual, dual)] {
                let cfg = ModelConfig { mobius_layer, ..tiny(placement, 6, d) };
                let kinds = cfg.layer_kinds().unwrap();
                let mut want = 32 * d + 16 * d + (d * d + d) + 2 * d + 32;
                if kinds[0] == LayerKind::Vanilla {
                    want += 2 * d;
                }
                want += kinds.iter().map(|k| if k.is_mobius() { mob } else { vanilla }).sum::<usize>();
                assert_eq!(Model::new(cfg).unwrap().count_parameters().total, want, "{placement} {d}");
            }
        }
    }
}

#[test]
fn framed_costs_less_than_an_extra_vanilla_layer() {
    for d in [16, 32] {
        for l in [3, 4] {
            let framed = Model::new(tiny(Placement::Framed, l, d)).unwrap().count_parameters().total;
            let vanilla = Model::new(tiny(Placement::Vanilla, l + 1, d)).unwrap().count_parameters().total;
            assert!(framed < vanilla);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = tiny(Placement::Framed, 3, 16);
    cfg.attention.kv = KvPolicy::Full;
    cfg.attention.pole_eps = 1.0 / 3.0 * 1e-8;
    let m = Model::new(cfg).unwrap();
    let opt = OptimizerState {
        step: 5,
        m: m.params.clone(),
        v: {
            let mut v = m.params.clone();
            v.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x = x.abs()));
            v
        },
    };
    let bytes = encode(&m, 42, Some(&opt)).unwrap();
    let back = decode(&bytes).unwrap();
    assert_eq!(back.model, m);
    assert_eq!(back.step, 42);
    assert_eq!(back.optimizer.as_ref(), Some(&opt));
    assert_eq!(encode(&back.model, back.step, back.optimizer.as_ref()).unwrap(), bytes);
    let ids = [3, 1, 4, 1, 5];
    assert_eq!(back.model.forward(&ids).unwrap(), m.forward(&ids).unwrap());

    let plain = encode(&m, 0, None).unwrap();
    assert_eq!(decode(&plain).unwrap().optimizer, None);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let m = Model::new(tiny(Placement::Framed, 2, 16)).unwrap();
    let bytes = encode(&m, 0, None).unwrap();
    for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::CorruptFile(_))), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode(&longer), Err(Error::CorruptFile(_))));
    let mut wrong = bytes.clone();
    wrong[8] = 9;
    assert!(matches!(decode(&wrong), Err(Error::VersionMismatch { found: 9, expected: 1 })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(decode(&magic), Err(Error::CorruptFile(_))));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::new(tiny(Placement::Top, 2, 16)).unwrap();
    save_checkpoint(&path, &m, 7, None).unwrap();
    let first = std::fs::read(&path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    save_checkpoint(&path, &back.model, back.step, None).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn config_text_round_trip() {
    let mut cfg = tiny(Placement::Custom, 3, 16);
    cfg.layers = vec![LayerKind::MobiusDual, LayerKind::Vanilla, LayerKind::MobiusMixed];
    cfg.attention.dropout = 0.1;
    let text = crate::config::render_kv(&cfg);
    let mut back = ModelConfig::default();
    crate::config::apply_kv(&text, &mut [&mut back]).unwrap();
    assert_eq!(back, cfg);
}
