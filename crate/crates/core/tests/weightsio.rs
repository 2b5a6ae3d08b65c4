use markovdt::markovlab::{attention_concentration_probe, markov_stats, ProbeConfig, DEFAULT_EPS};
use markovdt::numkernel::{seeded, Tensor};
use markovdt::seqmodel::{ModelConfig, PolicyModel};
use markovdt::weightsio::{
    init_from_archive, load_archive, load_checkpoint, save_archive, save_checkpoint, synth_markov_head,
    synth_markov_head_scaled, DType, MapEntry, Mapping, Truncation, WeightArchive,
};

fn sample_archive() -> WeightArchive {
    let mut rng = seeded(1);
    let mut a = WeightArchive::new("synthetic");
    a.push("alpha", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
    a.push("beta", Tensor::randn(&[7], 1.0, &mut rng)).unwrap();
    a.push("gamma", Tensor::randn(&[2, 2, 2], 1.0, &mut rng)).unwrap();
    a
}

fn header_json(bytes: &[u8]) -> (serde_json::Value, usize) {
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    (serde_json::from_slice(&bytes[16..16 + n]).unwrap(), 16 + n)
}

fn with_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let (mut h, end) = header_json(bytes);
    edit(&mut h);
    let text = serde_json::to_vec(&h).unwrap();
    let mut out = b"MHWV0001".to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[end..]);
    out
}

#[test]
fn round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mhw");
    let a = sample_archive();
    save_archive(&a, &path).unwrap();
    let b = load_archive(&path).unwrap();
    assert_eq!(b.provenance, "synthetic");
    assert_eq!(a.len(), b.len());
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(x.name, y.name);
        assert!(x.tensor.bitwise_eq(&y.tensor));
    }
    assert_eq!(std::fs::read(&path).unwrap(), b.to_bytes().unwrap());
}

#[test]
fn empty_archive_is_valid() {
    let a = WeightArchive::new("nothing");
    let b = WeightArchive::from_bytes(&a.to_bytes().unwrap(), "mem").unwrap();
    assert!(b.is_empty());
}

#[test]
fn single_precision_is_widened() {
    let mut a = WeightArchive::new("gpt2-small");
    let t = Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.0e-3, 7.0]).unwrap();
    a.push_as("layer0.head0.wq", t.clone(), DType::F32).unwrap();
    let bytes = a.to_bytes().unwrap();
    assert_eq!(bytes.len(), header_json(&bytes).1 + 16);
    let b = WeightArchive::from_bytes(&bytes, "mem").unwrap();
    let got = b.get("layer0.head0.wq").unwrap();
    for (g, w) in got.data().iter().zip(t.data()) {
        assert_eq!(*g, f64::from(*w as f32));
    }
}

#[test]
fn truncated_file_is_rejected() {
    let bytes = sample_archive().to_bytes().unwrap();
    for cut in [0, 5, 12, 20, bytes.len() - 1] {
        let err = WeightArchive::from_bytes(&bytes[..cut], "cut").unwrap_err();
        assert!(err.to_string().contains("cut"), "{err}");
    }
}

#[test]
fn bad_magic_and_versions_are_rejected() {
    let mut bytes = sample_archive().to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(WeightArchive::from_bytes(&bytes, "m").unwrap_err().to_string().contains("magic"));
    let mut bytes = sample_archive().to_bytes().unwrap();
    bytes[7] = b'2';
    assert!(WeightArchive::from_bytes(&bytes, "m").unwrap_err().to_string().contains("version"));
    let bytes = sample_archive().to_bytes().unwrap();
    let edited = with_header(&bytes, |h| h["version"] = 2.into());
    assert!(WeightArchive::from_bytes(&edited, "m").unwrap_err().to_string().contains("version"));
}

#[test]
fn corrupt_directories_are_rejected() {
    let bytes = sample_archive().to_bytes().unwrap();
    let dup = with_header(&bytes, |h| h["tensors"][1]["name"] = "alpha".into());
    assert!(WeightArchive::from_bytes(&dup, "m").unwrap_err().to_string().contains("duplicate"));
    let overlap = with_header(&bytes, |h| h["tensors"][1]["offset"] = 8.into());
    assert!(WeightArchive::from_bytes(&overlap, "m").is_err());
    let size = with_header(&bytes, |h| h["tensors"][0]["nbytes"] = 8.into());
    assert!(WeightArchive::from_bytes(&size, "m").is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(WeightArchive::from_bytes(&trailing, "m").is_err());
    let garbage = with_header(&bytes, |h| h["extra"] = 1.into());
    assert!(WeightArchive::from_bytes(&garbage, "m").is_err());
    let mut a = WeightArchive::new("x");
    a.push("t", Tensor::zeros(&[1])).unwrap();
    assert!(a.push("t", Tensor::zeros(&[1])).is_err());
}

#[test]
fn synthetic_head_passes_detector_and_repeats() {
    let h = synth_markov_head(64, 8, 20.0, 0).unwrap();
    assert_eq!(h.wq.shape(), &[64, 8]);
    let a = h.wq.matmul(&h.wk.transpose()).unwrap();
    assert!(markov_stats(&a, 20.0, DEFAULT_EPS).unwrap().is_markov);
    let again = synth_markov_head(64, 8, 20.0, 0).unwrap();
    assert!(again.wq.bitwise_eq(&h.wq) && again.wk.bitwise_eq(&h.wk));
    let other = synth_markov_head(64, 8, 20.0, 1).unwrap();
    assert!(!other.wq.bitwise_eq(&h.wq));

    let cfg = ProbeConfig {
        k: 20,
        d_k: 8,
        n_samples: 2000,
        seed: 0,
    };
    assert!(attention_concentration_probe(&a, &cfg).unwrap() > 1.0 / 20.0);
}

#[test]
fn synthetic_heads_across_shapes_and_levels() {
    for (d, dk) in [(4, 1), (8, 2), (16, 4), (16, 16), (64, 8), (64, 64)] {
        for r in [2.0, 20.0, 50.0] {
            let h = synth_markov_head_scaled(d, dk, r, 2.5, 3).unwrap();
            let a = h.wq.matmul(&h.wk.transpose()).unwrap();
            assert!(markov_stats(&a, r, DEFAULT_EPS).unwrap().is_markov, "d {d} dk {dk} r {r}");
        }
    }
    assert!(synth_markov_head(8, 9, 20.0, 0).is_err());
    assert!(synth_markov_head(8, 2, 1.0, 0).is_err());
}

fn model() -> PolicyModel {
    PolicyModel::new(ModelConfig::default(), 4).unwrap()
}

#[test]
fn empty_mapping_changes_nothing() {
    let mut m = model();
    let before = m.clone();
    let written = init_from_archive(&mut m, &sample_archive(), &Mapping::default()).unwrap();
    assert!(written.is_empty());
    assert_eq!(m, before);
}

#[test]
fn mapped_synthetic_pair_is_detected() {
    let mut m = model();
    let h = synth_markov_head(16, 4, 20.0, 5).unwrap();
    let mut a = WeightArchive::new("synthetic");
    a.push("q", h.wq).unwrap();
    a.push("k", h.wk).unwrap();
    let mapping = Mapping::parse(
        r#"
[[map]]
from = "q"
to = "layer0.head1.wq"

[[map]]
from = "k"
to = "layer0.head1.wk"
"#,
    )
    .unwrap();
    init_from_archive(&mut m, &a, &mapping).unwrap();
    let s = markov_stats(&m.qk_product(0, 1).unwrap(), 20.0, DEFAULT_EPS).unwrap();
    assert!(s.is_markov);
}

#[test]
fn mapping_rules_are_enforced() {
    let mut m = model();
    let before = m.clone();
    let mut rng = seeded(6);
    let mut a = WeightArchive::new("gpt2-small");
    a.push("big", Tensor::randn(&[32, 8], 1.0, &mut rng)).unwrap();
    a.push("fit", Tensor::randn(&[16, 4], 1.0, &mut rng)).unwrap();

    let entry = |from: &str, to: &str, truncate| MapEntry {
        from: from.into(),
        to: to.into(),
        truncate,
    };
    let bad_shape = Mapping {
        map: vec![entry("fit", "layer0.head0.wv", None), entry("big", "layer0.head0.wq", None)],
    };
    assert!(init_from_archive(&mut m, &a, &bad_shape).is_err());
    assert_eq!(m, before, "failed mapping must not partially apply");

    let embed = Mapping {
        map: vec![entry("fit", "embed.state.w", None)],
    };
    assert!(init_from_archive(&mut m, &a, &embed).is_err());
    let head = Mapping {
        map: vec![entry("big", "action_head.w", Some(Truncation::Leading))],
    };
    assert!(init_from_archive(&mut m, &a, &head).is_err());
    let missing = Mapping {
        map: vec![entry("nope", "layer0.head0.wq", None)],
    };
    assert!(init_from_archive(&mut m, &a, &missing).is_err());

    let truncated = Mapping {
        map: vec![entry("big", "layer0.head0.wq", Some(Truncation::Leading))],
    };
    init_from_archive(&mut m, &a, &truncated).unwrap();
    let got = m.params().get("layer0.head0.wq").unwrap();
    assert!(got.bitwise_eq(&a.get("big").unwrap().leading_block(16, 4).unwrap()));

    assert!(Mapping::parse("[[map]]\nfrom = \"a\"\nto = \"b\"\ntruncate = \"trailing\"\n").is_err());
    assert!(Mapping::parse("[[map]]\nfrom = \"a\"\nto = \"b\"\nextra = 1\n").is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.mhw");
    let mut m = model();
    m.set_state_normalization(&[0.5, -1.0], &[2.0, 0.25]).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let plain = dir.path().join("plain.mhw");
    save_archive(&sample_archive(), &plain).unwrap();
    assert!(load_checkpoint(&plain).is_err());
}

#[test]
fn head_names_parse_and_pair() {
    use markovdt::weightsio::{archive_qk_products, parse_head_name};
    assert_eq!(parse_head_name("layer0.head11.wq"), Some((0, 11, "wq")));
    assert_eq!(parse_head_name("layer3.head2.wv"), Some((3, 2, "wv")));
    assert_eq!(parse_head_name("layer+1.head2.wq"), None);
    assert_eq!(parse_head_name("embed.state.w"), None);

    let mut rng = markovdt::numkernel::seeded(0);
    let mut ar = WeightArchive::new("synthetic");
    let q = Tensor::randn(&[6, 2], 1.0, &mut rng);
    let k = Tensor::randn(&[6, 2], 1.0, &mut rng);
    ar.push("layer1.head0.wq", q.clone()).unwrap();
    ar.push("layer1.head0.wk", k.clone()).unwrap();
    ar.push("layer0.head3.wk", k.clone()).unwrap();
    ar.push("layer0.head3.wq", k.clone()).unwrap();
    ar.push("layer0.head3.wv", q.clone()).unwrap();
    let products = archive_qk_products(&ar, None).unwrap();
    assert_eq!(products.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 3), (1, 0)]);
    assert!(products[1].2.bitwise_eq(&q.matmul(&k.transpose()).unwrap()));
    assert_eq!(archive_qk_products(&ar, Some(1)).unwrap().len(), 1);
    assert!(archive_qk_products(&ar, Some(2)).is_err());

    ar.push("layer2.head0.wq", q).unwrap();
    assert!(archive_qk_products(&ar, None).is_err());
}
