use std::collections::BTreeMap;

use l2a_ot::nets::{
    Binding, ClassifierSpec, CriticSpec, CriticWeights, DomainCode, GeneratorSpec, GeneratorWeights,
    TaskClassifierWeights, Weights,
};
use l2a_ot::tensor::{execute, grad_check, GradCheckOptions, Graph, Tensor};
use l2a_ot::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gen_spec(k: usize) -> GeneratorSpec {
    GeneratorSpec {
        image_channels: 3,
        num_domains: k,
        widths: [4, 6, 8],
    }
}

fn classifier_spec(size: usize) -> ClassifierSpec {
    ClassifierSpec {
        image_channels: 3,
        image_size: size,
        width: 8,
        classes: 10,
    }
}

fn critic_spec() -> CriticSpec {
    CriticSpec {
        image_channels: 3,
        widths: [4, 6, 8],
        embed_dim: 64,
        domains: 3,
    }
}

fn run(g: &Graph, x: &Tensor) -> BTreeMap<String, Tensor> {
    execute(g, &BTreeMap::from([("x".to_string(), x.clone())])).unwrap()
}

#[test]
fn generator_code_planes_and_zero_output() {
    let spec = gen_spec(6);
    assert_eq!(spec.input_channels(), 9);
    let gen = GeneratorWeights::init(&spec, 1);
    assert_eq!(gen.params().get("stem.w").unwrap().shape()[1], 9);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3, 16, 16]);
    let mut g = Graph::new();
    let xv = g.input("x", x.shape());
    let codes = vec![DomainCode::new(3, 6).unwrap(), DomainCode::new(5, 6).unwrap()];
    let y = gen.forward(&mut g, &Binding::frozen("g."), xv, &codes).unwrap();
    g.mark_output("y", y);
    let out = run(&g, &x);
    assert_eq!(out["y"].shape(), x.shape());
    assert!(out["y"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn generator_rejects_bad_codes() {
    let gen = GeneratorWeights::init(&gen_spec(4), 1);
    let mut g = Graph::new();
    let xv = g.input("x", &[1, 3, 8, 8]);
    let err = gen
        .forward(&mut g, &Binding::frozen("g."), xv, &[DomainCode::new(0, 3).unwrap()])
        .unwrap_err();
    assert!(matches!(err, Error::DomainCode { .. }));
    assert!(DomainCode::new(4, 4).is_err());
    assert!(gen.forward(&mut g, &Binding::frozen("g."), xv, &[]).is_err());
}

#[test]
fn classifier_shapes_and_determinism() {
    let spec = classifier_spec(32);
    assert_eq!(spec.feature_dim(), 8 * 2 * 2);
    let f = TaskClassifierWeights::init(&spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = random(&mut rng, &[1, 3, 32, 32]);
    let x = Tensor::cat_rows(&[&one, &one]).unwrap();
    let mut g = Graph::new();
    let xv = g.input("x", x.shape());
    let (logits, feats) = f.forward(&mut g, &Binding::frozen("f."), xv).unwrap();
    g.mark_output("logits", logits);
    assert_eq!(g.shape(feats), &[2, 32]);
    let out = run(&g, &x);
    assert_eq!(out["logits"].shape(), &[2, 10]);
    let l = out["logits"].data();
    assert_eq!(&l[..10], &l[10..]);
    assert!(TaskClassifierWeights::init(&classifier_spec(24), 0).is_err());
}

#[test]
fn critic_embeddings() {
    let phi = CriticWeights::init(&critic_spec(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&mut rng, &[1, 3, 16, 16]);
    let b = random(&mut rng, &[1, 3, 16, 16]);
    let x = Tensor::cat_rows(&[&a, &b, &a]).unwrap();
    let mut g = Graph::new();
    let xv = g.input("x", x.shape());
    let e = phi.embed(&mut g, &Binding::frozen("phi."), xv).unwrap();
    g.mark_output("e", e);
    let out = run(&g, &x);
    assert_eq!(out["e"].shape(), &[3, 64]);
    let d = out["e"].data();
    assert_eq!(&d[..64], &d[128..]);
    assert_ne!(&d[..64], &d[64..128]);
}

#[test]
fn input_gradient_through_frozen_critic() {
    let mut phi = CriticWeights::init(&critic_spec(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // nonzero biases keep the relus away from exact ties at zero activations
    for (name, t) in phi.params_mut().iter_mut() {
        if name.ends_with(".b") {
            *t = random(&mut rng, t.shape()).map(|v| 0.1 * v);
        }
    }
    let mut g = Graph::new();
    let xv = g.input_with_grad("x", &[2, 3, 8, 8]);
    let e = phi.embed(&mut g, &Binding::frozen("phi."), xv).unwrap();
    let w = g.constant(random(&mut rng, &[2, 64]));
    let m = g.mul(e, w).unwrap();
    let loss = g.sum(m);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let rep = grad_check(
        &g,
        loss,
        &BTreeMap::from([("x".to_string(), x)]),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passed, "{}", rep.max_rel_error());
    assert_eq!(rep.entries.len(), 1);
}

#[test]
fn initialization_contract() {
    let gs = gen_spec(6);
    let a = GeneratorWeights::init(&gs, 9);
    let b = GeneratorWeights::init(&gs, 9);
    assert!(a.params().bit_eq(b.params()));
    assert!(!a.params().bit_eq(GeneratorWeights::init(&gs, 10).params()));
    assert!(a.params().get("out.w").unwrap().data().iter().all(|&v| v == 0.0));
    let f = TaskClassifierWeights::init(&classifier_spec(16), 9).unwrap();
    let phi = CriticWeights::init(&critic_spec(), 9);
    for (name, t) in f.params().iter().chain(phi.params().iter()) {
        if name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    for (name, t) in a.params().iter() {
        if name.ends_with(".bias") || name == "out.b" {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn weight_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GeneratorWeights::init(&gen_spec(5), 11);
    let f = TaskClassifierWeights::init(&classifier_spec(16), 11).unwrap();
    let phi = CriticWeights::init(&critic_spec(), 11);
    gen.save(dir.path().join("g.l2aw")).unwrap();
    f.save(dir.path().join("f.l2aw")).unwrap();
    phi.save(dir.path().join("phi.l2aw")).unwrap();
    let gen2 = GeneratorWeights::load(dir.path().join("g.l2aw")).unwrap();
    assert!(gen2.params().bit_eq(gen.params()));
    assert_eq!(gen2.spec(), gen.spec());
    let f2 = TaskClassifierWeights::load(dir.path().join("f.l2aw")).unwrap();
    assert_eq!(f2.spec(), f.spec());
    assert!(f2.params().bit_eq(f.params()));
    let phi2 = CriticWeights::load(dir.path().join("phi.l2aw")).unwrap();
    assert!(phi2.params().bit_eq(phi.params()));

    assert!(TaskClassifierWeights::load(dir.path().join("g.l2aw")).is_err());
    let bytes = std::fs::read(dir.path().join("f.l2aw")).unwrap();
    std::fs::write(dir.path().join("cut.l2aw"), &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        TaskClassifierWeights::load(dir.path().join("cut.l2aw")),
        Err(Error::Checksum { .. })
    ));
    let mut bumped = bytes.clone();
    bumped[4] = 9;
    std::fs::write(dir.path().join("v.l2aw"), &bumped).unwrap();
    assert!(matches!(
        TaskClassifierWeights::load(dir.path().join("v.l2aw")),
        Err(Error::Version(9))
    ));
}
