use std::path::PathBuf;

use l2a_ot::data::idx::{
    decode_images, decode_labels, encode_images, encode_labels, load_idx_domain, read_images, read_labels,
    write_images, write_labels, IdxImages, IMAGE_MAGIC, LABEL_MAGIC,
};
use l2a_ot::data::{
    apply_domain_transform, generate_glyph_dataset, make_splits, Background, BatchSampler, DomainDataset,
    DomainTransform, GlyphSpec, SplitSpec,
};
use l2a_ot::Error;
use proptest::prelude::*;

fn glyphs(n_per_class: usize, size: usize, seed: u64) -> DomainDataset {
    generate_glyph_dataset(&GlyphSpec {
        n_per_class,
        image_size: size,
        seed,
    })
    .unwrap()
}

#[test]
fn glyph_corpus_shape_and_class_means() {
    let ds = glyphs(50, 16, 3);
    assert_eq!(ds.len(), 500);
    assert_eq!(ds.class_histogram(), [50; 10]);
    assert_eq!(ds.digest(), glyphs(50, 16, 3).digest());
    assert_ne!(ds.digest(), glyphs(50, 16, 4).digest());

    let plane = 3 * 16 * 16;
    let mut means = vec![vec![0.0; plane]; 10];
    for (img, &l) in ds.images().data().chunks(plane).zip(ds.labels()) {
        for (m, v) in means[l].iter_mut().zip(img) {
            *m += v / 50.0;
        }
    }
    for a in 0..10 {
        for b in a + 1..10 {
            let gap: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).abs()).sum();
            assert!(gap > 1.0, "classes {a} and {b}: {gap}");
        }
    }
}

#[test]
fn transforms_identity_and_polarity() {
    let base = glyphs(20, 16, 1);
    let same = apply_domain_transform(&base, &DomainTransform::default(), 2).unwrap();
    assert!(same.images().bit_eq(base.images()));
    assert_eq!(same.domain(), 2);

    let tinted = DomainTransform {
        gain: [0.9, 0.4, 0.2],
        bias: [0.0, 0.1, 0.3],
        background: Background::Checker,
        amplitude: 0.4,
        ..DomainTransform::default()
    };
    let t = apply_domain_transform(&base, &tinted, 1).unwrap();
    let inv = apply_domain_transform(
        &base,
        &DomainTransform {
            invert: true,
            ..tinted.clone()
        },
        1,
    )
    .unwrap();
    for (a, b) in t.images().data().iter().zip(inv.images().data()) {
        assert_eq!(*a, -*b);
    }
    assert_ne!(t.channel_means(), base.channel_means());
}

#[test]
fn cache_round_trip_keeps_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let ds = glyphs(20, 16, 2);
    let path = dir.path().join("d.l2aw");
    ds.save(&path).unwrap();
    let back = DomainDataset::load(&path).unwrap();
    assert!(back.images().bit_eq(ds.images()));
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(back.provenance(), ds.provenance());
    assert_eq!(back.digest(), ds.digest());
}

#[test]
fn stratified_split_example() {
    let ds = glyphs(50, 16, 0);
    let spec = SplitSpec {
        train: 0.9,
        val: 0.1,
        seed: 8,
    };
    let (tr, va) = make_splits(&ds, &spec).unwrap();
    assert_eq!((tr.len(), va.len()), (450, 50));
    assert_eq!(tr.class_histogram(), [45; 10]);
    assert_eq!(va.class_histogram(), [5; 10]);
}

#[test]
fn idx_constants_and_truncation() {
    let img = IdxImages {
        count: 2,
        rows: 3,
        cols: 3,
        pixels: (0..18).collect(),
    };
    let bytes = encode_images(&img).unwrap();
    assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()), IMAGE_MAGIC);
    assert_eq!(&bytes[..4], &[0, 0, 0x08, 0x03]);
    let lbytes = encode_labels(&[1, 2]);
    assert_eq!(u32::from_be_bytes(lbytes[..4].try_into().unwrap()), LABEL_MAGIC);
    assert!(decode_labels(&bytes).is_err());
    assert!(decode_images(&lbytes).is_err());
    match decode_images(&bytes[..bytes.len() - 1]) {
        Err(Error::Truncated { expected, actual }) => assert_eq!((expected, actual), (34, 33)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn idx_domain_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = IdxImages {
        count: 10,
        rows: 8,
        cols: 8,
        pixels: (0..640).map(|i| (i * 7 % 256) as u8).collect(),
    };
    let labels: Vec<u8> = (0..10).collect();
    write_images(dir.path().join("x.idx"), &img).unwrap();
    write_labels(dir.path().join("y.idx"), &labels).unwrap();
    assert_eq!(read_images(dir.path().join("x.idx")).unwrap(), img);
    assert_eq!(read_labels(dir.path().join("y.idx")).unwrap(), labels);
    let ds = load_idx_domain(dir.path().join("x.idx"), dir.path().join("y.idx"), 16, 2).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.image_size(), 16);
    assert_eq!(ds.domain(), 2);
    assert_eq!(ds.labels(), (0..10).collect::<Vec<_>>().as_slice());
}

/// Header check against real MNIST files when `L2A_MNIST_DIR` points at a
/// directory holding `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.
#[test]
fn real_mnist_headers_when_present() {
    let Some(dir) = std::env::var_os("L2A_MNIST_DIR").map(PathBuf::from) else {
        eprintln!("L2A_MNIST_DIR not set, skipping");
        return;
    };
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    if !images.exists() || !labels.exists() {
        eprintln!("no MNIST files in {}, skipping", dir.display());
        return;
    }
    let x = read_images(&images).unwrap();
    let y = read_labels(&labels).unwrap();
    assert_eq!((x.count, x.rows, x.cols), (60000, 28, 28));
    assert_eq!(y.len(), 60000);
    assert!(y.iter().all(|&l| l < 10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn idx_round_trip_is_bit_exact(
        count in 0usize..6, rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()
    ) {
        let mut state = seed;
        let pixels = (0..count * rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as u8
            })
            .collect();
        let img = IdxImages { count, rows, cols, pixels };
        let bytes = encode_images(&img).unwrap();
        prop_assert_eq!(bytes.len(), 16 + count * rows * cols);
        prop_assert_eq!(decode_images(&bytes).unwrap(), img.clone());
        let labels: Vec<u8> = img.pixels.iter().take(count).map(|p| p % 10).collect();
        prop_assert_eq!(decode_labels(&encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn sampler_epochs_partition_indices(n in 2usize..40, half in 1usize..10, seed in any::<u64>()) {
        let batch = (2 * half).min(n - n % 2);
        let mut a = BatchSampler::new(n, batch, seed).unwrap();
        let mut b = BatchSampler::new(n, batch, seed).unwrap();
        let mut seen = Vec::new();
        while seen.len() < n {
            let idx = a.next_indices();
            prop_assert_eq!(&idx, &b.next_indices());
            prop_assert_eq!(idx.len(), batch);
            seen.extend(idx);
        }
        let mut first: Vec<usize> = seen[..n].to_vec();
        first.sort_unstable();
        prop_assert_eq!(first, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn splits_are_stratified_and_repeatable(seed in any::<u64>(), train in 0.5f64..0.9) {
        let ds = glyphs(20, 8, 5);
        let spec = SplitSpec { train, val: 1.0 - train, seed };
        let (tr, va) = make_splits(&ds, &spec).unwrap();
        let total = tr.len() + va.len();
        prop_assert!(total <= ds.len() && total + 10 >= ds.len());
        let ht = tr.class_histogram();
        prop_assert!(ht.iter().all(|&c| c == ht[0]));
        let (tr2, va2) = make_splits(&ds, &spec).unwrap();
        prop_assert_eq!(tr.digest(), tr2.digest());
        prop_assert_eq!(va.digest(), va2.digest());
    }
}
