use std::fs;

use proptest::prelude::*;
use rapf::store::{encoded_len, load_store, make_synthetic, save_store, ClassEntry, SynthSpec};
use rapf::{ClassCatalog, EmbeddingStore, LabeledEmbedding, RapfError, Split};

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32;
    v.into_iter().map(|x| x / n).collect()
}

fn basis_catalog(dim: usize, k: usize) -> ClassCatalog {
    let entries = (0..k)
        .map(|c| {
            let mut t = vec![0.0f32; dim];
            t[c % dim] = 1.0;
            ClassEntry {
                name: format!("class {c}"),
                text: t,
            }
        })
        .collect();
    ClassCatalog::new(dim, entries).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let store = make_synthetic(&SynthSpec {
        train_per_class: 7,
        test_per_class: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let (a, b) = (dir.path().join("a.emb"), dir.path().join("b.emb"));
    save_store(&store, &a).unwrap();
    let loaded = load_store(&a).unwrap();
    assert_eq!(loaded, store);
    save_store(&loaded, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn minimal_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = basis_catalog(4, 2);
    let records = (0..6)
        .map(|i| LabeledEmbedding {
            class_id: i % 2,
            split: if i < 4 { Split::Train } else { Split::Test },
            vector: vec![i as f32, 1.0, -2.0, 0.5],
        })
        .collect();
    let store = EmbeddingStore::new(catalog, records).unwrap();
    let path = dir.path().join("tiny.emb");
    save_store(&store, &path).unwrap();
    let back = load_store(&path).unwrap();
    assert_eq!(back.catalog().len(), 2);
    assert_eq!(back.records().len(), 6);
}

fn size_check(records: usize) {
    const DIM: usize = 512;
    let dir = tempfile::tempdir().unwrap();
    let catalog = basis_catalog(DIM, 10);
    let catalog_bytes: u64 = catalog
        .entries()
        .iter()
        .map(|e| 2 + e.name.len() as u64 + 4 * DIM as u64)
        .sum();
    let records = (0..records)
        .map(|i| LabeledEmbedding {
            class_id: (i % 10) as u32,
            split: Split::Train,
            vector: vec![i as f32; DIM],
        })
        .collect::<Vec<_>>();
    let n = records.len() as u64;
    let store = EmbeddingStore::new(catalog, records).unwrap();
    let path = dir.path().join("big.emb");
    save_store(&store, &path).unwrap();
    let expected = (8 + 4 + 4 + 4) + catalog_bytes + 8 + n * (4 + 1 + 512 * 4);
    assert_eq!(fs::metadata(&path).unwrap().len(), expected);
    assert_eq!(encoded_len(&store), expected);
}

#[test]
fn file_size_follows_layout() {
    size_check(10_000);
}

#[test]
#[ignore = "writes ~200 MB"]
fn file_size_follows_layout_at_full_scale() {
    size_check(100_000);
}

#[test]
fn missing_file_reports_path() {
    let err = load_store("/nonexistent/dir/x.emb").unwrap_err();
    match err {
        RapfError::Io { path, .. } => assert!(path.ends_with("x.emb")),
        other => panic!("unexpected {other:?}"),
    }
}

fn arb_store() -> impl Strategy<Value = EmbeddingStore> {
    (2usize..6, 1usize..4).prop_flat_map(|(dim, k)| {
        let texts = proptest::collection::vec(
            proptest::collection::vec(-1.0f32..1.0, dim)
                .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f32>() > 1e-2),
            k,
        );
        let records = proptest::collection::vec(
            (
                0..k as u32,
                any::<bool>(),
                proptest::collection::vec(-1e3f32..1e3, dim),
            ),
            0..20,
        );
        (texts, records).prop_map(move |(texts, records)| {
            let entries = texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| ClassEntry {
                    name: format!("c{i}é"),
                    text: unit(t),
                })
                .collect();
            let records = records
                .into_iter()
                .map(|(class_id, test, vector)| LabeledEmbedding {
                    class_id,
                    split: if test { Split::Test } else { Split::Train },
                    vector,
                })
                .collect();
            EmbeddingStore::new(ClassCatalog::new(dim, entries).unwrap(), records).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_exact(store in arb_store()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.emb");
        save_store(&store, &path).unwrap();
        prop_assert_eq!(fs::metadata(&path).unwrap().len(), encoded_len(&store));
        let back = load_store(&path).unwrap();
        for (a, b) in back.records().iter().zip(store.records()) {
            prop_assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back, store);
    }
}
