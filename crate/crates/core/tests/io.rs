mod common;

use std::path::Path;

use g3d_core::io::{
    caption_records, load_annotations, load_embeddings, parse_annotations, write_annotations,
    EmbeddingFile, EmbeddingRecord,
};
use g3d_core::Error;
use proptest::prelude::*;

#[test]
fn fixture_reserializes_byte_for_byte() {
    let path = common::fixtures().join("lca/embeddings.embf");
    let bytes = std::fs::read(&path).unwrap();
    let f = load_embeddings(&path).unwrap();
    assert_eq!(f.dim, 8);
    assert_eq!(f.len(), 4);
    assert_eq!(f.to_bytes(), bytes);
}

#[test]
fn empty_and_corrupt_files() {
    let p = Path::new("e.embf");
    let empty = EmbeddingFile::new(16);
    let back = EmbeddingFile::from_bytes(&empty.to_bytes(), p).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.dim, 16);

    let mut bad = empty.to_bytes();
    bad[0] = b'X';
    assert!(matches!(
        EmbeddingFile::from_bytes(&bad, p),
        Err(Error::Format { .. })
    ));

    let full = std::fs::read(common::fixtures().join("lca/embeddings.embf")).unwrap();
    for cut in [3, 15, 40, full.len() - 1] {
        let err = EmbeddingFile::from_bytes(&full[..cut], p)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("truncated") || err.contains("magic"),
            "{cut}: {err}"
        );
    }
}

#[test]
fn dimension_mismatch_is_a_format_error() {
    let path = common::fixtures().join("lca/embeddings.embf");
    let f = load_embeddings(&path).unwrap();
    assert!(matches!(
        f.expect_dim(512, &path),
        Err(Error::Format { .. })
    ));
    f.expect_dim(8, &path).unwrap();
}

#[test]
fn annotations_round_trip_and_empty_file() {
    let src = common::fixtures().join("eval/annotations.jsonl");
    let recs = load_annotations(&src).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.jsonl");
    write_annotations(&out, &recs).unwrap();
    assert_eq!(load_annotations(&out).unwrap(), recs);
    assert!(parse_annotations("", Path::new("x")).unwrap().is_empty());
}

#[test]
fn annotation_errors_name_the_field() {
    let line = std::fs::read_to_string(common::fixtures().join("eval/annotations.jsonl")).unwrap();
    let first = line.lines().next().unwrap();
    let flipped = first.replace("[500.0,150.0,620.0,230.0]", "[620.0,150.0,500.0,230.0]");
    match parse_annotations(&format!("\n{flipped}\n"), Path::new("a.jsonl")) {
        Err(Error::Validation { record, field, .. }) => {
            assert_eq!((record, field), (2, "gt_box2d"));
        }
        other => panic!("{other:?}"),
    }
    let dup = format!("{first}\n{first}\n");
    assert!(matches!(
        parse_annotations(&dup, Path::new("a.jsonl")),
        Err(Error::Validation {
            field: "sample_id",
            ..
        })
    ));
}

#[test]
fn captions_must_match_embedded_tokens() {
    let anns = load_annotations(&common::fixtures().join("lca/annotations.jsonl")).unwrap();
    let emb = load_embeddings(&common::fixtures().join("lca/embeddings.embf")).unwrap();
    assert_eq!(caption_records(&anns, &emb).unwrap().len(), 4);

    let mut other = anns.clone();
    other[1].caption = "a white van".into();
    assert!(caption_records(&other, &emb).is_err());
    other[1].sample_id = "missing".into();
    assert!(matches!(
        caption_records(&other, &emb),
        Err(Error::UnmatchedIds { .. })
    ));
}

fn record_strategy(dim: usize) -> impl Strategy<Value = EmbeddingRecord> {
    prop::collection::vec("[a-z]{1,8}|\\PC{1,3}", 0..6).prop_flat_map(move |tokens| {
        let n = tokens.len();
        (
            Just(tokens),
            prop::collection::vec(-10.0f32..10.0, n * dim),
            prop::collection::vec(-10.0f32..10.0, dim),
        )
            .prop_map(|(tokens, words, region)| EmbeddingRecord {
                tokens,
                words,
                region,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_round_trip(records in prop::collection::vec(record_strategy(3), 0..5)) {
        let mut f = EmbeddingFile::new(3);
        for (i, r) in records.into_iter().enumerate() {
            f.insert(format!("s{i}"), r).unwrap();
        }
        let bytes = f.to_bytes();
        let back = EmbeddingFile::from_bytes(&bytes, Path::new("p")).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
