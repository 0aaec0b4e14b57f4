use std::fs;
use std::path::PathBuf;

use emphasis::corpus::parse_corpus;
use emphasis::embedding_io::{read_emb, validate_alignment, write_emb};
use emphasis::model::{build_model, checkpoint_to_bytes, load_checkpoint, save_checkpoint};
use emphasis::{Checkpoint, EmbeddingFile, Error, HeadKind, InstanceEmbeddings, ModelConfig};
use ndarray::array;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn emb_fixture_from_independent_writer() {
    let bytes = fs::read(fixture("tiny.emb")).unwrap();
    // magic + dim + tag_len + "fixture" + count + token_count + 3*4 floats
    assert_eq!(bytes.len(), 4 + 4 + 4 + 7 + 4 + 4 + 12 * 4);
    let ef = read_emb(bytes.as_slice()).unwrap();
    assert_eq!((ef.dim(), ef.len(), ef.source_tag()), (4, 1, "fixture"));
    let expected = array![[0.25f32, -0.25, 0.25, -0.25], [0.5, -0.5, 0.5, -0.5], [0.75, -0.75, 0.75, -0.75]];
    assert_eq!(ef.instances()[0].vectors(), expected.view());

    let mut rewritten = Vec::new();
    write_emb(&ef, &mut rewritten).unwrap();
    assert_eq!(rewritten, bytes);

    let corpus = parse_corpus(fs::read(fixture("tiny.tsv")).unwrap().as_slice(), "fixture").unwrap();
    validate_alignment(&corpus, &ef).unwrap();
    assert_eq!(corpus.instances()[0].id(), "s1");
}

#[test]
fn emb_truncation_is_reported() {
    let bytes = fs::read(fixture("tiny.emb")).unwrap();
    for cut in [3, 10, 20, bytes.len() - 1] {
        let err = read_emb(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(err, Error::Truncated { .. } | Error::Format { .. }),
            "cut at {cut}: {err}"
        );
    }
}

fn sample_checkpoint(head: HeadKind, adapter: bool) -> Checkpoint {
    let mut cfg = ModelConfig::new(head, 4);
    cfg.hidden_units = 3;
    cfg.dense_units = 5;
    cfg.adapter = adapter;
    cfg.seed = 42;
    cfg.lr = 0.01;
    Checkpoint {
        model: build_model(&cfg).unwrap(),
        best_epoch: 7,
        dev_match_average: 0.6125,
        source_tag: "fixture".into(),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for head in [HeadKind::BiLstm, HeadKind::Dense] {
        for adapter in [false, true] {
            let ckpt = sample_checkpoint(head, adapter);
            let bytes = checkpoint_to_bytes(&ckpt).unwrap();
            assert_eq!(&bytes[..4], b"CKP1");
            let back = load_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);

            let ef = read_emb(fs::read(fixture("tiny.emb")).unwrap().as_slice()).unwrap();
            assert_eq!(back.model.predict_file(&ef).unwrap(), ckpt.model.predict_file(&ef).unwrap());
        }
    }
}

#[test]
fn checkpoint_header_is_readable_text() {
    let bytes = checkpoint_to_bytes(&sample_checkpoint(HeadKind::Dense, false)).unwrap();
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[8..8 + header_len]).unwrap();
    for line in ["head=dense", "best_epoch=7", "source_tag=fixture", "tensor=hidden.weight 5x4"] {
        assert!(header.lines().any(|l| l == line), "missing `{line}` in\n{header}");
    }
}

#[test]
fn checkpoint_corruption() {
    let bytes = checkpoint_to_bytes(&sample_checkpoint(HeadKind::BiLstm, false)).unwrap();
    for cut in [0, 2, 6, 20, bytes.len() - 8, bytes.len() - 1] {
        assert!(load_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(load_checkpoint(extra.as_slice()).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(load_checkpoint(bad_magic.as_slice()).is_err());
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(matches!(load_checkpoint(nan.as_slice()), Err(Error::NonFinite(_))));
}

#[test]
fn predicting_with_the_wrong_dimension_fails() {
    let ckpt = sample_checkpoint(HeadKind::BiLstm, false);
    let ef = EmbeddingFile::new(3, "other", vec![InstanceEmbeddings::new(ndarray::Array2::zeros((2, 3))).unwrap()])
        .unwrap();
    assert!(matches!(
        ckpt.model.predict_file(&ef),
        Err(Error::DimensionMismatch { expected: 4, found: 3 })
    ));
}

#[test]
fn saving_to_a_writer_matches_bytes() {
    let ckpt = sample_checkpoint(HeadKind::Dense, true);
    let mut buf = Vec::new();
    save_checkpoint(&ckpt, &mut buf).unwrap();
    assert_eq!(buf, checkpoint_to_bytes(&ckpt).unwrap());
}
