use liparch::blocks::Activation;
use liparch::fixtures::{gpt2_like, random_post_ln, TransformerDims};
use liparch::seed::gaussian_matrix;
use liparch::weights::{payload_path, validate_weights, WeightFile};
use liparch::{Block, Matrix, Seed};
use sha2::{Digest, Sha256};

fn hash(path: &std::path::Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn gpt2_members(count: usize) -> Vec<Block> {
    let stack = gpt2_like(&TransformerDims::small(8), count, 1.0, Seed::new(1, 0)).unwrap();
    stack.layers().into_iter().cloned().collect()
}

#[test]
fn gpt2_like_file_round_trips_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gpt2.json");
    let blocks = gpt2_members(12);
    WeightFile::from_blocks(&blocks, 4).unwrap().save(&path).unwrap();
    let (m0, p0) = (hash(&path), hash(&payload_path(&path)));

    let loaded = WeightFile::load(&path).unwrap();
    assert_eq!(loaded.blocks().unwrap(), blocks);
    let again = dir.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(hash(&again), m0);
    assert_eq!(hash(&payload_path(&again)), p0);

    let report = validate_weights(&path).unwrap();
    assert_eq!(report.blocks, 13);
    assert!(report.manifest_round_trip && report.payload_round_trip);
}

#[test]
fn every_storable_kind_round_trips() {
    use liparch::blocks::{Head, LayerNorm, Mlp2, SelfAttention};
    let g = |r, c, s| gaussian_matrix(r, c, 1.0, &mut Seed::new(s, 0).rng());
    let blocks = vec![
        Block::linear(g(4, 4, 1)).unwrap(),
        Block::Mlp2(Mlp2::new(g(4, 6, 2), g(6, 4, 3), Activation::Sigmoid).unwrap()),
        Block::LayerNorm(LayerNorm::new(g(1, 4, 4), g(1, 4, 5), 1e-3).unwrap()),
        Block::SelfAttention(SelfAttention::new(Head::new(g(4, 2, 6), g(4, 2, 7), g(4, 4, 8)).unwrap()).unwrap()),
        random_post_ln(&TransformerDims::small(4), 0.5, Activation::Tanh, Seed::new(9, 0)).unwrap(),
    ];
    let wf = WeightFile::from_blocks(&blocks, 3).unwrap();
    let back = WeightFile::from_bytes(&wf.manifest_bytes(), wf.payload.clone()).unwrap();
    assert_eq!(back.blocks().unwrap(), blocks);
    assert_eq!(back.seq_len().unwrap(), Some(3));
}

#[test]
fn wrapper_blocks_cannot_be_stored() {
    let r = Block::residual(Block::identity(2), 1.0);
    assert!(WeightFile::from_blocks(&[r], 1).is_err());
}

#[test]
fn role_shape_mismatch_names_the_tensor() {
    let wf = WeightFile::from_blocks(&[Block::linear(Matrix::identity(3)).unwrap()], 1).unwrap();
    let mut m = wf.manifest.clone();
    m.blocks[0].dims.n = 2;
    let bad = WeightFile::new(m, wf.payload.clone()).unwrap();
    let err = bad.blocks().unwrap_err().to_string();
    assert!(err.contains("blocks.0.w"), "{err}");
}

#[test]
fn missing_and_unknown_roles_are_errors() {
    let wf = WeightFile::from_blocks(&[Block::linear(Matrix::identity(2)).unwrap()], 1).unwrap();
    let mut m = wf.manifest.clone();
    m.blocks[0].params.insert("extra".into(), "blocks.0.w".into());
    assert!(WeightFile::new(m, wf.payload.clone()).unwrap().blocks().is_err());
    let mut m = wf.manifest.clone();
    m.blocks[0].params.clear();
    assert!(WeightFile::new(m, wf.payload.clone()).unwrap().blocks().is_err());
}

#[test]
fn validation_of_missing_file_is_an_io_error() {
    let err = validate_weights(std::path::Path::new("/nonexistent/w.json")).unwrap_err();
    assert!(matches!(err, liparch::Error::Io(_)));
}

#[test]
fn tensor_values_are_bit_exact() {
    let m = Matrix::from_rows(&[&[0.1, -0.0, f64::MIN_POSITIVE], &[1e308, -1e-308, 1.0 / 3.0]]);
    let wf = WeightFile::from_blocks(&[Block::linear(m.pad(3, 3).unwrap()).unwrap()], 1).unwrap();
    let back = wf.tensor("blocks.0.w").unwrap();
    for (a, b) in back.as_slice().iter().zip(m.pad(3, 3).unwrap().as_slice()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
