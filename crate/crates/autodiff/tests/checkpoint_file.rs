use autodiff::checkpoint::Checkpoint;
use autodiff::{ParamStore, Tensor};

#[test]
fn save_and_load_through_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codec.ckpt");
    let mut p = ParamStore::<f32>::new();
    let w = p.add("w", Tensor::from_vec([1, 1, 2, 2], vec![0.1, 0.2, 0.3, f32::MIN_POSITIVE]).unwrap());
    Checkpoint::new(serde_json::json!({"n": 3}), p.clone()).save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back.params.get(w), p.get(w));
    assert_eq!(back.manifest["n"], 3);
}
