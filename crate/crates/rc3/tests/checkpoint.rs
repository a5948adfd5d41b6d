mod common;

use std::fs;

use rc3::checkpoint::{self, Manifest, BLOB, MANIFEST};
use rc3::Error;
use rc3_core::model::Model;

fn saved() -> (tempfile::TempDir, Model) {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(common::tiny().model, 3).unwrap();
    // values that do not survive a decimal round trip
    m.params_mut().tensors_mut()[0].data_mut()[0] = 0.1 + 0.2;
    m.params_mut().tensors_mut()[0].data_mut()[1] = f64::MIN_POSITIVE / 3.0;
    checkpoint::save(&m, dir.path()).unwrap();
    (dir, m)
}

#[test]
fn round_trip_is_bit_exact() {
    let (dir, m) = saved();
    let back = checkpoint::load(dir.path(), Some(m.config())).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params().names(), m.params().names());
    for (a, b) in back.params().tensors().iter().zip(m.params().tensors()) {
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &rc3_core::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn manifest_lists_names_shapes_offsets() {
    let (dir, m) = saved();
    let man = Manifest::read(dir.path()).unwrap();
    assert_eq!(man.tensor.len(), m.params().len());
    let mut off = 0;
    for (e, (name, t)) in man.tensor.iter().zip(m.params().iter()) {
        assert_eq!((e.name.as_str(), e.shape.as_slice(), e.offset), (name, t.shape(), off));
        off += 8 * t.len() as u64;
    }
    assert_eq!(man.blob_bytes, off);
    assert_eq!(fs::metadata(dir.path().join(BLOB)).unwrap().len(), off);
}

#[test]
fn wrong_config_names_first_tensor() {
    let (dir, m) = saved();
    let mut other = m.config().clone();
    other.vocab_size += 1;
    let err = checkpoint::load(dir.path(), Some(&other)).unwrap_err().to_string();
    let first = err.lines().next().unwrap();
    assert!(first.contains("first mismatch tensor #0: expected tok_emb"), "{err}");
    assert!(err.contains("model.vocab_size"), "{err}");

    // same shapes, different head count
    let mut heads = m.config().clone();
    heads.n_heads = 1;
    let err = checkpoint::load(dir.path(), Some(&heads)).unwrap_err().to_string();
    assert!(err.contains("model.n_heads: expected 1, found 2"), "{err}");
}

#[test]
fn truncated_blob_is_rejected() {
    let (dir, _) = saved();
    let p = dir.path().join(BLOB);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(checkpoint::load(dir.path(), None), Err(Error::Checkpoint(_))));
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint::load(dir.path(), None), Err(Error::Checkpoint(_))));
    // same length, flipped byte
    let mut flipped = bytes.clone();
    flipped[17] ^= 1;
    fs::write(&p, &flipped).unwrap();
    let err = checkpoint::load(dir.path(), None).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    fs::write(&p, &bytes).unwrap();
    assert!(checkpoint::load(dir.path(), None).is_ok());
}

#[test]
fn tampered_manifest_is_rejected() {
    let (dir, _) = saved();
    let p = dir.path().join(MANIFEST);
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, text.replacen("offset = 0\n", "offset = 8\n", 1)).unwrap();
    assert!(matches!(checkpoint::load(dir.path(), None), Err(Error::Checkpoint(_))));
    fs::write(&p, text.replace("rc3-checkpoint", "other")).unwrap();
    assert!(matches!(checkpoint::load(dir.path(), None), Err(Error::Checkpoint(_))));
    fs::write(&p, format!("{text}\nextra = 1\n")).unwrap();
    assert!(checkpoint::load(dir.path(), None).is_err());
}
