//! Checkpoints: `<stem>.bin` parameter blob plus a `<stem>.toml` sidecar.
//!
//! Blob layout (little endian): magic `MATEKD01`, u32 tensor count, then
//! per tensor: u32 name length, name bytes, u32 rows, u32 cols, and
//! `rows·cols` f64 values. Values widen losslessly from f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, HeadKind, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"MATEKD01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub head: HeadKind,
    pub scalar: String,
    pub vocab_hash: String,
    pub step: usize,
    pub dev_metric: Option<f64>,
    pub params_hash: String,
    pub config: EncoderConfig,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("toml"))
}

pub fn save_checkpoint<S: Scalar>(
    model: &Encoder<S>,
    vocab: &Vocabulary,
    step: usize,
    dev_metric: Option<f64>,
    stem: &Path,
) -> Result<CheckpointMeta> {
    model.check_vocab(vocab)?;
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (bin, side) = paths(stem);
    let params = model.params();
    let mut blob = Vec::with_capacity(16 + params.num_scalars() * 8);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        blob.extend_from_slice(&(name.len() as u32).to_le_bytes());
        blob.extend_from_slice(name.as_bytes());
        blob.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        blob.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &x in t.data() {
            blob.extend_from_slice(&x.f64().to_le_bytes());
        }
    }
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let meta = CheckpointMeta {
        head: model.head(),
        scalar: S::NAME.to_string(),
        vocab_hash: vocab.hash(),
        step,
        dev_metric,
        params_hash: params.hash(),
        config: model.config().clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

pub fn read_meta(stem: &Path) -> Result<CheckpointMeta> {
    let (_, side) = paths(stem);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: side,
        msg: e.to_string(),
    })
}

/// Loads a checkpoint, refusing one written against another vocabulary.
pub fn load_checkpoint<S: Scalar>(
    stem: &Path,
    vocab: &Vocabulary,
) -> Result<(Encoder<S>, CheckpointMeta)> {
    let meta = read_meta(stem)?;
    if meta.vocab_hash != vocab.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "vocabulary hash {} does not match checkpoint {}",
            vocab.hash(),
            meta.vocab_hash
        )));
    }
    if meta.config.vocab_size != vocab.len() {
        return Err(Error::CheckpointMismatch(
            "config vocab_size differs from vocabulary".into(),
        ));
    }
    let (bin, _) = paths(stem);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let params = decode_blob::<S>(&bytes).map_err(|msg| Error::Parse {
        path: bin.clone(),
        msg,
    })?;
    let model = Encoder::from_params(meta.config.clone(), meta.head, params)?;
    Ok((model, meta))
}

fn decode_blob<S: Scalar>(bytes: &[u8]) -> std::result::Result<ParamStore<S>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("truncated checkpoint blob")?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| "parameter name is not UTF-8")?;
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.push(name, Tensor::from_vec(rows, cols, data));
    }
    if pos != bytes.len() {
        return Err("trailing bytes after parameters".into());
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Example;
    use crate::vocab::encode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_logits_and_records_config() {
        let vocab = Vocabulary::from_content((0..10).map(|i| format!("t{i}"))).unwrap();
        let cfg = EncoderConfig::student(vocab.len(), 10, 2);
        let model =
            Encoder::<f32>::new(cfg, HeadKind::Classifier, &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt/student");
        save_checkpoint(&model, &vocab, 17, Some(0.5), &stem).unwrap();
        let (back, meta) = load_checkpoint::<f32>(&stem, &vocab).unwrap();
        assert_eq!(meta.config.num_layers, model.config().num_layers);
        assert_eq!(meta.step, 17);
        assert_eq!(back.params().hash(), model.params().hash());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probes: Vec<_> = (0..16)
            .map(|_| {
                use rand::Rng;
                let n = rng.gen_range(1..8);
                let text: Vec<String> = (0..n)
                    .map(|_| format!("t{}", rng.gen_range(0..10)))
                    .collect();
                encode(&Example::single(&text.join(" "), 0), &vocab, 10)
            })
            .collect();
        let (a, b) = (
            model.logits(&probes).unwrap(),
            back.logits(&probes).unwrap(),
        );
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn wrong_vocab_hash_is_rejected() {
        let vocab = Vocabulary::from_content(["a", "b"]).unwrap();
        let other = Vocabulary::from_content(["a", "c"]).unwrap();
        let model = Encoder::<f64>::new(
            EncoderConfig::generator(vocab.len(), 6),
            HeadKind::MaskedLm,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("g");
        save_checkpoint(&model, &vocab, 0, None, &stem).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&stem, &other),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let vocab = Vocabulary::from_content(["a", "b"]).unwrap();
        let model = Encoder::<f64>::new(
            EncoderConfig::student(vocab.len(), 6, 2),
            HeadKind::Classifier,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("s");
        save_checkpoint(&model, &vocab, 0, None, &stem).unwrap();
        let side = stem.with_extension("toml");
        let text = fs::read_to_string(&side)
            .unwrap()
            .replace("num_layers = 2", "num_layers = 3");
        fs::write(&side, text).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&stem, &vocab),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
