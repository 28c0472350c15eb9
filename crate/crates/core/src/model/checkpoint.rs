//! Binary checkpoint format (all integers and reals little-endian):
//!
//! ```text
//! offset  size   field
//! 0       8      magic "ADVDCKPT"
//! 8       4      format version (u32)
//! 12      1      backbone code (0 tiny-cnn, 1 resnet18, 2 resnet50)
//! 13      1      task (0 classifier, 1 segmenter)
//! 14      1      backbone_frozen
//! 15      1      reserved (0)
//! 16      4      num_classes K (u32)
//! 20      4      feature_dim D (u32)
//! 24      4      input_size (u32)
//! 28      4      channels C (u32)
//! 32      8C     NormSpec mean (f64)
//! 32+8C   8C     NormSpec std (f64)
//! ..      4      metadata length M (u32)
//! ..      M      metadata JSON: backbone spec, train config, ignore value
//! ..      4KD    head weight, row-major (f32)
//! ..      4K     head bias (f32)
//! ..      1      backbone storage: 0 = by reference, 1 = embedded
//!                  0: u32 length + UTF-8 name "seeded:<seed>"
//!                  1: u64 count + count f32 parameters
//! ```
//!
//! Tiny-cnn weights are always embedded. ResNet weights are referenced by
//! their initialization seed unless they were overwritten.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierModel, LinearHead, SegmenterModel, TrainConfig};
use crate::binio::{put_f32s, put_f64s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::nn::{Backbone, BackboneId, BackboneSpec};
use crate::pipeline::NormSpec;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bytes before the NormSpec block.
pub const FIXED_HEADER_LEN: usize = 32;

const TASK_CLASSIFIER: u8 = 0;
const TASK_SEGMENTER: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    backbone: BackboneSpec,
    train_config: Option<TrainConfig>,
    #[serde(default)]
    ignore_value: Option<u32>,
}

struct Parts<'a> {
    task: u8,
    backbone: &'a Backbone,
    head: &'a LinearHead,
    frozen: bool,
    norm: &'a NormSpec,
    input_size: usize,
    meta: Meta,
}

fn encode(p: &Parts<'_>) -> std::io::Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&[p.backbone.id().code(), p.task, u8::from(p.frozen), 0]);
    put_u32(&mut out, p.head.num_classes)?;
    put_u32(&mut out, p.head.feature_dim)?;
    put_u32(&mut out, p.input_size)?;
    put_u32(&mut out, p.norm.channels())?;
    put_f64s(&mut out, &p.norm.mean)?;
    put_f64s(&mut out, &p.norm.std)?;
    let meta = serde_json::to_vec(&p.meta)?;
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    put_f32s(&mut out, &p.head.weight)?;
    put_f32s(&mut out, &p.head.bias)?;
    match (p.backbone.id(), p.backbone.init_seed()) {
        (BackboneId::Resnet18 | BackboneId::Resnet50, Some(seed)) => {
            let name = format!("seeded:{seed}");
            out.push(0);
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
        }
        _ => {
            let params = p.backbone.params();
            out.push(1);
            out.extend_from_slice(&(params.len() as u64).to_le_bytes());
            put_f32s(&mut out, &params)?;
        }
    }
    Ok(out)
}

struct Decoded {
    task: u8,
    backbone: Backbone,
    head: LinearHead,
    frozen: bool,
    norm: NormSpec,
    input_size: usize,
    meta: Meta,
}

fn decode(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let io = |e: std::io::Error| e.to_string();
    let mut r = Reader::new(bytes);
    if r.bytes(8).map_err(io)? != CHECKPOINT_MAGIC {
        return Err("bad magic; not a checkpoint file".into());
    }
    let version = r.u32().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let code = r.u8().map_err(io)?;
    let id = BackboneId::from_code(code).ok_or_else(|| format!("unknown backbone code {code}"))?;
    let task = r.u8().map_err(io)?;
    if task > TASK_SEGMENTER {
        return Err(format!("unknown task code {task}"));
    }
    let frozen = r.u8().map_err(io)? != 0;
    r.u8().map_err(io)?;
    let k = r.u32().map_err(io)? as usize;
    let d = r.u32().map_err(io)? as usize;
    let input_size = r.u32().map_err(io)? as usize;
    let c = r.u32().map_err(io)? as usize;
    if c > 64 {
        return Err(format!("implausible channel count {c}"));
    }
    let mean = r.f64s(c).map_err(io)?;
    let std = r.f64s(c).map_err(io)?;
    let norm = NormSpec::new(mean, std).map_err(|e| e.to_string())?;
    let meta_len = r.u32().map_err(io)? as usize;
    let meta: Meta = serde_json::from_slice(&r.bytes(meta_len).map_err(io)?).map_err(|e| format!("metadata: {e}"))?;
    if meta.backbone.id != id {
        return Err(format!(
            "header declares backbone {id} but metadata describes {}",
            meta.backbone.id
        ));
    }
    if meta.backbone.feature_dim != d {
        return Err(format!("head width D={d} does not match backbone feature_dim {}", meta.backbone.feature_dim));
    }
    let weight = r.f32s(k.checked_mul(d).ok_or("head size overflow")?).map_err(io)?;
    let bias = r.f32s(k).map_err(io)?;
    let head = LinearHead {
        num_classes: k,
        feature_dim: d,
        weight,
        bias,
    };
    let backbone = match r.u8().map_err(io)? {
        0 => {
            let len = r.u32().map_err(io)? as usize;
            let name = String::from_utf8(r.bytes(len).map_err(io)?).map_err(|_| "backbone name is not UTF-8")?;
            let seed = name
                .strip_prefix("seeded:")
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| format!("unresolvable backbone reference {name:?}"))?;
            Backbone::new(meta.backbone.clone(), seed).map_err(|e| e.to_string())?
        }
        1 => {
            let n = r.u64().map_err(io)? as usize;
            let mut b = Backbone::new(meta.backbone.clone(), 0).map_err(|e| e.to_string())?;
            if n != b.param_count() {
                return Err(format!("embedded backbone has {n} parameters, expected {}", b.param_count()));
            }
            b.set_params(&r.f32s(n).map_err(io)?).map_err(|e| e.to_string())?;
            b
        }
        m => return Err(format!("unknown backbone storage mode {m}")),
    };
    if !r.at_end().map_err(io)? {
        return Err("trailing bytes after backbone section".into());
    }
    Ok(Decoded {
        task,
        backbone,
        head,
        frozen,
        norm,
        input_size,
        meta,
    })
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
        expected_version: CHECKPOINT_VERSION,
    }
}

fn write(path: &Path, parts: &Parts<'_>) -> Result<()> {
    let bytes = encode(parts).map_err(|e| ckpt_err(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path, want_task: u8) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = decode(&bytes).map_err(|r| ckpt_err(path, r))?;
    if d.task != want_task {
        let kind = |t| if t == TASK_CLASSIFIER { "classifier" } else { "segmenter" };
        return Err(ckpt_err(path, format!("file holds a {} but a {} was requested", kind(d.task), kind(want_task))));
    }
    Ok(d)
}

pub fn save_checkpoint(model: &ClassifierModel, path: impl AsRef<Path>) -> Result<()> {
    write(
        path.as_ref(),
        &Parts {
            task: TASK_CLASSIFIER,
            backbone: &model.backbone,
            head: &model.head,
            frozen: model.backbone_frozen,
            norm: &model.norm,
            input_size: model.input_size,
            meta: Meta {
                backbone: model.backbone.spec().clone(),
                train_config: model.train_config.clone(),
                ignore_value: None,
            },
        },
    )
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let d = read(path.as_ref(), TASK_CLASSIFIER)?;
    Ok(ClassifierModel {
        backbone: d.backbone.into(),
        head: d.head,
        backbone_frozen: d.frozen,
        norm: d.norm,
        input_size: d.input_size,
        train_config: d.meta.train_config,
    })
}

pub fn save_segmenter_checkpoint(model: &SegmenterModel, path: impl AsRef<Path>) -> Result<()> {
    write(
        path.as_ref(),
        &Parts {
            task: TASK_SEGMENTER,
            backbone: &model.backbone,
            head: &model.head,
            frozen: model.backbone_frozen,
            norm: &model.norm,
            input_size: model.input_size,
            meta: Meta {
                backbone: model.backbone.spec().clone(),
                train_config: model.train_config.clone(),
                ignore_value: Some(model.ignore_value),
            },
        },
    )
}

pub fn load_segmenter_checkpoint(path: impl AsRef<Path>) -> Result<SegmenterModel> {
    let path = path.as_ref();
    let d = read(path, TASK_SEGMENTER)?;
    if d.backbone.output_stride() != 1 {
        return Err(ckpt_err(path, "segmenter checkpoint with a strided backbone"));
    }
    Ok(SegmenterModel {
        backbone: d.backbone.into(),
        head: d.head,
        backbone_frozen: d.frozen,
        norm: d.norm,
        input_size: d.input_size,
        ignore_value: d.meta.ignore_value.unwrap_or(crate::metrics::DEFAULT_IGNORE),
        train_config: d.meta.train_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TensorImage;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn tiny(k: usize, d: usize) -> ClassifierModel {
        let b = Backbone::new(BackboneSpec::tiny_cnn(3, [4, 6], d), 3).unwrap();
        ClassifierModel::new(b, k, 8, NormSpec::default(), 4).unwrap()
    }

    fn random_input(seed: u64, size: usize) -> TensorImage {
        let mut rng = rng_from_seed(seed);
        let data = (0..3 * size * size).map(|_| rng.random::<f64>()).collect();
        TensorImage::from_unit(3, size, size, data, NormSpec::default()).unwrap().normalize().unwrap()
    }

    #[test]
    fn round_trip_reproduces_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = tiny(102, 16);
        // Perturb the head away from its f32-exact init.
        let mut sgd = super::super::SgdMomentum::new(&m.head, 0.01, 0.9);
        let (_, gw, gb, _) = super::super::head_gradient(&m.head, &vec![0.3; 16], 5);
        sgd.step(&mut m.head, &gw, &gb);
        m.train_config = Some(TrainConfig::default());
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.train_config, m.train_config);
        assert_eq!(back.norm, m.norm);
        assert_eq!(back.backbone.checksum(), m.backbone.checksum());
        let mut worst = 0.0f64;
        for s in 0..10 {
            let x = random_input(s, 8);
            let (a, _) = m.forward(&x).unwrap();
            let (b, _) = back.forward(&x).unwrap();
            a.iter().zip(&b).for_each(|(p, q)| worst = worst.max((p - q).abs()));
        }
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn resnet_is_stored_by_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let b = Backbone::new(BackboneSpec::resnet18(), 21).unwrap();
        let m = ClassifierModel::new(b, 2, 32, NormSpec::default(), 1).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert!(len < 10_000, "weights should not be embedded: {len}");
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.backbone.checksum(), m.backbone.checksum());
    }

    #[test]
    fn byte_size_follows_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let m = tiny(2, 16);
        save_checkpoint(&m, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let c = 3;
        let meta_off = FIXED_HEADER_LEN + 2 * 8 * c;
        let meta_len = u32::from_le_bytes(bytes[meta_off..meta_off + 4].try_into().unwrap()) as usize;
        let head_reals = 2 * 16 + 2;
        // tiny-cnn 3->4->6->16, 3x3 kernels with bias
        let backbone_reals = (3 * 9 * 4 + 4) + (4 * 9 * 6 + 6) + (6 * 9 * 16 + 16);
        assert_eq!(m.backbone.param_count(), backbone_reals);
        let expect = meta_off + 4 + meta_len + 4 * head_reals + 1 + 8 + 4 * backbone_reals;
        assert_eq!(bytes.len(), expect);
    }

    #[test]
    fn rejects_mismatched_backbone_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        save_checkpoint(&tiny(2, 16), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[12] = BackboneId::Resnet18.code();
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint { reason, expected_version, .. }) => {
                assert!(reason.contains("resnet18"), "{reason}");
                assert_eq!(expected_version, CHECKPOINT_VERSION);
            }
            other => panic!("unexpected {other:?}"),
        }
        bytes[12] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn rejects_version_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&tiny(2, 16), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("expected format version 1"), "{msg}");

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));

        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn task_kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let b = Backbone::new(BackboneSpec::tiny_cnn(3, [4, 6], 8), 3).unwrap();
        let mut seg = SegmenterModel::new(b, 3, 8, NormSpec::default(), 4).unwrap();
        seg.ignore_value = 254;
        save_segmenter_checkpoint(&seg, &path).unwrap();
        assert!(load_checkpoint(&path).is_err());
        let back = load_segmenter_checkpoint(&path).unwrap();
        assert_eq!(back.ignore_value, 254);
        assert_eq!(back.head, seg.head);
    }
}
