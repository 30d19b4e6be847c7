//! Weight files: magic `SSAR1`, a length-prefixed text descriptor of the
//! architecture and preprocessing, then each parameter in declaration
//! order as name, extents, and raw little-endian f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{NormMode, PipelineConfig};
use crate::nn::Param;
use crate::tensor::Tensor;

use super::{AgeModel, BackboneConfig, ModelError, ModelKind, ModelResult};

const MAGIC: &[u8; 5] = b"SSAR1";

/// Everything needed to rebuild a model and reproduce its preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    /// Sequence pool window (slice-sequence model only; 0 for the 3D net).
    pub pool_k: usize,
    /// LSTM hidden width per direction (0 for the 3D net).
    pub hidden: usize,
    pub pipeline: PipelineConfig,
}

impl ModelDescriptor {
    /// Fixed-order `key=value` lines.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let widths = b
            .stage_widths
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "model={}\nin_channels={}\nstem_channels={}\nstem_kernel={}\nstem_stride={}\n\
             stem_pool={}\nstage_widths={widths}\nblocks_per_stage={}\npool_k={}\nhidden={}\n\
             axis={}\nn_slices={}\ntarget_h={}\ntarget_w={}\nnormalize_by={}\n",
            self.kind.label(),
            b.in_channels,
            b.stem_channels,
            b.stem_kernel,
            b.stem_stride,
            b.stem_pool as u8,
            b.blocks_per_stage,
            self.pool_k,
            self.hidden,
            self.pipeline.axis,
            self.pipeline.n_slices,
            self.pipeline.target[0],
            self.pipeline.target[1],
            self.pipeline.normalize_by.label(),
        )
    }

    /// Strict parse: every key required exactly once, nothing else allowed.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("descriptor line without '=': {line:?}"))?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("duplicate descriptor key {k:?}"));
            }
        }
        const KEYS: [&str; 15] = [
            "model",
            "in_channels",
            "stem_channels",
            "stem_kernel",
            "stem_stride",
            "stem_pool",
            "stage_widths",
            "blocks_per_stage",
            "pool_k",
            "hidden",
            "axis",
            "n_slices",
            "target_h",
            "target_w",
            "normalize_by",
        ];
        for k in KEYS {
            if !map.contains_key(k) {
                return Err(format!("descriptor missing key {k:?}"));
            }
        }
        for k in map.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(format!("unknown descriptor key {k:?}"));
            }
        }
        let get = |k: &str| map.get(k).expect("presence checked").as_str();
        let num = |k: &str| -> Result<usize, String> {
            get(k).parse().map_err(|_| format!("bad {k}: {:?}", get(k)))
        };
        let kind = ModelKind::parse(get("model")).map_err(|e| e.to_string())?;
        let stage_widths = get("stage_widths")
            .split(',')
            .map(|s| s.parse().map_err(|_| format!("bad stage_widths: {s:?}")))
            .collect::<Result<Vec<usize>, _>>()?;
        let stem_pool = match get("stem_pool") {
            "0" => false,
            "1" => true,
            other => return Err(format!("bad stem_pool: {other:?}")),
        };
        Ok(ModelDescriptor {
            kind,
            backbone: BackboneConfig {
                in_channels: num("in_channels")?,
                stem_channels: num("stem_channels")?,
                stem_kernel: num("stem_kernel")?,
                stem_stride: num("stem_stride")?,
                stem_pool,
                stage_widths,
                blocks_per_stage: num("blocks_per_stage")?,
            },
            pool_k: num("pool_k")?,
            hidden: num("hidden")?,
            pipeline: PipelineConfig {
                axis: num("axis")?,
                n_slices: num("n_slices")?,
                target: [num("target_h")?, num("target_w")?],
                normalize_by: NormMode::parse(get("normalize_by")).map_err(|e| e.to_string())?,
            },
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> ModelError {
    ModelError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Serializes the descriptor and parameters to `path`.
pub fn save_weights(
    path: &Path,
    desc: &ModelDescriptor,
    params: &[&Param<f32>],
) -> ModelResult<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let text = desc.to_text();
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        let name = p.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.value().shape();
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> ModelResult<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("truncated while reading {what} at byte {}", self.at),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> ModelResult<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads a weight file back as its descriptor and named tensors.
pub fn load_weights(path: &Path) -> ModelResult<(ModelDescriptor, Vec<(String, Tensor<f32>)>)> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        at: 0,
    };
    if c.take(5, "magic")? != MAGIC {
        return Err(format_err(path, "bad magic: not a weight file"));
    }
    let desc_len = c.u64("descriptor length")? as usize;
    let text = std::str::from_utf8(c.take(desc_len, "descriptor")?)
        .map_err(|_| format_err(path, "descriptor is not UTF-8"))?;
    let desc = ModelDescriptor::parse(text).map_err(|e| format_err(path, e))?;
    let count = c.u64("parameter count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = c.u64("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| format_err(path, format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let rank = c.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| format_err(path, format!("parameter {name}: {e}")))?;
        out.push((name, tensor));
    }
    if c.at != bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes after last parameter", bytes.len() - c.at),
        ));
    }
    Ok((desc, out))
}

/// Copies loaded tensors into a constructed model, requiring identical
/// parameter names, order, and shapes. All differences are listed.
pub fn load_into(model: &mut dyn AgeModel<f32>, loaded: &[(String, Tensor<f32>)]) -> ModelResult<()> {
    let mut params = model.params_mut();
    let mut diffs = Vec::new();
    if params.len() != loaded.len() {
        diffs.push(format!(
            "parameter count {} in file vs {} in model",
            loaded.len(),
            params.len()
        ));
    }
    for (p, (name, tensor)) in params.iter().zip(loaded) {
        if p.name() != name {
            diffs.push(format!("name order: file has {name:?}, model has {:?}", p.name()));
        } else if p.value().shape() != tensor.shape() {
            diffs.push(format!(
                "{name}: file shape {:?}, model shape {:?}",
                tensor.shape(),
                p.value().shape()
            ));
        }
    }
    if !diffs.is_empty() {
        return Err(ModelError::Mismatch {
            detail: diffs.join("; "),
        });
    }
    for (p, (_, tensor)) in params.iter_mut().zip(loaded) {
        p.set_value(tensor.clone())?;
    }
    Ok(())
}

/// Rebuilds the saved model: descriptor, fresh construction, weights in.
pub fn load_model(path: &Path) -> ModelResult<(ModelDescriptor, Box<dyn AgeModel<f32>>)> {
    let (desc, loaded) = load_weights(path)?;
    let mut model = super::build_model(&desc, 0)?;
    load_into(model.as_mut(), &loaded)?;
    Ok((desc, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{param_count, SliceSeqAgeNet};
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mini_desc(n_slices: usize) -> ModelDescriptor {
        ModelDescriptor {
            kind: ModelKind::SliceSeq,
            backbone: BackboneConfig {
                in_channels: 1,
                stem_channels: 4,
                stem_kernel: 3,
                stem_stride: 2,
                stem_pool: false,
                stage_widths: vec![4, 8],
                blocks_per_stage: 1,
            },
            pool_k: 2,
            hidden: 3,
            pipeline: PipelineConfig {
                axis: 2,
                n_slices,
                target: [8, 8],
                normalize_by: NormMode::Std,
            },
        }
    }

    fn slices(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[1, 8, 8], |_| r.gen_range(-1.0f32..1.0)))
            .collect()
    }

    #[test]
    fn descriptor_text_round_trips() {
        let d = mini_desc(6);
        let parsed = ModelDescriptor::parse(&d.to_text()).unwrap();
        assert_eq!(d, parsed);
        let full = ModelDescriptor {
            kind: ModelKind::Vol3d,
            backbone: BackboneConfig::resnet18_3d(),
            pool_k: 0,
            hidden: 0,
            pipeline: PipelineConfig::default(),
        };
        assert_eq!(full, ModelDescriptor::parse(&full.to_text()).unwrap());
    }

    #[test]
    fn descriptor_rejects_unknown_and_missing_keys() {
        let d = mini_desc(6);
        let text = d.to_text();
        assert!(ModelDescriptor::parse(&format!("{text}extra=1\n"))
            .unwrap_err()
            .contains("unknown"));
        let trimmed: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(ModelDescriptor::parse(&trimmed).unwrap_err().contains("missing"));
    }

    #[test]
    fn save_load_save_is_byte_identical_and_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let desc = mini_desc(6);
        let model = super::super::build_model(&desc, 17).unwrap();
        let path_a = dir.path().join("a.ssar");
        save_weights(&path_a, &desc, &model.params()).unwrap();

        let (desc_back, reloaded) = load_model(&path_a).unwrap();
        assert_eq!(desc, desc_back);
        assert_eq!(
            param_count(&model.params()),
            param_count(&reloaded.params())
        );

        let path_b = dir.path().join("b.ssar");
        save_weights(&path_b, &desc_back, &reloaded.params()).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );

        let input = slices(6, 3);
        let ga = Graph::new();
        let gb = Graph::new();
        let ya = model.predict(&ga, &input).unwrap().value().data().to_vec();
        let yb = reloaded.predict(&gb, &input).unwrap().value().data().to_vec();
        assert_eq!(ya, yb, "round trip must not change predictions");
    }

    #[test]
    fn loading_into_a_different_sequence_length_lists_the_shape_diff() {
        let dir = tempfile::tempdir().unwrap();
        let desc = mini_desc(6);
        let model = super::super::build_model(&desc, 17).unwrap();
        let path = dir.path().join("w.ssar");
        save_weights(&path, &desc, &model.params()).unwrap();

        let (_, loaded) = load_weights(&path).unwrap();
        let mut other = SliceSeqAgeNet::<f32>::new(
            &desc.backbone,
            4,
            desc.pool_k,
            desc.hidden,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let err = load_into(&mut other, &loaded).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head.w"), "{msg}");
        assert!(msg.contains("[1, 18]") && msg.contains("[1, 12]"), "{msg}");
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let desc = mini_desc(6);
        let model = super::super::build_model(&desc, 1).unwrap();
        let path = dir.path().join("w.ssar");
        save_weights(&path, &desc, &model.params()).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("t.ssar");
        std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_weights(&truncated)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        let mut garbled = bytes.clone();
        garbled[0] = b'X';
        let bad_magic = dir.path().join("m.ssar");
        std::fs::write(&bad_magic, &garbled).unwrap();
        assert!(load_weights(&bad_magic)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }
}
