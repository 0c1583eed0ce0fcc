//! RNNCKPT1 checkpoint format.
//!
//! ```text
//! RNNCKPT1
//! config <sha256 of the spec line payload>
//! spec <ModelSpec as JSON>
//! params <count>
//! <name> f32 <dims...>        (count lines)
//! data
//! <raw little-endian f32 tensors, concatenated in record order>
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{ArchitectureRegistry, Model, ModelSpec};
use super::NnError;
use crate::io::{f32_le_bytes, parse_field, read_f32_le, FormatError, HeaderReader};

pub const MAGIC: &str = "RNNCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<NamedTensor>,
}

pub fn config_hash(spec_json: &str) -> String {
    Sha256::digest(spec_json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            spec: model.spec().clone(),
            tensors: model
                .state()
                .into_iter()
                .map(|(name, dims, data)| NamedTensor {
                    name,
                    dims,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model; tensor names and sizes must match the spec.
    pub fn to_model(&self, registry: &ArchitectureRegistry) -> Result<Model<f32>, NnError> {
        let mut model = Model::<f32>::new(&self.spec, registry, 0)?;
        let slots = model.state_mut();
        if slots.len() != self.tensors.len() {
            return Err(NnError::ArchitectureMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                slots.len()
            )));
        }
        for ((name, dst), src) in slots.into_iter().zip(&self.tensors) {
            if name != src.name || dst.len() != src.data.len() {
                return Err(NnError::ArchitectureMismatch(format!(
                    "tensor `{}` ({} values) does not match model slot `{name}` ({} values)",
                    src.name,
                    src.data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&src.data);
        }
        Ok(model)
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.spec.to_json())
    }

    pub fn encode(&self) -> Vec<u8> {
        let spec = self.spec.to_json();
        let mut head = format!(
            "{MAGIC}\nconfig {}\nspec {spec}\nparams {}\n",
            config_hash(&spec),
            self.tensors.len()
        );
        for t in &self.tensors {
            head.push_str(&t.name);
            head.push_str(" f32");
            for d in &t.dims {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for t in &self.tensors {
            out.extend_from_slice(&f32_le_bytes(&t.data));
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = HeaderReader::new(buf);
        r.expect(MAGIC)?;
        let (hoff, f) = r.keyed("config")?;
        let hash = match f.as_slice() {
            [h] => h.to_string(),
            _ => return Err(FormatError::parse(hoff, "expected a single config hash")),
        };
        let soff = r.offset();
        let line = r.line()?;
        let json = line
            .strip_prefix("spec ")
            .ok_or_else(|| FormatError::parse(soff, "expected `spec` line"))?;
        if config_hash(json) != hash {
            return Err(FormatError::parse(hoff, "config hash does not match spec"));
        }
        let spec: ModelSpec =
            serde_json::from_str(json).map_err(|e| FormatError::parse(soff, format!("bad spec: {e}")))?;
        let (poff, f) = r.keyed("params")?;
        let count: usize = match f.as_slice() {
            [c] => parse_field(poff, c, "parameter count")?,
            _ => return Err(FormatError::parse(poff, "expected a parameter count")),
        };
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let off = r.offset();
            let line = r.line()?;
            let mut parts = line.split(' ');
            let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| FormatError::parse(off, "missing name"))?;
            if parts.next() != Some("f32") {
                return Err(FormatError::parse(off, "only f32 tensors are supported"));
            }
            let dims = parts
                .map(|d| parse_field::<usize>(off, d, "dimension"))
                .collect::<Result<Vec<_>, _>>()?;
            records.push((name.to_string(), dims));
        }
        r.expect("data")?;
        let mut off = r.offset();
        let mut payload = r.rest();
        let mut tensors = Vec::with_capacity(count);
        for (name, dims) in records {
            let n: usize = dims.iter().product();
            let data = read_f32_le(off, payload, n)?;
            payload = &payload[n * 4..];
            off += n * 4;
            tensors.push(NamedTensor { name, dims, data });
        }
        if !payload.is_empty() {
            return Err(FormatError::parse(off, "trailing bytes after tensor data"));
        }
        Ok(Self { spec, tensors })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::View;
    use crate::nnreg::model::{build_conv_block_cnn, build_dual_cnn};

    fn small_spec() -> ModelSpec {
        build_conv_block_cnn(View::Frontal, 16, 2, 4, vec![8, 4]).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical_and_restores_model() {
        let reg = ArchitectureRegistry::default();
        for spec in [small_spec(), build_dual_cnn(&small_spec()).unwrap()] {
            let model: Model<f32> = Model::new(&spec, &reg, 9).unwrap();
            let ck = Checkpoint::from_model(&model);
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.encode(), bytes);
            let restored = back.to_model(&reg).unwrap();
            assert_eq!(Checkpoint::from_model(&restored), ck);
        }
    }

    #[test]
    fn corrupted_hash_and_truncation_are_rejected() {
        let reg = ArchitectureRegistry::default();
        let model: Model<f32> = Model::new(&small_spec(), &reg, 1).unwrap();
        let bytes = Checkpoint::from_model(&model).encode();
        let mut bad = bytes.clone();
        bad[16] ^= 1;
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn architecture_mismatch_is_detected() {
        let reg = ArchitectureRegistry::default();
        let model: Model<f32> = Model::new(&small_spec(), &reg, 1).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.spec.base_channels = 8;
        assert!(matches!(ck.to_model(&reg), Err(NnError::ArchitectureMismatch(_))));
    }
}
