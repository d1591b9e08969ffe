//! Named-tensor files in the safetensors format, used both for importing
//! pretrained backbone weights and for checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use half::{bf16, f16};
use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

pub type TensorMap = BTreeMap<String, ArrayD<f64>>;

fn decode(view: &TensorView<'_>, name: &str) -> Result<Vec<f64>> {
    let bytes = view.data();
    let values = match view.dtype() {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::I64 => bytes
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        other => {
            return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype {other:?}")));
        }
    };
    Ok(values)
}

/// Metadata is stored under this single key as a JSON object; the format's
/// own metadata map is unordered, which would make files differ run to run.
const METADATA_KEY: &str = "leukonet";

/// Reads every tensor (converted to `f64`) plus the free-form metadata.
pub fn read(path: &Path) -> Result<(TensorMap, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, meta) =
        SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut tensors = TensorMap::new();
    for (name, view) in st.tensors() {
        let values = decode(&view, &name)?;
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    let raw = meta.metadata().clone().unwrap_or_default();
    let meta = match raw.get(METADATA_KEY) {
        Some(json) => serde_json::from_str(json)?,
        None => raw.into_iter().collect(),
    };
    Ok((tensors, meta))
}

/// Writes tensors as little-endian `f64`.
pub fn write(path: &Path, tensors: &TensorMap, metadata: &BTreeMap<String, String>) -> Result<()> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, arr)| {
            let bytes = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), arr.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let packed = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(metadata)?)]);
    let data = safetensors::serialize(views, &Some(packed)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

/// Shapes agree once trailing singleton axes are ignored, so a `k×c×1×1`
/// convolution kernel can fill a `k×c` dense weight.
pub fn compatible(a: &[usize], b: &[usize]) -> bool {
    fn trim(s: &[usize]) -> &[usize] {
        let mut end = s.len();
        while end > 1 && s[end - 1] == 1 {
            end -= 1;
        }
        &s[..end]
    }
    trim(a) == trim(b)
}
