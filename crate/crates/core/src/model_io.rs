//! Versioned little-endian weight file.
//!
//! Layout (all integers `u32` LE, all floats `f64` LE):
//!
//! ```text
//! magic            8 bytes  "NBEATSW\0"
//! version          u32      = 1
//! configuration    u32      0 = generic, 1 = interpretable
//! lookback         u32
//! horizon          u32
//! hidden_width     u32
//! trunk_layers     u32
//! trend_degree     u32
//! trend_blocks     u32
//! seasonality_blocks u32
//! generic_stacks   u32
//! generic_blocks   u32
//! generic_basis_dim u32
//! tensor_count     u32
//! tensors          tensor_count × { rows u32, cols u32, rows·cols f64 }
//! ```
//!
//! Tensors follow the model's parameter order: for every block, each trunk
//! layer's weights then bias (bias stored as `out × 1`), the backcast θ head,
//! the forecast θ head and, for generic blocks only, the learned backcast and
//! forecast bases. Fixed trend and seasonality bases are rebuilt from the
//! header and never stored.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{Configuration, ModelConfig, ModelError, NBeatsModel};

pub const MAGIC: [u8; 8] = *b"NBEATSW\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("unsupported model file: {0}")]
    Version(String),
    #[error("model file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("model file corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shape of one stored tensor, derived from the model topology.
fn tensor_shapes(model: &NBeatsModel) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    for block in model.stacks.iter().flat_map(|s| &s.blocks) {
        for layer in block.trunk.iter().chain([&block.theta_backcast, &block.theta_forecast]) {
            shapes.push(layer.weights.shape());
            shapes.push((layer.bias.len(), 1));
        }
        if block.basis.is_learned() {
            shapes.push(block.basis.backcast.shape());
            shapes.push(block.basis.forecast.shape());
        }
    }
    shapes
}

fn header_fields(config: &ModelConfig) -> [usize; 11] {
    [
        match config.configuration {
            Configuration::Generic => 0,
            Configuration::Interpretable => 1,
        },
        config.lookback,
        config.horizon,
        config.hidden_width,
        config.trunk_layers,
        config.trend_degree,
        config.trend_blocks,
        config.seasonality_blocks,
        config.generic_stacks,
        config.generic_blocks,
        config.generic_basis_dim,
    ]
}

pub fn to_bytes(model: &NBeatsModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for field in header_fields(&model.config) {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    let shapes = tensor_shapes(model);
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for ((rows, cols), data) in shapes.iter().zip(model.parameter_slices()) {
        out.extend_from_slice(&(*rows as u32).to_le_bytes());
        out.extend_from_slice(&(*cols as u32).to_le_bytes());
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let available = self.bytes.len() - self.offset;
        if available < n {
            return Err(ModelFileError::Truncated {
                offset: self.offset,
                needed: n,
                available,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ModelFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<NBeatsModel, ModelFileError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelFileError::Version("unrecognized magic bytes".into()));
    }
    let mut r = Reader {
        bytes,
        offset: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelFileError::Version(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let mut h = [0usize; 11];
    for field in &mut h {
        *field = r.u32()? as usize;
    }
    let configuration = match h[0] {
        0 => Configuration::Generic,
        1 => Configuration::Interpretable,
        other => return Err(ModelFileError::Corrupt(format!("unknown configuration tag {other}"))),
    };
    let config = ModelConfig {
        configuration,
        lookback: h[1],
        horizon: h[2],
        hidden_width: h[3],
        trunk_layers: h[4],
        trend_degree: h[5],
        trend_blocks: h[6],
        seasonality_blocks: h[7],
        generic_stacks: h[8],
        generic_blocks: h[9],
        generic_basis_dim: h[10],
    };
    // Guard against absurd headers before allocating the topology.
    let declared_floats = (config.hidden_width as u128)
        * (config.hidden_width as u128 + config.lookback as u128 + config.horizon as u128)
        * (config.trunk_layers as u128 + 2);
    if declared_floats > (bytes.len() as u128) * 64 {
        return Err(ModelFileError::Corrupt("header dimensions exceed file size".into()));
    }
    let mut model = NBeatsModel::zeroed(config).map_err(|e: ModelError| ModelFileError::Corrupt(e.to_string()))?;
    let shapes = tensor_shapes(&model);

    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(ModelFileError::Corrupt(format!(
            "header implies {} tensors, file declares {count}",
            shapes.len()
        )));
    }
    for (i, (slot, &(rows, cols))) in model.parameter_slices_mut().into_iter().zip(&shapes).enumerate() {
        let (r_rows, r_cols) = (r.u32()? as usize, r.u32()? as usize);
        if (r_rows, r_cols) != (rows, cols) {
            return Err(ModelFileError::Corrupt(format!(
                "tensor {i} declared {r_rows}x{r_cols}, topology needs {rows}x{cols}"
            )));
        }
        for v in slot.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.offset != bytes.len() {
        return Err(ModelFileError::Corrupt(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.offset
        )));
    }
    Ok(model)
}

pub fn save_model(model: &NBeatsModel, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NBeatsModel, ModelFileError> {
    from_bytes(&fs::read(path)?)
}
