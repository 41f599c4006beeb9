//! Checkpoint format: one JSON header line `{format_version, config}`, then
//! every parameter tensor (including batchnorm running statistics) in
//! declared order as little-endian 32-bit floats. save -> load -> save is
//! byte-identical.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, CnnRegressor, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
}

impl CnnRegressor {
    /// All tensors in checkpoint order: per block conv weights, conv biases,
    /// then batchnorm gamma, beta, running mean, running variance; then the
    /// dense and regression tensors.
    fn checkpoint_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.extend_from_slice(&block.conv.weights);
            out.extend_from_slice(&block.conv.biases);
            if let Some(bn) = &block.bn {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
                out.extend_from_slice(&bn.running_mean);
                out.extend_from_slice(&bn.running_var);
            }
        }
        out.extend_from_slice(&self.dense_weights);
        out.extend_from_slice(&self.dense_biases);
        out.extend_from_slice(&self.reg_weights);
        out.push(self.reg_bias);
        out
    }

    fn set_checkpoint_values(&mut self, values: &[f64]) -> Result<()> {
        let mut pos = 0;
        let mut take = |len: usize| -> Result<&[f64]> {
            if pos + len > values.len() {
                return Err(Error::invalid_input("checkpoint truncated"));
            }
            let s = &values[pos..pos + len];
            pos += len;
            Ok(s)
        };
        for block in &mut self.blocks {
            let n = block.conv.weights.len();
            block.conv.weights.copy_from_slice(take(n)?);
            let n = block.conv.biases.len();
            block.conv.biases.copy_from_slice(take(n)?);
            if let Some(bn) = &mut block.bn {
                let n = bn.gamma.len();
                bn.gamma.copy_from_slice(take(n)?);
                let n = bn.beta.len();
                bn.beta.copy_from_slice(take(n)?);
                let n = bn.running_mean.len();
                bn.running_mean.copy_from_slice(take(n)?);
                let n = bn.running_var.len();
                bn.running_var.copy_from_slice(take(n)?);
            }
        }
        let n = self.dense_weights.len();
        self.dense_weights.copy_from_slice(take(n)?);
        let n = self.dense_biases.len();
        self.dense_biases.copy_from_slice(take(n)?);
        let n = self.reg_weights.len();
        self.reg_weights.copy_from_slice(take(n)?);
        self.reg_bias = take(1)?[0];
        if pos != values.len() {
            return Err(Error::invalid_input(format!(
                "checkpoint has {} extra values",
                values.len() - pos
            )));
        }
        Ok(())
    }
}

pub fn save<W: Write>(model: &CnnRegressor, mut w: W) -> Result<()> {
    let header = Header { format_version: FORMAT_VERSION, config: model.config.clone() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in model.checkpoint_values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load<R: BufRead>(mut r: R) -> Result<CnnRegressor> {
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header: Header = serde_json::from_str(header_line.trim_end()).map_err(|e| {
        Error::invalid_input(format!("bad checkpoint header: {e}"))
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::invalid_input(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    let mut model = init_params(&header.config)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid_input("checkpoint payload is not a whole number of f32s"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    model.set_checkpoint_values(&values)?;
    Ok(model)
}

pub fn save_to_path(model: &CnnRegressor, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_from_path(path: &Path) -> Result<CnnRegressor> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    load(f)
}
