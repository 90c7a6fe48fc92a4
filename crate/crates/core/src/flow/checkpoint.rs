//! Binary parameter checkpoints.
//!
//! ```text
//! magic        8 bytes   "FTDVPCK1"
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON (specs, layout registry, time)
//! params       param_count × f64 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CouplingBlockSpec, DensityModel, LatentSpec, ParamLayout};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FTDVPCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    t: f64,
    latent: LatentSpec,
    blocks: Vec<CouplingBlockSpec>,
    param_count: usize,
    layout: ParamLayout,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DensityModel,
    pub t: f64,
}

pub fn encode(model: &DensityModel, t: f64) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_VERSION,
        t,
        latent: *model.latent_spec(),
        blocks: model.blocks().to_vec(),
        param_count: model.param_count(),
        layout: model.params().layout().clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params().values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Upper bound on the parameter count implied by the specs, or `None` on overflow.
fn implied_param_count(latent: &LatentSpec, blocks: &[CouplingBlockSpec]) -> Option<usize> {
    let d = latent.dim;
    let cov = match latent.covariance {
        super::CovarianceParam::CholeskyLower => d.checked_mul(d.checked_add(1)?)? / 2,
        super::CovarianceParam::IdentityPlusAat => d.checked_mul(d)?,
    };
    let mut total = d.checked_add(cov)?.checked_add(usize::from(latent.has_nu()))?;
    for b in blocks {
        let (na, nb, h) = (b.part_a.len(), b.part_b.len(), b.hidden);
        let net = |i: usize, o: usize| -> Option<usize> {
            h.checked_mul(i)?
                .checked_add(h)?
                .checked_add(o.checked_mul(h)?)?
                .checked_add(o)
        };
        let pair = net(na, nb)?.checked_add(net(nb, na)?)?;
        total = total.checked_add(if b.include_t { pair.checked_mul(2)? } else { pair })?;
    }
    Some(total)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[16..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&n| n <= rest.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    if !header.t.is_finite() {
        return Err(corrupt("non-finite time"));
    }
    let payload = &rest[header_len..];
    if payload.len() % 8 != 0 || payload.len() / 8 != header.param_count {
        return Err(corrupt(format!(
            "expected {} parameters, payload holds {} bytes",
            header.param_count,
            payload.len()
        )));
    }
    if header.latent.dim == 0 || header.latent.dim > header.param_count {
        return Err(corrupt("latent dimension inconsistent with parameter count"));
    }
    if implied_param_count(&header.latent, &header.blocks) != Some(header.param_count) {
        return Err(corrupt("specs imply a different parameter count"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = DensityModel::from_parts(header.latent, header.blocks, values)
        .map_err(|e| corrupt(format!("invalid model: {e}")))?;
    if model.params().layout() != &header.layout {
        return Err(corrupt("layout registry does not match specs"));
    }
    Ok(Checkpoint { model, t: header.t })
}

pub fn write(path: &Path, model: &DensityModel, t: f64) -> Result<()> {
    let bytes = encode(model, t)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
