//! Checkpoint format: magic "OPM1", version, model spec, window grid spec,
//! then every tensor as little-endian f64 in canonical order. Optimizer
//! moments are optional (training resumption); the default artifact stores
//! parameters only.

use crate::dataset::GridSpec;

use super::adam::AdamState;
use super::{Head, ModelError, ModelParams, ModelSpec};

const MAGIC: &[u8; 4] = b"OPM1";
const VERSION: u16 = 1;

pub struct Checkpoint {
    pub params: ModelParams,
    pub grid: GridSpec,
    pub opt: Option<AdamState>,
}

fn write_tensors(params: &ModelParams, buf: &mut Vec<u8>) {
    for (_, t) in params.tensors() {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_checkpoint(params: &ModelParams, grid: &GridSpec, opt: Option<&AdamState>) -> Vec<u8> {
    let spec = &params.spec;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(match spec.head {
        Head::Classification => 0,
        Head::Regression => 1,
    });
    for v in [
        spec.input_dim,
        spec.hidden_dim,
        spec.n_classes,
        spec.embed_dim,
        spec.tau_i,
        spec.tau_o,
        grid.width,
        grid.height,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&grid.resolution.to_le_bytes());
    buf.push(opt.is_some() as u8);
    write_tensors(params, &mut buf);
    if let Some(state) = opt {
        write_tensors(&state.m, &mut buf);
        write_tensors(&state.v, &mut buf);
        buf.extend_from_slice(&state.t.to_le_bytes());
    }
    buf
}

struct Rd<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format("unexpected end of checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensors(rd: &mut Rd, spec: ModelSpec) -> Result<ModelParams, ModelError> {
    let mut params = ModelParams::zeros(spec)?;
    for (_, mut t) in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rd.f64()?;
        }
    }
    Ok(params)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let mut rd = Rd { buf: bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(ModelError::Format("bad magic".into()));
    }
    let version = rd.u16()?;
    if version != VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let head = match rd.u8()? {
        0 => Head::Classification,
        1 => Head::Regression,
        other => return Err(ModelError::Format(format!("bad head tag {other}"))),
    };
    let input_dim = rd.u32()? as usize;
    let hidden_dim = rd.u32()? as usize;
    let n_classes = rd.u32()? as usize;
    let embed_dim = rd.u32()? as usize;
    let tau_i = rd.u32()? as usize;
    let tau_o = rd.u32()? as usize;
    let grid = GridSpec {
        width: rd.u32()? as usize,
        height: rd.u32()? as usize,
        resolution: rd.f64()?,
    };
    let spec = ModelSpec { input_dim, hidden_dim, n_classes, embed_dim, tau_i, tau_o, head };
    spec.validate().map_err(|e| ModelError::Format(e.to_string()))?;
    let has_opt = rd.u8()? != 0;
    let params = read_tensors(&mut rd, spec)?;
    let opt = if has_opt {
        let m = read_tensors(&mut rd, spec)?;
        let v = read_tensors(&mut rd, spec)?;
        let t = rd.u64()?;
        Some(AdamState { m, v, t })
    } else {
        None
    };
    if rd.pos != bytes.len() {
        return Err(ModelError::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint { params, grid, opt })
}
