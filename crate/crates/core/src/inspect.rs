//! Export of inference-time inspection quantities: write/read
//! coordinates, spreads, per-voxel feature-norm volumes with
//! maximum-intensity projections, and the per-layer gate values.

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::memory::StepTraceData;
use ndarray::{ArrayD, Axis, IxDyn};
use std::path::Path;

/// Current sigmoid(γ) per layer; a pure read.
pub fn gate_report(model: &Model) -> Vec<f64> {
    model.gates()
}

/// Maximum-intensity projection of an hnorm volume `[B×D×H×W]` along
/// spatial axis `axis` ∈ {0,1,2}.
pub fn mip(hnorm: &ArrayD<f64>, axis: usize) -> Result<ArrayD<f64>> {
    if hnorm.ndim() != 4 {
        return Err(Error::Dim(format!(
            "mip expects [B×D×H×W], got {:?}",
            hnorm.shape()
        )));
    }
    if axis > 2 {
        return Err(Error::Dim(format!("mip axis {axis} out of range 0..3")));
    }
    Ok(hnorm.fold_axis(Axis(axis + 1), f64::NEG_INFINITY, |&a, &b| a.max(b)))
}

// ---------------------------------------------------------------------------
// SnapshotFile
// ---------------------------------------------------------------------------

const SNAP_MAGIC: &[u8; 4] = b"VXSF";
const SNAP_VERSION: u32 = 1;
const ENDIAN_MARK: u32 = 0x0102_0304;

fn put_array(buf: &mut Vec<u8>, arr: &ArrayD<f64>) {
    buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
    for &d in arr.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in arr.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Format("truncated snapshot file".into()));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            vals.push(self.f64()?);
        }
        ArrayD::from_shape_vec(IxDyn(&shape), vals)
            .map_err(|e| Error::Format(format!("bad array shape: {e}")))
    }
}

/// Binary layout (all integers little-endian):
///   magic "VXSF" | version u32 | endianness marker u32 |
///   config length u64 | config JSON bytes | step count u64 |
///   per step: step u64, gate f64, arrays mu_read, mu_write, sigma,
///   read_value (each: ndim u32, dims u64…, f64 data row-major),
///   mask flag u8 [+ array], hnorm flag u8 [+ array]
pub fn write_snapshot(path: &Path, config_json: &str, traces: &[StepTraceData]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SNAP_MAGIC);
    buf.extend_from_slice(&SNAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
    let cfg = config_json.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(traces.len() as u64).to_le_bytes());
    for t in traces {
        buf.extend_from_slice(&(t.step as u64).to_le_bytes());
        buf.extend_from_slice(&t.gate.to_le_bytes());
        put_array(&mut buf, &t.mu_read);
        put_array(&mut buf, &t.mu_write);
        put_array(&mut buf, &t.sigma);
        put_array(&mut buf, &t.read_value);
        match &t.mask_volume {
            Some(m) => {
                buf.push(1);
                put_array(&mut buf, m);
            }
            None => buf.push(0),
        }
        match &t.hnorm_volume {
            Some(h) => {
                buf.push(1);
                put_array(&mut buf, h);
            }
            None => buf.push(0),
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(String, Vec<StepTraceData>)> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, at: 0 };
    if r.take(4)? != SNAP_MAGIC {
        return Err(Error::Format("not a snapshot file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != SNAP_VERSION {
        return Err(Error::Format(format!(
            "unsupported snapshot version {version} (expected {SNAP_VERSION})"
        )));
    }
    if r.u32()? != ENDIAN_MARK {
        return Err(Error::Format("snapshot endianness mismatch".into()));
    }
    let cfg_len = r.u64()? as usize;
    let config = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Format("config echo is not UTF-8".into()))?;
    let count = r.u64()? as usize;
    let mut traces = Vec::with_capacity(count);
    for _ in 0..count {
        let step = r.u64()? as usize;
        let gate = r.f64()?;
        let mu_read = r.array()?;
        let mu_write = r.array()?;
        let sigma = r.array()?;
        let read_value = r.array()?;
        let mask_volume = if r.take(1)?[0] == 1 {
            Some(r.array()?)
        } else {
            None
        };
        let hnorm_volume = if r.take(1)?[0] == 1 {
            Some(r.array()?)
        } else {
            None
        };
        traces.push(StepTraceData {
            step,
            mu_read,
            mu_write,
            sigma,
            read_value,
            gate,
            mask_volume,
            hnorm_volume,
        });
    }
    Ok((config, traces))
}

/// Flat per-(step, batch element) coordinate table as CSV.
pub fn coord_table(traces: &[StepTraceData]) -> String {
    let mut out = String::from(
        "step,batch,mu_read_x,mu_read_y,mu_read_z,mu_write_x,mu_write_y,mu_write_z,sigma,gate\n",
    );
    for t in traces {
        let b = t.mu_read.shape()[0];
        for bi in 0..b {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                t.step,
                bi,
                t.mu_read[[bi, 0]],
                t.mu_read[[bi, 1]],
                t.mu_read[[bi, 2]],
                t.mu_write[[bi, 0]],
                t.mu_write[[bi, 1]],
                t.mu_write[[bi, 2]],
                t.sigma[[bi, 0]],
                t.gate,
            ));
        }
    }
    out
}

fn mip_csv(m: &ArrayD<f64>) -> String {
    // [B×rows×cols] → blank-line-separated per-batch blocks
    let (b, rows, cols) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let mut out = String::new();
    for bi in 0..b {
        for r in 0..rows {
            let line: Vec<String> = (0..cols).map(|c| m[[bi, r, c]].to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Write the full snapshot, the coordinate table, and (when volumes
/// were traced) three per-step MIP views into `dir`.
pub fn export_trace(traces: &[StepTraceData], config_json: &str, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_snapshot(&dir.join("trace.snap"), config_json, traces)?;
    std::fs::write(dir.join("coords.csv"), coord_table(traces))?;
    for t in traces {
        if let Some(h) = &t.hnorm_volume {
            for axis in 0..3 {
                let m = mip(h, axis)?;
                std::fs::write(
                    dir.join(format!("mip_step{}_axis{}.csv", t.step, axis)),
                    mip_csv(&m),
                )?;
            }
        }
    }
    Ok(())
}
