//! The voxel memory module: per-chunk read → gated fusion → Gaussian
//! write → factorized gate operator → ConvLSTM update, scanned over a
//! token sequence. The state is a fixed-size pair of `[B×C×D×H×W]`
//! volumes whose footprint is independent of sequence length.

use crate::error::{Error, Result};
use crate::tensor::{coord_grid, seeded_rng, xavier_uniform, ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteMode {
    Gaussian,
    HardNearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordHeads {
    Shared,
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysMode {
    Factorized,
    PointwiseOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Channel count C.
    pub channels: usize,
    /// Voxel grid extents (D, H, W).
    pub grid: (usize, usize, usize),
    /// Chunk size K.
    pub chunk_size: usize,
    /// Token dimension d.
    pub token_dim: usize,
    /// Fixed spread scale factor α.
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
    #[serde(default)]
    pub gamma_init: f64,
    #[serde(default = "default_eps_mask")]
    pub eps_mask: f64,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    #[serde(default = "default_write_mode")]
    pub write_mode: WriteMode,
    #[serde(default = "default_coord_heads")]
    pub coord_heads: CoordHeads,
    #[serde(default = "default_phys_mode")]
    pub phys_mode: PhysMode,
    /// Residual-branch dropout rate.
    #[serde(default)]
    pub dropout_p: f64,
}

fn default_sigma_scale() -> f64 {
    0.5
}
fn default_eps_mask() -> f64 {
    1e-6
}
fn default_sigma_floor() -> f64 {
    1e-4
}
fn default_write_mode() -> WriteMode {
    WriteMode::Gaussian
}
fn default_coord_heads() -> CoordHeads {
    CoordHeads::Shared
}
fn default_phys_mode() -> PhysMode {
    PhysMode::Factorized
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.grid;
        if d < 2 || h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "grid extents must be ≥ 2, got {:?}",
                self.grid
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be ≥ 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be ≥ 1".into()));
        }
        if self.sigma_scale <= 0.0 {
            return Err(Error::Config("sigma_scale must be positive".into()));
        }
        if self.eps_mask <= 0.0 || self.sigma_floor <= 0.0 {
            return Err(Error::Config("eps_mask and sigma_floor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Paired hidden/cell voxel volumes; the fixed-size recurrent state.
#[derive(Clone)]
pub struct MemoryState {
    pub h: Tensor,
    pub c: Tensor,
}

impl MemoryState {
    pub fn zeros(batch: usize, cfg: &MemoryConfig) -> MemoryState {
        let (d, h, w) = cfg.grid;
        let shape = [batch, cfg.channels, d, h, w];
        MemoryState {
            h: Tensor::zeros(&shape),
            c: Tensor::zeros(&shape),
        }
    }

    pub fn elem_count(&self) -> usize {
        self.h.len() + self.c.len()
    }
}

/// The per-chunk triple that parameterizes one Gaussian deposit.
pub struct WritePackage {
    pub mu_write: Tensor,
    pub content: Tensor,
    pub sigma: Tensor,
}

/// Raw per-step inspection record collected during a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTraceData {
    pub step: usize,
    pub mu_read: ArrayD<f64>,
    pub mu_write: ArrayD<f64>,
    pub sigma: ArrayD<f64>,
    pub read_value: ArrayD<f64>,
    pub gate: f64,
    pub mask_volume: Option<ArrayD<f64>>,
    pub hnorm_volume: Option<ArrayD<f64>>,
}

/// What to capture while scanning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    Off,
    Coords,
    Volumes,
}

pub struct MemoryModule {
    pub cfg: MemoryConfig,
    grid: Tensor,
    pub w_wp: Tensor,
    pub w_coord_read: Tensor,
    pub w_coord_write: Tensor,
    pub w_c: Tensor,
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub gamma: Tensor,
    pub dw_d: Tensor,
    pub dw_h: Tensor,
    pub dw_w: Tensor,
    pub pw_w: Tensor,
    pub pw_b: Tensor,
}

/// Centered-delta depthwise kernel [0,1,0] along one spatial axis.
fn delta_kernel(channels: usize, axis: usize) -> ArrayD<f64> {
    let mut shape = [channels, 1, 1, 1];
    shape[1 + axis] = 3;
    let mut k = ArrayD::zeros(IxDyn(&shape));
    for c in 0..channels {
        k.as_slice_mut().unwrap()[c * 3 + 1] = 1.0;
    }
    k
}

impl MemoryModule {
    /// Build the module's parameters under `prefix` in `store`.
    pub fn build(
        cfg: &MemoryConfig,
        store: &mut ParamStore,
        prefix: &str,
        seed: u64,
    ) -> Result<MemoryModule> {
        cfg.validate()?;
        let (gd, gh, gw) = cfg.grid;
        let (c, d, k) = (cfg.channels, cfg.token_dim, cfg.chunk_size);
        let mut rng = seeded_rng(seed, &format!("{prefix}.init"));
        let p = |store: &mut ParamStore, name: &str, arr: ArrayD<f64>| {
            store.insert(&format!("{prefix}.{name}"), Tensor::param(arr))
        };
        let w_wp = p(store, "w_wp", xavier_uniform(&mut rng, &[k * d, d], k * d, d))?;
        let w_coord_read = p(store, "w_coord", xavier_uniform(&mut rng, &[d, 3], d, 3))?;
        let w_coord_write = match cfg.coord_heads {
            CoordHeads::Shared => w_coord_read.clone(),
            CoordHeads::Separate => {
                p(store, "w_coord_write", xavier_uniform(&mut rng, &[d, 3], d, 3))?
            }
        };
        let w_c = p(store, "w_c", xavier_uniform(&mut rng, &[d, c], d, c))?;
        let w_sigma = p(store, "w_sigma", xavier_uniform(&mut rng, &[d, 1], d, 1))?;
        let b_sigma = p(store, "b_sigma", ArrayD::from_elem(IxDyn(&[1]), 1.0))?;
        let w_out = p(store, "w_out", xavier_uniform(&mut rng, &[c, d], c, d))?;
        let b_out = p(store, "b_out", ArrayD::zeros(IxDyn(&[d])))?;
        let gamma = p(store, "gamma", ArrayD::from_elem(IxDyn(&[]), cfg.gamma_init))?;
        let dw_d = p(store, "dw_d", delta_kernel(2 * c, 0))?;
        let dw_h = p(store, "dw_h", delta_kernel(2 * c, 1))?;
        let dw_w = p(store, "dw_w", delta_kernel(2 * c, 2))?;
        let pw_w = p(store, "pw_w", xavier_uniform(&mut rng, &[4 * c, 2 * c], 2 * c, 4 * c))?;
        // forget-gate bias starts at 1 so the state persists early on
        let mut pw_bias = ArrayD::zeros(IxDyn(&[4 * c]));
        for i in c..2 * c {
            pw_bias[[i]] = 1.0;
        }
        let pw_b = p(store, "pw_b", pw_bias)?;
        Ok(MemoryModule {
            cfg: cfg.clone(),
            grid: coord_grid(gd, gh, gw),
            w_wp,
            w_coord_read,
            w_coord_write,
            w_c,
            w_sigma,
            b_sigma,
            w_out,
            b_out,
            gamma,
            dw_d,
            dw_h,
            dw_w,
            pw_w,
            pw_b,
        })
    }

    pub fn gate_value(&self) -> f64 {
        1.0 / (1.0 + (-self.gamma.value()[[]]).exp())
    }
}

/// Group `x: [B×N×d]` into ⌈N/K⌉ chunks of size K, zero-padding the
/// tail. Returns the grouped tensor and the validity mask.
pub fn chunk_tokens(x: &Tensor, k: usize) -> Result<(Tensor, ArrayD<f64>)> {
    if k == 0 {
        return Err(Error::Config("chunk size must be ≥ 1".into()));
    }
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("chunk_tokens expects [B×N×d], got {:?}", shape)));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if n == 0 {
        return Err(Error::Dim("empty sequence".into()));
    }
    let s = n.div_ceil(k);
    let padded = if s * k == n {
        x.clone()
    } else {
        let pad = Tensor::zeros(&[b, s * k - n, d]);
        Tensor::concat(1, &[x.clone(), pad])?
    };
    let grouped = padded.reshape(&[b, s, k, d])?;
    let mut mask = ArrayD::ones(IxDyn(&[b, s, k]));
    for bi in 0..b {
        for pos in n..s * k {
            mask[[bi, pos / k, pos % k]] = 0.0;
        }
    }
    Ok((grouped, mask))
}

impl MemoryModule {
    /// Read query (first token) and write summary (projection of the
    /// whole chunk) for chunk `t`.
    pub fn step_inputs(&self, x_grp: &Tensor, t: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let shape = x_grp.shape();
        let (b, k, d) = (shape[0], shape[2], shape[3]);
        let x_chunk = x_grp.narrow(1, t, 1).reshape(&[b, k, d])?;
        let x_read = x_chunk.narrow(1, 0, 1).reshape(&[b, d])?;
        let x_write = x_chunk.reshape(&[b, k * d])?.linear(&self.w_wp, None)?;
        Ok((x_chunk, x_read, x_write))
    }

    /// Bias-free tanh coordinate heads; in shared mode both summaries
    /// pass through the same weights.
    pub fn predict_coords(&self, x_read: &Tensor, x_write: &Tensor) -> Result<(Tensor, Tensor)> {
        let mu_read = x_read.linear(&self.w_coord_read, None)?.tanh();
        let mu_write = x_write.linear(&self.w_coord_write, None)?.tanh();
        Ok((mu_read, mu_write))
    }

    /// Project the read vector to the token dimension and inject it
    /// into every token of the chunk through the gated residual.
    pub fn fuse_readout(
        &self,
        x_chunk: &Tensor,
        r: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let shape = x_chunk.shape();
        let (b, d) = (shape[0], shape[2]);
        let m = r.linear(&self.w_out, Some(&self.b_out))?;
        let m = match rng {
            Some(rng) if self.cfg.dropout_p > 0.0 => m.dropout(self.cfg.dropout_p, rng),
            _ => m,
        };
        let gated = m.mul(&self.gamma.sigmoid())?;
        x_chunk.add(&gated.reshape(&[b, 1, d])?)
    }

    /// Content, spread, and write coordinate for one chunk.
    pub fn write_package(&self, x_write: &Tensor, mu_write: &Tensor) -> Result<WritePackage> {
        let content = x_write.linear(&self.w_c, None)?;
        let sigma = x_write
            .linear(&self.w_sigma, Some(&self.b_sigma))?
            .softplus()
            .add_scalar(self.cfg.sigma_floor)
            .scale(self.cfg.sigma_scale);
        Ok(WritePackage {
            mu_write: mu_write.clone(),
            content,
            sigma,
        })
    }

    /// Dense Gaussian mask `exp(−‖𝒢−μ‖² / (2σ²+ε))` of shape
    /// `[B×1×D×H×W]`.
    pub fn gaussian_mask(&self, mu_write: &Tensor, sigma: &Tensor) -> Result<Tensor> {
        let b = mu_write.shape()[0];
        let diff = self.grid.sub(&mu_write.reshape(&[b, 3, 1, 1, 1])?)?;
        let dist2 = diff.square().sum_axis_keep(1);
        let denom = sigma
            .reshape(&[b, 1, 1, 1, 1])?
            .square()
            .scale(2.0)
            .add_scalar(self.cfg.eps_mask);
        dist2.div(&denom).map(|t| t.neg().exp())
    }

    /// The write volume `U` for one chunk, Gaussian or hard-nearest.
    pub fn write_volume(&self, pkg: &WritePackage) -> Result<Tensor> {
        let b = pkg.content.shape()[0];
        let c = self.cfg.channels;
        match self.cfg.write_mode {
            WriteMode::Gaussian => {
                let mask = self.gaussian_mask(&pkg.mu_write, &pkg.sigma)?;
                pkg.content.reshape(&[b, c, 1, 1, 1])?.mul(&mask)
            }
            WriteMode::HardNearest => {
                Tensor::hard_write(&pkg.content, &pkg.mu_write, self.cfg.grid)
            }
        }
    }

    /// `[U; h]` through the factorized gate operator to `4C` channels.
    pub fn phys_gates(&self, u: &Tensor, h: &Tensor) -> Result<Tensor> {
        let z = Tensor::concat(1, &[u.clone(), h.clone()])?;
        let z = match self.cfg.phys_mode {
            PhysMode::Factorized => z
                .depthwise_conv3d(&self.dw_d)?
                .depthwise_conv3d(&self.dw_h)?
                .depthwise_conv3d(&self.dw_w)?,
            PhysMode::PointwiseOnly => z,
        };
        z.pointwise_conv3d(&self.pw_w, Some(&self.pw_b))
    }

    /// Voxel-wise gated update: split G into (i,f,o,g) and apply the
    /// ConvLSTM recurrence.
    pub fn convlstm_step(&self, gates: &Tensor, state: &MemoryState) -> Result<MemoryState> {
        let c = self.cfg.channels;
        let i = gates.narrow(1, 0, c).sigmoid();
        let f = gates.narrow(1, c, c).sigmoid();
        let o = gates.narrow(1, 2 * c, c).sigmoid();
        let g = gates.narrow(1, 3 * c, c).tanh();
        let c_next = f.mul(&state.c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh())?;
        Ok(MemoryState { h: h_next, c: c_next })
    }

    /// Scan the chunked sequence: each step reads from the pre-update
    /// state, fuses the readout into its chunk, then writes and
    /// updates. The read at step t therefore sees only writes from
    /// steps < t (plus the initial state).
    pub fn scan(
        &self,
        x: &Tensor,
        init_state: Option<MemoryState>,
        mut rng: Option<&mut ChaCha8Rng>,
        trace: TraceLevel,
    ) -> Result<(Tensor, MemoryState, Vec<StepTraceData>)> {
        let shape = x.shape();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (x_grp, _mask) = chunk_tokens(x, self.cfg.chunk_size)?;
        let s = x_grp.shape()[1];
        let mut state = init_state.unwrap_or_else(|| MemoryState::zeros(b, &self.cfg));
        let mut traces = Vec::new();
        let mut chunks = Vec::with_capacity(s);
        for t in 0..s {
            let (x_chunk, x_read, x_write) = self.step_inputs(&x_grp, t)?;
            let (mu_read, mu_write) = self.predict_coords(&x_read, &x_write)?;
            let r = state.h.trilinear_read(&mu_read)?;
            let fused = self.fuse_readout(&x_chunk, &r, rng.as_deref_mut())?;
            chunks.push(fused);
            let pkg = self.write_package(&x_write, &mu_write)?;
            let u = self.write_volume(&pkg)?;
            let gates = self.phys_gates(&u, &state.h)?;
            let next = self.convlstm_step(&gates, &state)?;
            if trace != TraceLevel::Off {
                let volumes = trace == TraceLevel::Volumes;
                let mask_volume = if volumes && self.cfg.write_mode == WriteMode::Gaussian {
                    Some(
                        self.gaussian_mask(&pkg.mu_write, &pkg.sigma)?
                            .value()
                            .as_ref()
                            .clone(),
                    )
                } else {
                    None
                };
                let hnorm_volume = volumes.then(|| hnorm(&next.h));
                traces.push(StepTraceData {
                    step: t,
                    mu_read: mu_read.value().as_ref().clone(),
                    mu_write: mu_write.value().as_ref().clone(),
                    sigma: pkg.sigma.value().as_ref().clone(),
                    read_value: r.value().as_ref().clone(),
                    gate: self.gate_value(),
                    mask_volume,
                    hnorm_volume,
                });
            }
            state = next;
        }
        let x_out = Tensor::concat(1, &chunks)?
            .reshape(&[b, s * self.cfg.chunk_size, d])?
            .narrow(1, 0, n);
        Ok((x_out, state, traces))
    }
}

/// Per-voxel feature norm ‖h‖₂ over channels: `[B×D×H×W]`.
pub fn hnorm(h: &Tensor) -> ArrayD<f64> {
    let v = h.value();
    let (b, c) = (v.shape()[0], v.shape()[1]);
    let spatial: Vec<usize> = v.shape()[2..].to_vec();
    let vox: usize = spatial.iter().product();
    let mut out_shape = vec![b];
    out_shape.extend_from_slice(&spatial);
    let vs = v.as_standard_layout();
    let flat = vs.view().into_shape_with_order((b, c, vox)).unwrap();
    let mut out = ArrayD::zeros(IxDyn(&out_shape));
    let out_flat = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for vi in 0..vox {
            let mut acc = 0.0;
            for ci in 0..c {
                let x = flat[[bi, ci, vi]];
                acc += x * x;
            }
            out_flat[bi * vox + vi] = acc.sqrt();
        }
    }
    out
}

#[cfg(test)]
mod tests;
