//! Seeded generators for the four diagnostic tasks: occlusion
//! tracking, map building, coordinate binding, and the no-harm
//! copy/shift control. Every batch is a pure function of
//! (spec, batch_index).

use crate::backbone::{InputKind, TokenInput};
use crate::error::{Error, Result};
use crate::tensor::seeded_rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// Occlusion arena: 4×4 cell grid tokenized as four 2×2 patches.
pub const OCC_GRID: usize = 4;
const OCC_PATCHES: usize = 4;
/// token layout: [type(2) | patch_id(4) | ball bits(4) | occluder bits(4) | occluder pos(2)]
pub const OCC_DIM: usize = 16;
pub const OCC_TOKENS_PER_FRAME: usize = OCC_PATCHES + 1;

// Map building: hidden 8×8 binary grid observed through 2×2 patches.
pub const MAP_GRID: usize = 8;
/// token layout: [type(2) | bits(4) | obs pos(2) | query pos(2)]
pub const MAP_DIM: usize = 10;

pub const BIND_V: usize = 16;
pub const BIND_Q: usize = 8;
/// token layout: [type(2) | coord(3) | value one-hot(V)]
pub const BIND_DIM: usize = 2 + 3 + BIND_V;

pub const NOHARM_VOCAB: usize = 10;

// (no deny_unknown_fields here: serde does not support it on
// internally tagged enums or alongside #[serde(flatten)])
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Occlusion {
        l: usize,
        #[serde(default = "default_frames")]
        frames: usize,
    },
    MapBuilding {
        t: usize,
    },
    CoordBinding {
        w: usize,
        sigma_noise: f64,
    },
    NoHarm {
        seq_len: usize,
        #[serde(default = "default_shift")]
        shift: usize,
    },
}

fn default_frames() -> usize {
    12
}
fn default_shift() -> usize {
    1
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Occlusion { .. } => "occlusion",
            TaskSpec::MapBuilding { .. } => "map_building",
            TaskSpec::CoordBinding { .. } => "coord_binding",
            TaskSpec::NoHarm { .. } => "no_harm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Occlusion { l, frames } => {
                if frames < 4 {
                    return Err(Error::Config("occlusion needs ≥ 4 frames".into()));
                }
                if l + 2 > frames {
                    return Err(Error::Config(format!(
                        "occlusion length {l} must satisfy L ≤ frames − 2 (= {})",
                        frames - 2
                    )));
                }
            }
            TaskSpec::MapBuilding { t } => {
                if t == 0 {
                    return Err(Error::Config("map horizon T must be ≥ 1".into()));
                }
            }
            TaskSpec::CoordBinding { w, sigma_noise } => {
                if w == 0 {
                    return Err(Error::Config("binding needs W ≥ 1 writes".into()));
                }
                if sigma_noise < 0.0 {
                    return Err(Error::Config("sigma_noise must be ≥ 0".into()));
                }
            }
            TaskSpec::NoHarm { seq_len, shift } => {
                if seq_len < 2 || shift >= seq_len {
                    return Err(Error::Config(
                        "no-harm needs seq_len ≥ 2 and shift < seq_len".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// How this task's raw tokens enter the model.
    pub fn input_kind(&self) -> InputKind {
        match self {
            TaskSpec::Occlusion { .. } => InputKind::Continuous { dim: OCC_DIM },
            TaskSpec::MapBuilding { .. } => InputKind::Continuous { dim: MAP_DIM },
            TaskSpec::CoordBinding { .. } => InputKind::Continuous { dim: BIND_DIM },
            TaskSpec::NoHarm { .. } => InputKind::Discrete { vocab: NOHARM_VOCAB },
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TaskSpec::Occlusion { .. } => 4,
            TaskSpec::MapBuilding { .. } => 2,
            TaskSpec::CoordBinding { .. } => BIND_V,
            TaskSpec::NoHarm { .. } => NOHARM_VOCAB,
        }
    }

    pub fn seq_len(&self) -> usize {
        match *self {
            TaskSpec::Occlusion { frames, .. } => frames * OCC_TOKENS_PER_FRAME,
            TaskSpec::MapBuilding { t } => t + 1,
            TaskSpec::CoordBinding { w, .. } => w + BIND_Q,
            TaskSpec::NoHarm { seq_len, .. } => seq_len,
        }
    }

    /// Frame width for block-causal masking (frames are internally
    /// bidirectional for the frame-structured tasks).
    pub fn frame_size(&self) -> Option<usize> {
        match self {
            TaskSpec::Occlusion { .. } => Some(OCC_TOKENS_PER_FRAME),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToySpec {
    #[serde(flatten)]
    pub task: TaskSpec,
    pub batch_size: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        self.task.validate()
    }
}

/// One generated batch: raw tokens plus (position, label) answer pairs
/// per element. Loss and accuracy apply only at answer positions.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub tokens: TokenInput,
    pub answers: Vec<Vec<(usize, usize)>>,
}

impl ToyBatch {
    pub fn batch(&self) -> usize {
        self.tokens.batch()
    }
}

/// Triangle-wave fold of an unbounded coordinate onto [0,1] (elastic
/// reflection off both walls).
pub fn fold(x: f64) -> f64 {
    let y = x.rem_euclid(2.0);
    if y > 1.0 {
        2.0 - y
    } else {
        y
    }
}

pub fn quadrant(x: f64, y: f64) -> usize {
    2 * usize::from(y > 0.5) + usize::from(x > 0.5)
}

/// One occlusion episode on the exact lattice: the ball starts at a
/// cell center (odd multiples of 1/8) and moves with velocity
/// components in ±{1/4, 1/2}, so every frame position is again a cell
/// center and quadrant membership is never ambiguous.
#[derive(Debug, Clone)]
pub struct OcclusionEpisode {
    pub p0: (f64, f64),
    pub v: (f64, f64),
    pub occluder: (usize, usize),
    pub frames: usize,
    pub l: usize,
}

impl OcclusionEpisode {
    pub fn sample(rng: &mut ChaCha8Rng, l: usize, frames: usize) -> OcclusionEpisode {
        let lattice = |rng: &mut ChaCha8Rng| (2.0 * rng.gen_range(0..OCC_GRID) as f64 + 1.0) / 8.0;
        let vel = |rng: &mut ChaCha8Rng| {
            let mag = if rng.gen::<bool>() { 0.25 } else { 0.5 };
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        };
        OcclusionEpisode {
            p0: (lattice(rng), lattice(rng)),
            v: (vel(rng), vel(rng)),
            occluder: (rng.gen_range(0..OCC_GRID - 1), rng.gen_range(0..OCC_GRID - 1)),
            frames,
            l,
        }
    }

    pub fn pos(&self, t: usize) -> (f64, f64) {
        (
            fold(self.p0.0 + self.v.0 * t as f64),
            fold(self.p0.1 + self.v.1 * t as f64),
        )
    }

    pub fn cell(&self, t: usize) -> (usize, usize) {
        let (x, y) = self.pos(t);
        ((x * OCC_GRID as f64) as usize, (y * OCC_GRID as f64) as usize)
    }

    /// Frames [frames−1−L, frames−2] are occluded (the L frames right
    /// before the final one).
    pub fn window(&self) -> std::ops::Range<usize> {
        self.frames - 1 - self.l..self.frames - 1
    }

    fn in_occluder(&self, cell: (usize, usize)) -> bool {
        let (r, c) = self.occluder;
        (r..r + 2).contains(&cell.1) && (c..c + 2).contains(&cell.0)
    }

    /// Is the ball rendered in frame t?
    pub fn ball_visible(&self, t: usize) -> bool {
        if self.window().contains(&t) {
            false
        } else {
            // in the final (and pre-window) frames the fixed occluder
            // region still hides the ball when it sits underneath
            !(t == self.frames - 1 && self.in_occluder(self.cell(t)))
        }
    }

    pub fn target(&self) -> usize {
        let (x, y) = self.pos(self.frames - 1);
        quadrant(x, y)
    }
}

fn occ_tokens(ep: &OcclusionEpisode, out: &mut ndarray::ArrayViewMut2<f64>) {
    // cells are indexed (col, row) = (x, y); patch p covers the 2×2
    // block with top-left (2·(p%2), 2·(p/2))
    for t in 0..ep.frames {
        let ball = ep.ball_visible(t).then(|| ep.cell(t));
        for p in 0..OCC_PATCHES {
            let row = t * OCC_TOKENS_PER_FRAME + p;
            let mut tok = out.row_mut(row);
            tok[0] = 1.0; // type: patch
            tok[2 + p] = 1.0;
            let (px, py) = (2 * (p % 2), 2 * (p / 2));
            for bit in 0..4 {
                let cell = (px + bit % 2, py + bit / 2);
                if ball == Some(cell) {
                    tok[6 + bit] = 1.0;
                }
                let occluded_frame =
                    ep.window().contains(&t) || t == ep.frames - 1 && !ep.ball_visible(t);
                if occluded_frame && ep.in_occluder(cell) {
                    tok[10 + bit] = 1.0;
                }
            }
        }
        // occluder-position token (always visible)
        let mut tok = out.row_mut(t * OCC_TOKENS_PER_FRAME + OCC_PATCHES);
        tok[1] = 1.0; // type: occluder position
        tok[14] = ep.occluder.0 as f64 / OCC_GRID as f64;
        tok[15] = ep.occluder.1 as f64 / OCC_GRID as f64;
    }
}

/// Hand-coded physics oracle: read the ball's cell from the visible
/// pre-window frames, brute-force the lattice velocity hypothesis that
/// explains all of them, and integrate to the final frame.
pub fn occlusion_oracle(tokens: &ndarray::ArrayView2<f64>, frames: usize) -> Option<usize> {
    let mut seen: Vec<(usize, (usize, usize))> = Vec::new();
    for t in 0..frames {
        let mut cell = None;
        for p in 0..OCC_PATCHES {
            let tok = tokens.row(t * OCC_TOKENS_PER_FRAME + p);
            for bit in 0..4 {
                if tok[6 + bit] == 1.0 {
                    cell = Some((2 * (p % 2) + bit % 2, 2 * (p / 2) + bit / 2));
                }
            }
        }
        if let Some(c) = cell {
            seen.push((t, c));
        }
    }
    if seen.len() < 2 {
        return None;
    }
    let center = |c: usize| (2 * c + 1) as f64 / 8.0;
    let (t0, c0) = seen[0];
    let p0 = (center(c0.0), center(c0.1));
    let mags = [-0.5, -0.25, 0.25, 0.5];
    for vx in mags {
        for vy in mags {
            let ok = seen.iter().all(|&(t, c)| {
                let dt = (t - t0) as f64;
                let x = fold(p0.0 + vx * dt);
                let y = fold(p0.1 + vy * dt);
                ((x * 4.0) as usize, (y * 4.0) as usize) == c
            });
            if ok {
                let dt = (frames - 1 - t0) as f64;
                return Some(quadrant(fold(p0.0 + vx * dt), fold(p0.1 + vy * dt)));
            }
        }
    }
    None
}

pub fn gen_occlusion(l: usize, frames: usize, b: usize, rng: &mut ChaCha8Rng) -> ToyBatch {
    let n = frames * OCC_TOKENS_PER_FRAME;
    let mut feats = ArrayD::zeros(IxDyn(&[b, n, OCC_DIM]));
    let mut answers = Vec::with_capacity(b);
    for bi in 0..b {
        let ep = OcclusionEpisode::sample(rng, l, frames);
        let mut view = feats
            .index_axis_mut(ndarray::Axis(0), bi)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        occ_tokens(&ep, &mut view);
        answers.push(vec![(n - 1, ep.target())]);
    }
    ToyBatch {
        tokens: TokenInput::Feats(feats),
        answers,
    }
}

pub fn gen_map(t_steps: usize, b: usize, rng: &mut ChaCha8Rng) -> ToyBatch {
    let n = t_steps + 1;
    let mut feats = ArrayD::zeros(IxDyn(&[b, n, MAP_DIM]));
    let mut answers = Vec::with_capacity(b);
    for bi in 0..b {
        let grid: Vec<bool> = (0..MAP_GRID * MAP_GRID).map(|_| rng.gen()).collect();
        // random walk over patch top-left positions with wraparound
        let (mut r, mut c) = (rng.gen_range(0..MAP_GRID), rng.gen_range(0..MAP_GRID));
        let mut observed: Vec<(usize, usize)> = Vec::new();
        for step in 0..t_steps {
            let mut tok = feats
                .index_axis_mut(ndarray::Axis(0), bi)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .row_mut(step)
                .to_owned();
            tok[0] = 1.0; // type: observation
            for bit in 0..4 {
                let (rr, cc) = ((r + bit / 2) % MAP_GRID, (c + bit % 2) % MAP_GRID);
                observed.push((rr, cc));
                if grid[rr * MAP_GRID + cc] {
                    tok[2 + bit] = 1.0;
                }
            }
            tok[6] = r as f64 / MAP_GRID as f64;
            tok[7] = c as f64 / MAP_GRID as f64;
            feats
                .index_axis_mut(ndarray::Axis(0), bi)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .row_mut(step)
                .assign(&tok);
            // next walk step: one of 4 neighbors, wrapping
            match rng.gen_range(0..4) {
                0 => r = (r + 1) % MAP_GRID,
                1 => r = (r + MAP_GRID - 1) % MAP_GRID,
                2 => c = (c + 1) % MAP_GRID,
                _ => c = (c + MAP_GRID - 1) % MAP_GRID,
            }
        }
        let &(qr, qc) = &observed[rng.gen_range(0..observed.len())];
        {
            let mut view = feats
                .index_axis_mut(ndarray::Axis(0), bi)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut tok = view.row_mut(t_steps);
            tok[1] = 1.0; // type: query
            tok[8] = qr as f64 / MAP_GRID as f64;
            tok[9] = qc as f64 / MAP_GRID as f64;
        }
        answers.push(vec![(n - 1, usize::from(grid[qr * MAP_GRID + qc]))]);
    }
    ToyBatch {
        tokens: TokenInput::Feats(feats),
        answers,
    }
}

/// Rejection-sample `w` coordinates in [−1,1]³ with pairwise distance
/// ≥ 2.5·σ (σ floored at 0.02 so W=·, σ=0 stays well-posed).
fn sample_write_coords(w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 3]>> {
    let min_dist = 2.5 * sigma.max(0.02);
    let mut coords: Vec<[f64; 3]> = Vec::with_capacity(w);
    let mut attempts = 0usize;
    while coords.len() < w {
        attempts += 1;
        if attempts > 1000 * w {
            return Err(Error::Config(format!(
                "cannot place {w} write coordinates with pairwise separation {min_dist:.3}; reduce W or sigma_noise"
            )));
        }
        let cand = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let ok = coords.iter().all(|c| dist(c, &cand) >= min_dist);
        if ok {
            coords.push(cand);
        }
    }
    Ok(coords)
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn gen_binding(w: usize, sigma: f64, b: usize, rng: &mut ChaCha8Rng) -> Result<ToyBatch> {
    let n = w + BIND_Q;
    let mut feats = ArrayD::zeros(IxDyn(&[b, n, BIND_DIM]));
    let mut answers = Vec::with_capacity(b);
    let gap = 0.5 * sigma.max(0.02);
    for bi in 0..b {
        let coords = sample_write_coords(w, sigma, rng)?;
        let values: Vec<usize> = (0..w).map(|_| rng.gen_range(0..BIND_V)).collect();
        let mut view = feats
            .index_axis_mut(ndarray::Axis(0), bi)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for (i, (c, &val)) in coords.iter().zip(&values).enumerate() {
            let mut tok = view.row_mut(i);
            tok[0] = 1.0; // type: write
            tok[2] = c[0];
            tok[3] = c[1];
            tok[4] = c[2];
            tok[5 + val] = 1.0;
        }
        let mut ans = Vec::with_capacity(BIND_Q);
        for qi in 0..BIND_Q {
            // resample noise until nearest vs second-nearest is
            // unambiguous by ≥ 0.5·σ
            let (q, target) = loop {
                let base = coords[rng.gen_range(0..w)];
                let mut q = [0.0f64; 3];
                for (qc, bc) in q.iter_mut().zip(&base) {
                    let noise = normal(rng) * sigma;
                    *qc = (bc + noise).clamp(-1.0, 1.0);
                }
                let mut ds: Vec<(f64, usize)> = coords
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (dist(c, &q), i))
                    .collect();
                ds.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                if w == 1 || ds[1].0 - ds[0].0 >= gap {
                    break (q, values[ds[0].1]);
                }
            };
            let mut tok = view.row_mut(w + qi);
            tok[1] = 1.0; // type: query
            tok[2] = q[0];
            tok[3] = q[1];
            tok[4] = q[2];
            ans.push((w + qi, target));
        }
        answers.push(ans);
    }
    Ok(ToyBatch {
        tokens: TokenInput::Feats(feats),
        answers,
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gen_noharm(seq_len: usize, shift: usize, b: usize, rng: &mut ChaCha8Rng) -> ToyBatch {
    let mut ids = Vec::with_capacity(b);
    let mut answers = Vec::with_capacity(b);
    for _ in 0..b {
        let row: Vec<usize> = (0..seq_len).map(|_| rng.gen_range(0..NOHARM_VOCAB)).collect();
        let ans: Vec<(usize, usize)> = (shift..seq_len).map(|i| (i, row[i - shift])).collect();
        ids.push(row);
        answers.push(ans);
    }
    ToyBatch {
        tokens: TokenInput::Ids(ids),
        answers,
    }
}

/// Generate batch `index` of the stream defined by `spec`.
pub fn gen_batch(spec: &ToySpec, index: u64) -> Result<ToyBatch> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, &format!("{}.batch{index}", spec.task.name()));
    let b = spec.batch_size;
    match spec.task {
        TaskSpec::Occlusion { l, frames } => Ok(gen_occlusion(l, frames, b, &mut rng)),
        TaskSpec::MapBuilding { t } => Ok(gen_map(t, b, &mut rng)),
        TaskSpec::CoordBinding { w, sigma_noise } => gen_binding(w, sigma_noise, b, &mut rng),
        TaskSpec::NoHarm { seq_len, shift } => Ok(gen_noharm(seq_len, shift, b, &mut rng)),
    }
}

// ---------------------------------------------------------------------------
// Batch dump container
// ---------------------------------------------------------------------------

const BATCH_MAGIC: &[u8; 4] = b"VXTB";
const BATCH_VERSION: u32 = 1;

/// Dump a batch to a versioned binary container: magic, version, spec
/// echo (JSON), token kind, shapes, then row-major arrays (u64 ids or
/// little-endian f64 features) and the answer list.
pub fn dump_batch(path: &std::path::Path, spec: &ToySpec, batch: &ToyBatch) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(BATCH_MAGIC);
    buf.extend_from_slice(&BATCH_VERSION.to_le_bytes());
    let spec_json = serde_json::to_string(spec).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(spec_json.as_bytes());
    match &batch.tokens {
        TokenInput::Ids(ids) => {
            buf.push(0);
            buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
            buf.extend_from_slice(&(ids.first().map_or(0, Vec::len) as u64).to_le_bytes());
            for row in ids {
                for &id in row {
                    buf.extend_from_slice(&(id as u64).to_le_bytes());
                }
            }
        }
        TokenInput::Feats(f) => {
            buf.push(1);
            buf.extend_from_slice(&(f.ndim() as u64).to_le_bytes());
            for &d in f.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in f.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf.extend_from_slice(&(batch.answers.len() as u64).to_le_bytes());
    for row in &batch.answers {
        buf.extend_from_slice(&(row.len() as u64).to_le_bytes());
        for &(pos, label) in row {
            buf.extend_from_slice(&(pos as u64).to_le_bytes());
            buf.extend_from_slice(&(label as u64).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_batch(path: &std::path::Path) -> Result<(ToySpec, ToyBatch)> {
    let data = std::fs::read(path)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > data.len() {
            return Err(Error::Format("truncated batch file".into()));
        }
        let s = &data[*at..*at + n];
        *at += n;
        Ok(s)
    };
    let u64_at = |at: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()))
    };
    if take(&mut at, 4)? != BATCH_MAGIC {
        return Err(Error::Format("not a batch file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != BATCH_VERSION {
        return Err(Error::Format(format!("unsupported batch version {version}")));
    }
    let spec_len = u64_at(&mut at)? as usize;
    let spec: ToySpec = serde_json::from_slice(take(&mut at, spec_len)?)
        .map_err(|e| Error::Format(format!("bad spec echo: {e}")))?;
    let kind = take(&mut at, 1)?[0];
    let tokens = match kind {
        0 => {
            let b = u64_at(&mut at)? as usize;
            let n = u64_at(&mut at)? as usize;
            let mut ids = Vec::with_capacity(b);
            for _ in 0..b {
                let mut row = Vec::with_capacity(n);
                for _ in 0..n {
                    row.push(u64_at(&mut at)? as usize);
                }
                ids.push(row);
            }
            TokenInput::Ids(ids)
        }
        1 => {
            let ndim = u64_at(&mut at)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64_at(&mut at)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                vals.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
            }
            TokenInput::Feats(
                ArrayD::from_shape_vec(IxDyn(&shape), vals)
                    .map_err(|e| Error::Format(e.to_string()))?,
            )
        }
        other => return Err(Error::Format(format!("unknown token kind {other}"))),
    };
    let b = u64_at(&mut at)? as usize;
    let mut answers = Vec::with_capacity(b);
    for _ in 0..b {
        let k = u64_at(&mut at)? as usize;
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            let pos = u64_at(&mut at)? as usize;
            let label = u64_at(&mut at)? as usize;
            row.push((pos, label));
        }
        answers.push(row);
    }
    Ok((spec, ToyBatch { tokens, answers }))
}
