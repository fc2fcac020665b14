//! Procedural lanes for the three discrete terrain families plus a flat control lane,
//! and the derived fields computed from them.
//!
//! Lanes run along world `+x`. Grid rows index `x`, columns index `y`, and the
//! `origin` is the minimum corner of cell `(0, 0)`, so cell `(i, j)` is centered at
//! `origin + ((i + 0.5) * cell, (j + 0.5) * cell)`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular elevation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    rows: usize,
    cols: usize,
    cell_size: f64,
    origin: [f64; 2],
    heights: Vec<f64>,
    min_height: f64,
    max_height: f64,
}

impl Heightfield {
    pub fn new(rows: usize, cols: usize, cell_size: f64, origin: [f64; 2], heights: Vec<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::InvalidHeightfield(format!("grid {rows}x{cols} is smaller than 2x2")));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidHeightfield(format!("cell size {cell_size} must be positive")));
        }
        if heights.len() != rows * cols {
            return Err(Error::InvalidHeightfield(format!(
                "{rows}x{cols} grid needs {} heights, got {}",
                rows * cols,
                heights.len()
            )));
        }
        if let Some(i) = heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::InvalidHeightfield(format!("height at index {i} is not finite")));
        }
        let min_height = heights.iter().copied().fold(f64::INFINITY, f64::min);
        let max_height = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            rows,
            cols,
            cell_size,
            origin,
            heights,
            min_height,
            max_height,
        })
    }

    pub fn flat(rows: usize, cols: usize, cell_size: f64, height: f64) -> Result<Self> {
        Self::new(rows, cols, cell_size, [0.0, 0.0], vec![height; rows * cols])
    }

    /// Builds a field by evaluating `f` at every cell center.
    pub fn from_fn(rows: usize, cols: usize, cell_size: f64, origin: [f64; 2], f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut heights = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = origin[0] + (i as f64 + 0.5) * cell_size;
                let y = origin[1] + (j as f64 + 0.5) * cell_size;
                heights.push(f(x, y));
            }
        }
        Self::new(rows, cols, cell_size, origin, heights)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn min_height(&self) -> f64 {
        self.min_height
    }

    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.heights[i * self.cols + j]
    }

    /// World extent `(rows * cell, cols * cell)`.
    pub fn extent(&self) -> (f64, f64) {
        (self.rows as f64 * self.cell_size, self.cols as f64 * self.cell_size)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin[0] + (i as f64 + 0.5) * self.cell_size,
            self.origin[1] + (j as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (ex, ey) = self.extent();
        let (lx, ly) = (x - self.origin[0], y - self.origin[1]);
        (0.0..=ex).contains(&lx) && (0.0..=ey).contains(&ly)
    }

    /// Cell containing `(x, y)`; points on the far boundary map to the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let i = (((x - self.origin[0]) / self.cell_size).floor() as usize).min(self.rows - 1);
        let j = (((y - self.origin[1]) / self.cell_size).floor() as usize).min(self.cols - 1);
        Some((i, j))
    }

    pub fn clamp_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (ex, ey) = self.extent();
        (
            x.clamp(self.origin[0], self.origin[0] + ex),
            y.clamp(self.origin[1], self.origin[1] + ey),
        )
    }

    /// Bilinear interpolation between cell centers, extrapolated linearly over the
    /// half cell next to the boundary. Exact at cell centers.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(Error::OutOfBounds { x, y });
        }
        Ok(self.interpolate(x, y).0)
    }

    /// [`sample`](Self::sample) after clamping the query into the extent.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let (x, y) = self.clamp_point(x, y);
        self.interpolate(x, y).0
    }

    /// Height and its `(d/dx, d/dy)` after clamping the query into the extent.
    pub fn sample_with_gradient(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (x, y) = self.clamp_point(x, y);
        self.interpolate(x, y)
    }

    fn interpolate(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let u = (x - self.origin[0]) / self.cell_size - 0.5;
        let v = (y - self.origin[1]) / self.cell_size - 0.5;
        let i0 = (u.floor().max(0.0) as usize).min(self.rows - 2);
        let j0 = (v.floor().max(0.0) as usize).min(self.cols - 2);
        let tu = u - i0 as f64;
        let tv = v - j0 as f64;
        let h00 = self.at(i0, j0);
        let h01 = self.at(i0, j0 + 1);
        let h10 = self.at(i0 + 1, j0);
        let h11 = self.at(i0 + 1, j0 + 1);
        let low = (1.0 - tv) * h00 + tv * h01;
        let high = (1.0 - tv) * h10 + tv * h11;
        let h = (1.0 - tu) * low + tu * high;
        let dx = (high - low) / self.cell_size;
        let dy = ((1.0 - tu) * (h01 - h00) + tu * (h11 - h10)) / self.cell_size;
        (h, [dx, dy])
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "HFLD {} {} {} {} {}",
            self.rows, self.cols, self.cell_size, self.origin[0], self.origin[1]
        )?;
        let mut line = String::new();
        for i in 0..self.rows {
            line.clear();
            for j in 0..self.cols {
                if j > 0 {
                    line.push(' ');
                }
                write!(line, "{}", self.at(i, j)).expect("write to string");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty heightfield file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "HFLD" {
            return Err(Error::Parse(format!("bad header `{header}`")));
        }
        let rows: usize = parse(fields[1])?;
        let cols: usize = parse(fields[2])?;
        let cell: f64 = parse(fields[3])?;
        let origin = [parse(fields[4])?, parse(fields[5])?];
        let mut heights = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let before = heights.len();
            for tok in line.split_whitespace() {
                heights.push(parse::<f64>(tok)?);
            }
            if heights.len() - before != cols {
                return Err(Error::Parse(format!("row {i} has {} values, expected {cols}", heights.len() - before)));
            }
        }
        Self::new(rows, cols, cell, origin, heights)
    }
}

fn parse<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("cannot parse `{s}`")))
}

// ------------------------------------------------------------------------------------
// Edge distance

/// Per-cell Euclidean distance (meters, center to center) to the nearest edge cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistanceField {
    rows: usize,
    cols: usize,
    cell_size: f64,
    origin: [f64; 2],
    distance: Vec<f64>,
    edge: Vec<bool>,
}

impl EdgeDistanceField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.distance[i * self.cols + j]
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.edge[i * self.cols + j]
    }

    pub fn distances(&self) -> &[f64] {
        &self.distance
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Distance of the cell containing `(x, y)`; zero outside the grid.
    pub fn at_point(&self, x: f64, y: f64) -> f64 {
        let i = ((x - self.origin[0]) / self.cell_size).floor();
        let j = ((y - self.origin[1]) / self.cell_size).floor();
        if i < 0.0 || j < 0.0 || i >= self.rows as f64 || j >= self.cols as f64 {
            return 0.0;
        }
        self.at(i as usize, j as usize)
    }
}

/// Marks edge cells: grid border cells, and cells whose height differs from any
/// 4-neighbor by more than `h_edge`.
pub fn edge_mask(hf: &Heightfield, h_edge: f64) -> Vec<bool> {
    let (rows, cols) = (hf.rows(), hf.cols());
    let mut edge = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let border = i == 0 || j == 0 || i + 1 == rows || j + 1 == cols;
            let h = hf.at(i, j);
            let step = |a: usize, b: usize| (hf.at(a, b) - h).abs() > h_edge;
            edge[i * cols + j] = border
                || (i > 0 && step(i - 1, j))
                || (i + 1 < rows && step(i + 1, j))
                || (j > 0 && step(i, j - 1))
                || (j + 1 < cols && step(i, j + 1));
        }
    }
    edge
}

/// Exact Euclidean distance transform to the nearest edge cell (separable lower
/// envelope of parabolas over squared integer distances).
pub fn edge_distance(hf: &Heightfield, h_edge: f64) -> EdgeDistanceField {
    let (rows, cols) = (hf.rows(), hf.cols());
    let edge = edge_mask(hf, h_edge);
    let inf = ((rows * rows + cols * cols) * 4) as f64;
    let mut sq: Vec<f64> = edge.iter().map(|&e| if e { 0.0 } else { inf }).collect();

    let mut f = vec![0.0; rows.max(cols)];
    let mut d = vec![0.0; rows.max(cols)];
    let mut v = vec![0usize; rows.max(cols)];
    let mut z = vec![0.0; rows.max(cols) + 1];
    // Along columns (fixed row).
    for i in 0..rows {
        f[..cols].copy_from_slice(&sq[i * cols..(i + 1) * cols]);
        squared_dt_1d(&f[..cols], &mut d[..cols], &mut v, &mut z);
        sq[i * cols..(i + 1) * cols].copy_from_slice(&d[..cols]);
    }
    // Along rows (fixed column).
    for j in 0..cols {
        for i in 0..rows {
            f[i] = sq[i * cols + j];
        }
        squared_dt_1d(&f[..rows], &mut d[..rows], &mut v, &mut z);
        for i in 0..rows {
            sq[i * cols + j] = d[i];
        }
    }
    let distance = sq.iter().map(|&s| s.sqrt() * hf.cell_size()).collect();
    EdgeDistanceField {
        rows,
        cols,
        cell_size: hf.cell_size(),
        origin: hf.origin(),
        distance,
        edge,
    }
}

fn squared_dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}

// ------------------------------------------------------------------------------------
// Local height grid

/// Base pose used for egocentric sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

/// Sample offsets in the base yaw frame. The flattened grid is row-major with the
/// forward offset as the slow axis: `index = ix * lateral.len() + iy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub forward: Vec<f64>,
    pub lateral: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            forward: (0..11).map(|i| -0.4 + 0.2 * i as f64).collect(),
            lateral: (0..7).map(|i| -0.3 + 0.1 * i as f64).collect(),
        }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.forward.len() * self.lateral.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Terrain heights around the base, relative to the base height, clamped at the
/// terrain bounds.
pub fn sample_local_grid(hf: &Heightfield, pose: BasePose, grid: &GridSpec) -> Vec<f64> {
    let (s, c) = pose.yaw.sin_cos();
    let mut out = Vec::with_capacity(grid.len());
    for &fx in &grid.forward {
        for &ly in &grid.lateral {
            let x = pose.x + c * fx - s * ly;
            let y = pose.y + s * fx + c * ly;
            out.push(hf.sample_clamped(x, y) - pose.z);
        }
    }
    out
}

// ------------------------------------------------------------------------------------
// Procedural generation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerrainFamily {
    #[serde(rename = "wall-gap")]
    WallAssistedGap,
    #[serde(rename = "surmounting")]
    Surmounting,
    #[serde(rename = "stepping-stones")]
    SteppingStones,
    #[serde(rename = "flat")]
    Flat,
}

impl TerrainFamily {
    pub const ALL: [TerrainFamily; 4] = [
        TerrainFamily::WallAssistedGap,
        TerrainFamily::Surmounting,
        TerrainFamily::SteppingStones,
        TerrainFamily::Flat,
    ];

    fn tag(self) -> u64 {
        match self {
            TerrainFamily::WallAssistedGap => 1,
            TerrainFamily::Surmounting => 2,
            TerrainFamily::SteppingStones => 3,
            TerrainFamily::Flat => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TerrainFamily::WallAssistedGap => "wall-gap",
            TerrainFamily::Surmounting => "surmounting",
            TerrainFamily::SteppingStones => "stepping-stones",
            TerrainFamily::Flat => "flat",
        }
    }
}

impl FromStr for TerrainFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "wall-gap" | "wall-assisted-gap" | "wallassistedgap" | "gap" => Ok(Self::WallAssistedGap),
            "surmounting" | "platform" => Ok(Self::Surmounting),
            "stepping-stones" | "steppingstones" | "stones" => Ok(Self::SteppingStones),
            "flat" => Ok(Self::Flat),
            other => Err(Error::InvalidSpec(format!("unknown terrain family `{other}`"))),
        }
    }
}

/// Generator configuration shared by every lane. Feature parameters interpolate
/// linearly between their `(easiest, hardest)` endpoints across the curriculum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    pub levels: usize,
    pub cell_size: f64,
    pub lane_length: f64,
    pub lane_width: f64,
    pub pad_length: f64,
    pub roughness: f64,
    pub wall_band_width: f64,
    pub pit_depth: f64,
    pub gap_width: (f64, f64),
    pub platform_height: (f64, f64),
    pub inclination_deg: (f64, f64),
    pub stone_size: (f64, f64),
    pub stone_height_variation: (f64, f64),
    pub stone_spacing: (f64, f64),
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            levels: 10,
            cell_size: 0.05,
            lane_length: 20.0,
            lane_width: 4.0,
            pad_length: 2.0,
            roughness: 0.03,
            wall_band_width: 0.4,
            pit_depth: 1.0,
            gap_width: (0.3, 1.2),
            platform_height: (0.2, 0.7),
            inclination_deg: (50.0, 80.0),
            stone_size: (0.8, 0.5),
            stone_height_variation: (0.0, 0.4),
            stone_spacing: (0.05, 0.35),
        }
    }
}

/// Scalar difficulty parameters at one curriculum level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelParams {
    pub gap_width: f64,
    pub platform_height: f64,
    pub inclination_deg: f64,
    pub stone_size: f64,
    pub stone_height_variation: f64,
    pub stone_spacing: f64,
}

impl TerrainConfig {
    pub fn level_params(&self, level: usize) -> Result<LevelParams> {
        if level >= self.levels {
            return Err(Error::InvalidSpec(format!(
                "level {level} is outside the curriculum range 0..{}",
                self.levels
            )));
        }
        let t = if self.levels > 1 {
            level as f64 / (self.levels - 1) as f64
        } else {
            1.0
        };
        let lerp = |(a, b): (f64, f64)| a + t * (b - a);
        Ok(LevelParams {
            gap_width: lerp(self.gap_width),
            platform_height: lerp(self.platform_height),
            inclination_deg: lerp(self.inclination_deg),
            stone_size: lerp(self.stone_size),
            stone_height_variation: lerp(self.stone_height_variation),
            stone_spacing: lerp(self.stone_spacing),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub family: TerrainFamily,
    pub level: usize,
    pub seed: u64,
    /// Replaces the level's wall inclination (evaluation presets).
    pub inclination_override: Option<f64>,
}

impl TerrainSpec {
    pub fn new(family: TerrainFamily, level: usize, seed: u64) -> Self {
        Self {
            family,
            level,
            seed,
            inclination_override: None,
        }
    }
}

/// Inclined ramp band. Height rises linearly across the band along `rise_axis`
/// (0 = x, 1 = y) in the direction of `rise_sign`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallBand {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub rise_axis: usize,
    pub rise_sign: f64,
    pub base_height: f64,
    pub top_height: f64,
    pub inclination_deg: f64,
}

impl WallBand {
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn height_at(&self, x: f64, y: f64) -> f64 {
        let (lo, hi, p) = if self.rise_axis == 0 {
            (self.x0, self.x1, x)
        } else {
            (self.y0, self.y1, y)
        };
        let t = ((p - lo) / (hi - lo)).clamp(0.0, 1.0);
        let t = if self.rise_sign >= 0.0 { t } else { 1.0 - t };
        self.base_height + t * (self.top_height - self.base_height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Feature {
    Gap { x0: f64, x1: f64 },
    Platform { x0: f64, x1: f64, height: f64 },
    Stone { x0: f64, x1: f64, y0: f64, y1: f64, height: f64 },
}

/// Generated lane: heightfield plus the layout it was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terrain {
    pub spec: TerrainSpec,
    pub hf: Heightfield,
    pub walls: Vec<WallBand>,
    pub features: Vec<Feature>,
    /// Lateral coordinate of the lane centerline.
    pub center_y: f64,
    pub start_x: f64,
    pub finish_x: f64,
    /// Heights below this are pit floors, never valid footholds.
    pub pit_level: f64,
    wall_cells: Vec<bool>,
}

impl Terrain {
    /// Wraps an arbitrary field as a wall-free lane along `+x` with `pad` meter pads.
    pub fn from_heightfield(hf: Heightfield, pad: f64) -> Self {
        let (ex, ey) = hf.extent();
        let o = hf.origin();
        let cells = hf.rows() * hf.cols();
        let pit_level = hf.min_height().min(0.0) - 1.0;
        Self {
            spec: TerrainSpec::new(TerrainFamily::Flat, 0, 0),
            walls: Vec::new(),
            features: Vec::new(),
            center_y: o[1] + 0.5 * ey,
            start_x: o[0] + 0.5 * pad,
            finish_x: o[0] + ex - pad,
            pit_level,
            wall_cells: vec![false; cells],
            hf,
        }
    }

    /// True if `(x, y)` lies on a smooth wall band.
    pub fn on_wall(&self, x: f64, y: f64) -> bool {
        match self.hf.cell_of(x, y) {
            Some((i, j)) => self.wall_cells[i * self.hf.cols() + j],
            None => false,
        }
    }

    pub fn is_pit(&self, h: f64) -> bool {
        h < self.pit_level
    }

    pub fn lane_progress_length(&self) -> f64 {
        self.finish_x - self.start_x
    }
}

fn mix_seed(seed: u64, family: TerrainFamily, level: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ (family.tag() << 56) ^ ((level as u64) << 40) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates a lane. Deterministic for a fixed `(family, level, seed)` and config.
pub fn generate(cfg: &TerrainConfig, spec: &TerrainSpec) -> Result<Terrain> {
    let mut params = cfg.level_params(spec.level)?;
    if let Some(incl) = spec.inclination_override {
        if !(incl > 0.0 && incl < 90.0) {
            return Err(Error::InvalidSpec(format!("inclination {incl} deg must be in (0, 90)")));
        }
        params.inclination_deg = incl;
    }
    let feature_len = cfg.lane_length - 2.0 * cfg.pad_length;
    let needed = match spec.family {
        TerrainFamily::Flat => 0.0,
        TerrainFamily::WallAssistedGap => params.gap_width + 2.0 * cfg.wall_band_width + 2.0,
        TerrainFamily::Surmounting => cfg.wall_band_width + 3.0,
        TerrainFamily::SteppingStones => 2.0 * params.stone_size + params.stone_spacing,
    };
    if !(cfg.cell_size > 0.0) || cfg.pad_length < 0.5 {
        return Err(Error::InvalidSpec("cell size must be positive and pads at least 0.5 m".into()));
    }
    if feature_len < needed || feature_len <= 0.0 {
        return Err(Error::InvalidSpec(format!(
            "lane length {} m leaves {feature_len:.2} m between pads; {} needs at least {needed:.2} m",
            cfg.lane_length,
            spec.family.name()
        )));
    }
    let min_width = match spec.family {
        TerrainFamily::WallAssistedGap => 2.0 * (0.25 + cfg.wall_band_width) + 0.5,
        TerrainFamily::SteppingStones => params.stone_size + 0.5,
        _ => 1.0,
    };
    if cfg.lane_width < min_width {
        return Err(Error::InvalidSpec(format!(
            "lane width {} m is below the {min_width:.2} m needed by {}",
            cfg.lane_width,
            spec.family.name()
        )));
    }

    let rows = (cfg.lane_length / cfg.cell_size).round() as usize;
    let cols = (cfg.lane_width / cfg.cell_size).round() as usize;
    let center_y = 0.5 * cols as f64 * cfg.cell_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, spec.family, spec.level));
    let region = (cfg.pad_length, cfg.lane_length - cfg.pad_length);
    let pit = -cfg.pit_depth;

    let mut walls = Vec::new();
    let mut features = Vec::new();
    match spec.family {
        TerrainFamily::Flat => {}
        TerrainFamily::WallAssistedGap => {
            let tan = params.inclination_deg.to_radians().tan();
            let mut x = region.0 + rng.gen_range(0.8..1.5);
            while x + params.gap_width + 0.3 < region.1 {
                let (x0, x1) = (x, x + params.gap_width);
                features.push(Feature::Gap { x0, x1 });
                let left = rng.gen_bool(0.5);
                let (y0, y1, sign) = if left {
                    (center_y + 0.25, center_y + 0.25 + cfg.wall_band_width, 1.0)
                } else {
                    (center_y - 0.25 - cfg.wall_band_width, center_y - 0.25, -1.0)
                };
                walls.push(WallBand {
                    x0: x0 - 0.3,
                    x1: x1 + 0.3,
                    y0,
                    y1,
                    rise_axis: 1,
                    rise_sign: sign,
                    base_height: 0.0,
                    top_height: cfg.wall_band_width * tan,
                    inclination_deg: params.inclination_deg,
                });
                x = x1 + rng.gen_range(1.5..2.5);
            }
        }
        TerrainFamily::Surmounting => {
            let tan = params.inclination_deg.to_radians().tan();
            let h = params.platform_height;
            let ramp = (h / tan).min(cfg.wall_band_width);
            let mut x = region.0 + rng.gen_range(1.0..1.8);
            loop {
                let length = rng.gen_range(1.5..2.5);
                let (p0, p1) = (x + ramp, x + ramp + length);
                if p1 + 0.5 > region.1 {
                    break;
                }
                walls.push(WallBand {
                    x0: x,
                    x1: p0,
                    y0: 0.0,
                    y1: cols as f64 * cfg.cell_size,
                    rise_axis: 0,
                    rise_sign: 1.0,
                    base_height: h - ramp * tan,
                    top_height: h,
                    inclination_deg: params.inclination_deg,
                });
                features.push(Feature::Platform { x0: p0, x1: p1, height: h });
                x = p1 + rng.gen_range(1.5..2.5);
            }
        }
        TerrainFamily::SteppingStones => {
            let size = params.stone_size;
            let spacing = params.stone_spacing;
            let width = cols as f64 * cfg.cell_size;
            // Column layout is shared by every row so the centerline column stays continuous.
            let mut columns = vec![(center_y - 0.5 * size, center_y + 0.5 * size)];
            let mut right = center_y + 0.5 * size;
            let mut left = center_y - 0.5 * size;
            loop {
                let w = size * rng.gen_range(0.85..1.0);
                let s = spacing * rng.gen_range(1.0..1.3);
                if right + s + w > width - 0.1 {
                    break;
                }
                columns.push((right + s, right + s + w));
                right += s + w;
            }
            loop {
                let w = size * rng.gen_range(0.85..1.0);
                let s = spacing * rng.gen_range(1.0..1.3);
                if left - s - w < 0.1 {
                    break;
                }
                columns.push((left - s - w, left - s));
                left -= s + w;
            }
            columns.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut x = region.0;
            loop {
                let s = spacing * rng.gen_range(1.0..1.3);
                let l = size * rng.gen_range(0.85..1.0);
                if x + s + l > region.1 {
                    break;
                }
                for &(c0, c1) in &columns {
                    let shrink = if (c0 + c1) * 0.5 == center_y { 1.0 } else { rng.gen_range(0.85..1.0) };
                    let cw = (c1 - c0) * shrink;
                    let mid = 0.5 * (c0 + c1);
                    features.push(Feature::Stone {
                        x0: x + s,
                        x1: x + s + l,
                        y0: mid - 0.5 * cw,
                        y1: mid + 0.5 * cw,
                        height: rng.gen_range(0.0..=params.stone_height_variation.max(0.0)),
                    });
                }
                x += s + l;
            }
        }
    }

    let mut heights = vec![0.0; rows * cols];
    let mut wall_cells = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let x = (i as f64 + 0.5) * cfg.cell_size;
            let y = (j as f64 + 0.5) * cfg.cell_size;
            let in_region = x >= region.0 && x < region.1;
            let mut h = if spec.family == TerrainFamily::SteppingStones && in_region {
                pit
            } else {
                0.0
            };
            for f in &features {
                match *f {
                    Feature::Gap { x0, x1 } if x >= x0 && x < x1 => h = pit,
                    Feature::Platform { x0, x1, height } if x >= x0 && x < x1 => h = height,
                    Feature::Stone {
                        x0,
                        x1,
                        y0,
                        y1,
                        height,
                    } if x >= x0 && x < x1 && y >= y0 && y < y1 => h = height,
                    _ => {}
                }
            }
            let mut wall = false;
            for w in &walls {
                if w.contains(x, y) {
                    h = w.height_at(x, y);
                    wall = true;
                } else if w.rise_axis == 1 && x >= w.x0 && x <= w.x1 {
                    // Solid block behind a lateral wall face.
                    let behind = if w.rise_sign > 0.0 { y > w.y1 } else { y < w.y0 };
                    if behind {
                        h = w.top_height;
                        wall = false;
                    }
                }
            }
            if !wall && cfg.roughness > 0.0 {
                h += rng.gen_range(-cfg.roughness..=cfg.roughness);
            }
            heights[i * cols + j] = h;
            wall_cells[i * cols + j] = wall;
        }
    }
    let hf = Heightfield::new(rows, cols, cfg.cell_size, [0.0, 0.0], heights)?;
    Ok(Terrain {
        spec: spec.clone(),
        hf,
        walls,
        features,
        center_y,
        start_x: 0.5 * cfg.pad_length,
        finish_x: cfg.lane_length - cfg.pad_length,
        pit_level: pit + 0.5 * cfg.pit_depth,
        wall_cells,
    })
}
