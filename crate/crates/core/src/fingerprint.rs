//! Offline phase: empty-room baseline, grid sweep with the human target,
//! ΔRSS features, stratified splitting and the dataset file format.
//!
//! Dataset files are CSV with a block of `# key=value` metadata lines, then
//! the header `x_m,y_m,drss_0,…,drss_8,split`. Feature values carry 9
//! significant digits; sweeps round their features to that precision up
//! front so a dataset read back from disk equals the one written.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{multi_bounce_gains, ChannelBase, DetectorVec, GainSet};
use crate::error::{Error, Result};
use crate::scene::{build_scene, Scene, SceneConfig, DETECTOR_COUNT};

/// Empty-room reference RSS, tied to the scene it was computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub scene_digest: String,
    pub bounces: usize,
    pub rss_mw: DetectorVec,
    pub gains: DetectorVec,
}

impl Baseline {
    pub fn from_gains(scene: &Scene, bounces: usize, g: &GainSet) -> Self {
        Baseline {
            scene_digest: scene.config_digest(),
            bounces,
            rss_mw: g.rss_mw,
            gains: g.gains,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("baseline serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Noise-free empty-room RSS vector.
pub fn compute_baseline(scene: &Scene, bounces: usize) -> Result<Baseline> {
    if scene.human().is_some() {
        return Err(Error::Misuse("baseline requires an empty room".into()));
    }
    let g = multi_bounce_gains(scene, bounces)?;
    Ok(Baseline::from_gains(scene, bounces, &g))
}

/// `occupied − empty`, per detector.
pub fn delta_rss(occupied: &[f64], empty: &[f64]) -> Result<DetectorVec> {
    for v in [occupied, empty] {
        if v.len() != DETECTOR_COUNT {
            return Err(Error::Length {
                expected: DETECTOR_COUNT,
                got: v.len(),
            });
        }
    }
    let mut out = [0.0; DETECTOR_COUNT];
    for (o, (a, b)) in out.iter_mut().zip(occupied.iter().zip(empty)) {
        *o = a - b;
    }
    Ok(out)
}

/// Rounds to the 9 significant digits stored in dataset files.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "none" => Split::None,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingerprintRow {
    pub x: f64,
    pub y: f64,
    pub drss: DetectorVec,
    pub split: Split,
}

/// Evenly spaced coordinates `start + i·step`, `i < count`, on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            start: 0.1,
            step: 0.1,
            count: 49,
        }
    }
}

impl GridSpec {
    pub fn coordinate(&self, i: usize) -> f64 {
        // Snap to 1e-9 m so that 0.1 + 2·0.1 is stored as 0.3.
        ((self.start + i as f64 * self.step) * 1e9).round() / 1e9
    }

    /// Row-major positions: y outer, x inner.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        (0..self.count)
            .flat_map(|iy| {
                (0..self.count).map(move |ix| (self.coordinate(ix), self.coordinate(iy)))
            })
            .collect()
    }
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: DetectorVec,
    pub std: DetectorVec,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; DETECTOR_COUNT],
            std: [1.0; DETECTOR_COUNT],
        }
    }

    pub fn fit<'a>(features: impl IntoIterator<Item = &'a DetectorVec>) -> Result<Self> {
        let rows: Vec<&DetectorVec> = features.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Misuse("normalization needs at least one row".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; DETECTOR_COUNT];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = [0.0; DETECTOR_COUNT];
        for r in &rows {
            for ((s, v), m) in std.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if s.is_nan() || *s <= 0.0 {
                *s = 1.0;
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, drss: &DetectorVec) -> DetectorVec {
        let mut out = [0.0; DETECTOR_COUNT];
        for j in 0..DETECTOR_COUNT {
            out[j] = (drss[j] - self.mean[j]) / self.std[j];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset {
    pub rows: Vec<FingerprintRow>,
    pub scene_digest: String,
    pub room_m: [f64; 2],
    pub grid: Option<GridSpec>,
    pub bounces: usize,
    pub seed: u64,
    /// Largest distance a body center was moved to keep the footprint in
    /// the room.
    pub max_clamp_m: f64,
    /// Fitted on the training split only.
    pub norm: Option<NormStats>,
}

impl FingerprintDataset {
    pub fn with_split(&self, split: Split) -> impl Iterator<Item = &FingerprintRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.with_split(split).count()
    }

    /// Serializes to the documented CSV layout.
    pub fn to_csv(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        let _ = writeln!(out, "# scene_digest={}", self.scene_digest);
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(out, "# bounces={}", self.bounces);
        let _ = writeln!(out, "# room_m={}", list(&self.room_m));
        if let Some(g) = &self.grid {
            let _ = writeln!(out, "# grid={},{},{}", g.start, g.step, g.count);
        }
        let _ = writeln!(out, "# max_clamp_m={}", self.max_clamp_m);
        if let Some(n) = &self.norm {
            let _ = writeln!(out, "# norm_mean={}", list(&n.mean));
            let _ = writeln!(out, "# norm_std={}", list(&n.std));
        }
        out.push_str("x_m,y_m");
        for j in 0..DETECTOR_COUNT {
            let _ = write!(out, ",drss_{j}");
        }
        out.push_str(",split\n");
        for r in &self.rows {
            let _ = write!(out, "{:.8e},{:.8e}", r.x, r.y);
            for v in &r.drss {
                let _ = write!(out, ",{v:.8e}");
            }
            let _ = writeln!(out, ",{}", r.split.as_str());
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Reads and checks the dataset belongs to the scene `expected_digest`.
    pub fn read_strict(path: &Path, expected_digest: &str) -> Result<Self> {
        let ds = Self::read(path)?;
        if ds.scene_digest != expected_digest {
            return Err(Error::Invalidation {
                expected: expected_digest.to_owned(),
                found: ds.scene_digest,
            });
        }
        Ok(ds)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let floats = |line: usize, v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| err(line, format!("bad number {t:?}: {e}")))
                })
                .collect()
        };
        let nine = |line: usize, v: &str| -> Result<DetectorVec> {
            floats(line, v)?
                .try_into()
                .map_err(|v: Vec<f64>| err(line, format!("expected 9 values, got {}", v.len())))
        };

        let mut ds = FingerprintDataset {
            rows: Vec::new(),
            scene_digest: String::new(),
            room_m: [5.0, 5.0],
            grid: None,
            bounces: 0,
            seed: 0,
            max_clamp_m: 0.0,
            norm: None,
        };
        let (mut mean, mut std) = (None, None);
        let mut header_seen = false;
        let expected_header = {
            let mut h = String::from("x_m,y_m");
            for j in 0..DETECTOR_COUNT {
                h.push_str(&format!(",drss_{j}"));
            }
            h + ",split"
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let Some((key, value)) = meta.trim().split_once('=') else {
                    continue;
                };
                match key.trim() {
                    "scene_digest" => ds.scene_digest = value.trim().to_owned(),
                    "seed" => {
                        ds.seed = value
                            .trim()
                            .parse()
                            .map_err(|e| err(line_no, format!("bad seed: {e}")))?
                    }
                    "bounces" => {
                        ds.bounces = value
                            .trim()
                            .parse()
                            .map_err(|e| err(line_no, format!("bad bounces: {e}")))?
                    }
                    "room_m" => {
                        ds.room_m = floats(line_no, value)?
                            .try_into()
                            .map_err(|_| err(line_no, "room_m needs 2 values".into()))?
                    }
                    "grid" => {
                        let v = floats(line_no, value)?;
                        if v.len() != 3 {
                            return Err(err(line_no, "grid needs start,step,count".into()));
                        }
                        ds.grid = Some(GridSpec {
                            start: v[0],
                            step: v[1],
                            count: v[2] as usize,
                        });
                    }
                    "max_clamp_m" => ds.max_clamp_m = floats(line_no, value)?[0],
                    "norm_mean" => mean = Some(nine(line_no, value)?),
                    "norm_std" => std = Some(nine(line_no, value)?),
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                if line != expected_header {
                    return Err(err(line_no, format!("unexpected header {line:?}")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + DETECTOR_COUNT + 1 {
                return Err(err(
                    line_no,
                    format!(
                        "expected {} features, found {}",
                        DETECTOR_COUNT,
                        fields.len().saturating_sub(3)
                    ),
                ));
            }
            let nums = floats(line_no, &fields[..2 + DETECTOR_COUNT].join(","))?;
            if nums.iter().any(|v| !v.is_finite()) {
                return Err(err(line_no, "non-finite value".into()));
            }
            let split = Split::parse(fields[2 + DETECTOR_COUNT].trim())
                .ok_or_else(|| err(line_no, format!("unknown split {:?}", fields[11])))?;
            ds.rows.push(FingerprintRow {
                x: nums[0],
                y: nums[1],
                drss: nums[2..].try_into().expect("9 features"),
                split,
            });
        }
        if !header_seen {
            return Err(err(text.lines().count().max(1), "missing header".into()));
        }
        ds.norm = match (mean, std) {
            (Some(mean), Some(std)) => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(err(0, "norm_mean and norm_std must appear together".into())),
        };
        Ok(ds)
    }
}

/// Simulates ΔRSS for a body centered at each of `positions`; body centers
/// are clamped so the footprint stays in the room while rows keep the
/// nominal coordinates.
pub fn sweep_positions(
    base: &ChannelBase,
    positions: &[(f64, f64)],
) -> Result<(Vec<FingerprintRow>, f64)> {
    let scene = base.scene();
    let cfg = &scene.config;
    let rss0 = base.empty_gains().rss_mw;
    let rows: Vec<Result<(FingerprintRow, f64)>> = positions
        .par_iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let (cx, cy) = cfg.clamp_center(x, y);
            let mut g = base.place_and_recompute(cx, cy)?;
            if cfg.noise_sigma_mw > 0.0 {
                g = g.with_noise(cfg.noise_sigma_mw, cfg.noise_seed.wrapping_add(i as u64))?;
            }
            let drss = delta_rss(&g.rss_mw, &rss0)?.map(quantize);
            let moved = (cx - x).abs().max((cy - y).abs());
            Ok((
                FingerprintRow {
                    x,
                    y,
                    drss,
                    split: Split::None,
                },
                moved,
            ))
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    let mut max_clamp = 0.0_f64;
    for (r, &(x, y)) in rows.into_iter().zip(positions) {
        let (row, moved) = r.map_err(|e| match e {
            Error::Placement { .. } => Error::Placement { x, y },
            other => other,
        })?;
        max_clamp = max_clamp.max(moved);
        out.push(row);
    }
    Ok((out, max_clamp))
}

/// Sweeps the human over `grid` and returns the unsplit dataset.
pub fn sweep_grid(
    config: &SceneConfig,
    grid: GridSpec,
    bounces: usize,
) -> Result<FingerprintDataset> {
    let scene = build_scene(config)?;
    let base = ChannelBase::new(&scene, bounces)?;
    sweep_grid_with(&base, grid)
}

pub fn sweep_grid_with(base: &ChannelBase, grid: GridSpec) -> Result<FingerprintDataset> {
    let cfg = &base.scene().config;
    let (rows, max_clamp_m) = sweep_positions(base, &grid.positions())?;
    Ok(FingerprintDataset {
        rows,
        scene_digest: base.digest().to_owned(),
        room_m: [cfg.room_size_m[0], cfg.room_size_m[1]],
        grid: Some(grid),
        bounces: base.bounces(),
        seed: cfg.noise_seed,
        max_clamp_m,
        norm: None,
    })
}

/// Distance from (x, y) to the nearest wall.
pub fn wall_distance(room: [f64; 2], x: f64, y: f64) -> f64 {
    x.min(y).min(room[0] - x).min(room[1] - y)
}

pub fn is_near_wall(room: [f64; 2], x: f64, y: f64, threshold: f64) -> bool {
    wall_distance(room, x, y) <= threshold + 1e-9
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

/// Assigns train/val/test labels separately within the near-wall and
/// interior strata, then fits normalization on the training rows.
///
/// In each stratum of n rows, `floor(val·n)` rows go to validation,
/// `floor(test·n)` to test and the remainder to training. Returns the
/// warnings raised for empty strata.
pub fn stratified_split(
    dataset: &mut FingerprintDataset,
    ratios: SplitRatios,
    wall_threshold_m: f64,
    seed: u64,
) -> Result<Vec<String>> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios {train}/{val}/{test} must sum to 1"
        )));
    }
    let room = dataset.room_m;
    let (near, interior): (Vec<usize>, Vec<usize>) = (0..dataset.rows.len())
        .partition(|&i| is_near_wall(room, dataset.rows[i].x, dataset.rows[i].y, wall_threshold_m));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    for (name, mut stratum) in [("near-wall", near), ("interior", interior)] {
        if stratum.is_empty() {
            warnings.push(format!(
                "{name} stratum is empty; splitting the remaining rows unstratified"
            ));
            continue;
        }
        stratum.shuffle(&mut rng);
        let n = stratum.len() as f64;
        let n_val = (val * n + 1e-9).floor() as usize;
        let n_test = (test * n + 1e-9).floor() as usize;
        let n_train = stratum.len() - n_val - n_test;
        for (k, &i) in stratum.iter().enumerate() {
            dataset.rows[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    dataset.seed = seed;
    dataset.norm = Some(NormStats::fit(
        dataset.with_split(Split::Train).map(|r| &r.drss),
    )?);
    Ok(warnings)
}
