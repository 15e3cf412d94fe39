//! Trajectory and random-location experiments, error statistics and
//! plot-ready exports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelBase;
use crate::ensemble::EnsembleBundle;
use crate::error::{Error, Result};
use crate::fingerprint::sweep_positions;
use crate::scene::{build_scene, SceneConfig};

pub const WALK_STEPS: usize = 25;
pub const WALK_STEP_M: f64 = 0.5;
pub const RANDOM_POINTS: usize = 100;
pub const MARGIN_M: f64 = 0.1;
const HEADING_TRIES: usize = 100;

fn need_some(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(Error::Misuse(
            "error statistics need at least one value".into(),
        ));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("positioning error".into()));
    }
    Ok(())
}

/// Mean positioning error.
pub fn mpe(errors: &[f64]) -> Result<f64> {
    need_some(errors)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Linear-interpolation percentile: rank r = 1 + q(n − 1) over the sorted
/// values, interpolating between floor(r) and ceil(r).
pub fn percentile(errors: &[f64], q: f64) -> Result<f64> {
    need_some(errors)?;
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let r = q * (v.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    Ok(v[lo] + (r - lo as f64) * (v[hi] - v[lo]))
}

pub fn p90(errors: &[f64]) -> Result<f64> {
    percentile(errors, 0.9)
}

/// `steps` positions with consecutive distance `step_m`; headings are
/// resampled until the next point stays `margin_m` inside the room.
pub fn random_walk(
    seed: u64,
    steps: usize,
    step_m: f64,
    margin_m: f64,
    room: [f64; 2],
) -> Result<Vec<(f64, f64)>> {
    let span = room[0].min(room[1]) - 2.0 * margin_m;
    if step_m.is_nan() || step_m <= 0.0 || step_m >= span {
        return Err(Error::Config(format!(
            "step length {step_m} m does not fit the room"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inside = |x: f64, y: f64| {
        x >= margin_m && x <= room[0] - margin_m && y >= margin_m && y <= room[1] - margin_m
    };
    let mut out = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(out);
    }
    out.push((
        rng.random_range(0.5..=room[0] - 0.5),
        rng.random_range(0.5..=room[1] - 0.5),
    ));
    while out.len() < steps {
        let (x, y) = *out.last().expect("non-empty");
        let next = (0..HEADING_TRIES).find_map(|_| {
            let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (nx, ny) = (x + step_m * h.cos(), y + step_m * h.sin());
            inside(nx, ny).then_some((nx, ny))
        });
        match next {
            Some(p) => out.push(p),
            None => {
                return Err(Error::Config(format!(
                    "no admissible heading from ({x:.3}, {y:.3}) after {HEADING_TRIES} tries"
                )))
            }
        }
    }
    Ok(out)
}

/// I.i.d. uniform positions `margin_m` inside the room.
pub fn random_points(seed: u64, n: usize, margin_m: f64, room: [f64; 2]) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                rng.random_range(margin_m..=room[0] - margin_m),
                rng.random_range(margin_m..=room[1] - margin_m),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub truth: [f64; 2],
    pub prediction: [f64; 2],
    pub error_cm: f64,
    /// Room-clamped output of each member.
    pub member_predictions: Vec<[f64; 2]>,
    pub inference_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub dataset_s: Option<f64>,
    pub training_s: Option<f64>,
    pub weight_fit_s: Option<f64>,
    pub simulation_s: f64,
    pub inference_ms_per_point: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub composition: String,
    pub weights: Vec<f64>,
    pub points: Vec<PointResult>,
    pub mpe_cm: f64,
    pub p90_cm: f64,
    pub member_mpe_cm: Vec<f64>,
    /// Largest shift applied to keep the body footprint inside the room.
    pub max_clamp_m: f64,
    pub timings: Timings,
    pub hardware: String,
}

pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {} threads",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads
    )
}

impl EvalReport {
    pub fn errors_cm(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.error_cm).collect()
    }

    /// Weighted mean of member MPEs, the bound the ensemble MPE must meet.
    pub fn member_bound_cm(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.member_mpe_cm)
            .map(|(w, e)| w * e)
            .sum()
    }

    /// Ensemble MPE ≤ Σ w_i · MPE_i. Holds exactly by norm convexity up to
    /// floating-point summation order.
    pub fn check_convexity(&self) -> Result<()> {
        let bound = self.member_bound_cm();
        if self.mpe_cm <= bound + 1e-9 * bound.max(1.0) {
            Ok(())
        } else {
            Err(Error::Misuse(format!(
                "ensemble MPE {} cm exceeds weighted member MPE {} cm",
                self.mpe_cm, bound
            )))
        }
    }
}

fn error_cm(a: [f64; 2], b: [f64; 2]) -> f64 {
    100.0 * (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Simulates each position against the cached empty room, predicts it and
/// summarizes the errors.
pub fn evaluate_with_base(
    bundle: &EnsembleBundle,
    base: &ChannelBase,
    positions: &[(f64, f64)],
) -> Result<EvalReport> {
    if bundle.scene_digest != base.digest() {
        return Err(Error::Invalidation {
            expected: bundle.scene_digest.clone(),
            found: base.digest().to_owned(),
        });
    }
    bundle.validate()?;
    if positions.is_empty() {
        return Err(Error::Misuse("no evaluation positions".into()));
    }
    let t0 = Instant::now();
    let (rows, max_clamp_m) = sweep_positions(base, positions)?;
    let simulation_s = t0.elapsed().as_secs_f64();

    let mut points = Vec::with_capacity(rows.len());
    for r in &rows {
        let t = Instant::now();
        let members: Vec<[f64; 2]> = bundle
            .member_predictions(&[r.drss])
            .into_iter()
            .map(|m| m[0])
            .collect();
        let prediction = bundle.combine(&members.iter().map(|m| vec![*m]).collect::<Vec<_>>())[0];
        let inference_ms = t.elapsed().as_secs_f64() * 1e3;
        let truth = [r.x, r.y];
        points.push(PointResult {
            truth,
            prediction,
            error_cm: error_cm(prediction, truth),
            member_predictions: members,
            inference_ms,
        });
    }
    let errors: Vec<f64> = points.iter().map(|p| p.error_cm).collect();
    let member_mpe_cm = (0..bundle.members.len())
        .map(|i| {
            mpe(&points
                .iter()
                .map(|p| error_cm(p.member_predictions[i], p.truth))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let inference_ms_per_point =
        points.iter().map(|p| p.inference_ms).sum::<f64>() / points.len() as f64;
    let report = EvalReport {
        composition: bundle.composition(),
        weights: bundle.weights.clone(),
        mpe_cm: mpe(&errors)?,
        p90_cm: p90(&errors)?,
        points,
        member_mpe_cm,
        max_clamp_m,
        timings: Timings {
            simulation_s,
            inference_ms_per_point,
            ..Timings::default()
        },
        hardware: hardware_descriptor(),
    };
    report.check_convexity()?;
    Ok(report)
}

/// [`evaluate_with_base`] on a freshly built empty-room base.
pub fn evaluate_run(
    bundle: &EnsembleBundle,
    config: &SceneConfig,
    positions: &[(f64, f64)],
    bounces: usize,
) -> Result<EvalReport> {
    let base = ChannelBase::new(&build_scene(config)?, bounces)?;
    evaluate_with_base(bundle, &base, positions)
}

pub fn trajectory_csv(report: &EvalReport) -> String {
    let mut s = String::from("step,x,y,x_hat,y_hat,pe_cm\n");
    for (i, p) in report.points.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{}",
            p.truth[0], p.truth[1], p.prediction[0], p.prediction[1], p.error_cm
        );
    }
    s
}

pub fn heatmap_csv(report: &EvalReport) -> String {
    let mut s = String::from("x,y,pe_cm\n");
    for p in &report.points {
        let _ = writeln!(s, "{},{},{}", p.truth[0], p.truth[1], p.error_cm);
    }
    s
}

/// Parses either export back into numeric rows (header dropped).
pub fn parse_export(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "empty file".into(),
        });
    };
    let width = header.split(',').count();
    lines
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if row.len() != width {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    message: format!("expected {width} fields, found {}", row.len()),
                });
            }
            Ok(row)
        })
        .collect()
}

/// Writes the trajectory and heatmap CSVs for one report.
pub fn export_results(report: &EvalReport, trajectory: &Path, heatmap: &Path) -> Result<()> {
    std::fs::write(trajectory, trajectory_csv(report)).map_err(|e| Error::io(trajectory, e))?;
    std::fs::write(heatmap, heatmap_csv(report)).map_err(|e| Error::io(heatmap, e))
}

/// One line of the ensemble comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub composition: String,
    pub training_min: f64,
    pub trajectory_mpe_cm: f64,
    pub trajectory_p90_cm: f64,
    pub random_mpe_cm: f64,
    pub random_p90_cm: f64,
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<16} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
        "Ensemble",
        "Training (min)",
        "Traj MPE (cm)",
        "Traj P90 (cm)",
        "Rand MPE (cm)",
        "Rand P90 (cm)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>14.2} {:>14.2} {:>14.2} {:>14.2} {:>14.2}",
            r.composition,
            r.training_min,
            r.trajectory_mpe_cm,
            r.trajectory_p90_cm,
            r.random_mpe_cm,
            r.random_p90_cm
        );
    }
    s
}
