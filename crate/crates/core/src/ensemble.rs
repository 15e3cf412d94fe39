//! Weighted ensembles of position regressors with spatially cross-validated
//! simplex weights.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{FingerprintDataset, NormStats, Split};
use crate::neural::{
    build_model, load_weights, samples, save_weights, train_samples, Architecture, ModelSpec,
    ModelWeights, TrainConfig,
};

const MAX_LLOYD: usize = 300;
const MPE_FLOOR_M: f64 = 1e-6;
const PGD_WINDOW: usize = 50;
const PGD_TOL: f64 = 1e-10;
const PGD_MAX_ITERS: usize = 20_000;
/// Improvements at or below this are rounding noise: a vertex must beat
/// uniform weights, and a descent step the current point, by more.
const TIE_TOL: f64 = 1e-12;
pub const MEMBERS_PER_ARCHITECTURE: usize = 3;
pub const MANIFEST_FILE: &str = "ensemble.json";

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centers: &[[f64; 2]]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, &m)| (c, dist2(p, m)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

/// K-means cluster labels in `0..k` for 2-D points.
pub fn kmeans_partition(points: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("k-means needs k ≥ 1".into()));
    }
    if k > points.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds {} points",
            points.len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k-means++ seeding.
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next]);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, points[next]));
        }
    }

    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD {
        let mut changed = false;
        for (l, &p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centers);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed from the point farthest from its center, taken from
                // a cluster that can spare it.
                let far = (0..points.len())
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        dist2(points[a], centers[labels[a]])
                            .total_cmp(&dist2(points[b], centers[labels[b]]))
                    })
                    .expect("k ≤ #points leaves a cluster with spare points");
                counts[labels[far]] -= 1;
                counts[c] = 1;
                centers[c] = points[far];
                labels[far] = c;
                changed = true;
            } else {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Mean Euclidean error of the weighted average of member predictions.
pub fn weighted_mpe(preds: &[Vec<[f64; 2]>], truths: &[[f64; 2]], w: &[f64]) -> f64 {
    let n = truths.len();
    let mut total = 0.0;
    for r in 0..n {
        let mut e = [-truths[r][0], -truths[r][1]];
        for (p, &wi) in preds.iter().zip(w) {
            e[0] += wi * p[r][0];
            e[1] += wi * p[r][1];
        }
        total += e[0].hypot(e[1]);
    }
    total / n as f64
}

fn objective_grad(preds: &[Vec<[f64; 2]>], truths: &[[f64; 2]], w: &[f64]) -> Vec<f64> {
    let n = truths.len();
    let mut g = vec![0.0; w.len()];
    for r in 0..n {
        let mut e = [-truths[r][0], -truths[r][1]];
        for (p, &wi) in preds.iter().zip(w) {
            e[0] += wi * p[r][0];
            e[1] += wi * p[r][1];
        }
        let norm = e[0].hypot(e[1]);
        if norm == 0.0 {
            continue;
        }
        for (gi, p) in g.iter_mut().zip(preds) {
            *gi += (e[0] * (p[r][0] - truths[r][0]) + e[1] * (p[r][1] - truths[r][1])) / norm;
        }
    }
    g.iter_mut().for_each(|v| *v /= n as f64);
    g
}

/// Simplex weights minimizing [`weighted_mpe`] over the rows, by projected
/// gradient descent with backtracking.
pub fn fit_fold_weights(preds: &[Vec<[f64; 2]>], truths: &[[f64; 2]]) -> Result<Vec<f64>> {
    let m = preds.len();
    if m == 0 || truths.is_empty() {
        return Err(Error::Misuse(
            "weight fitting needs at least one member and one row".into(),
        ));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != truths.len()) {
        return Err(Error::Length {
            expected: truths.len(),
            got: p.len(),
        });
    }
    if preds
        .iter()
        .flatten()
        .chain(truths)
        .flatten()
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("ensemble member prediction".into()));
    }
    let f = |w: &[f64]| weighted_mpe(preds, truths, w);

    let mut w = vec![1.0 / m as f64; m];
    let mut fw = f(&w);
    for i in 0..m {
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        let fv = f(&v);
        if fv < fw - TIE_TOL {
            w = v;
            fw = fv;
        }
    }

    let mut trace = vec![fw];
    let mut step = 1.0;
    for _ in 0..PGD_MAX_ITERS {
        let g = objective_grad(preds, truths, &w);
        let mut moved = false;
        for _ in 0..60 {
            let cand = project_simplex(
                &w.iter()
                    .zip(&g)
                    .map(|(wi, gi)| wi - step * gi)
                    .collect::<Vec<_>>(),
            );
            let fc = f(&cand);
            if fc < fw - TIE_TOL {
                w = cand;
                fw = fc;
                moved = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        trace.push(fw);
        let t = trace.len();
        if t > PGD_WINDOW && trace[t - 1 - PGD_WINDOW] - fw < PGD_TOL {
            break;
        }
    }
    Ok(w)
}

/// Combines per-fold weights with influence proportional to 1 / MPE.
pub fn aggregate_fold_weights(fold_weights: &[Vec<f64>], fold_mpes: &[f64]) -> Result<Vec<f64>> {
    if fold_weights.is_empty() || fold_weights.len() != fold_mpes.len() {
        return Err(Error::Misuse(
            "need one MPE per fold and at least one fold".into(),
        ));
    }
    let m = fold_weights[0].len();
    if fold_weights.iter().any(|w| w.len() != m) {
        return Err(Error::Misuse("fold weight vectors differ in length".into()));
    }
    if fold_mpes.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::NonFinite(format!("fold MPEs {fold_mpes:?}")));
    }
    let inv: Vec<f64> = fold_mpes.iter().map(|e| 1.0 / e.max(MPE_FLOOR_M)).collect();
    let z: f64 = inv.iter().sum();
    let mut w = vec![0.0; m];
    for (fw, a) in fold_weights.iter().zip(&inv) {
        for (o, v) in w.iter_mut().zip(fw) {
            *o += a / z * v;
        }
    }
    Ok(project_simplex(&w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Per fold: (fitting-complement rows, held-out rows).
    pub folds: Vec<(Vec<usize>, Vec<usize>)>,
}

impl FoldPlan {
    pub fn new(points: &[[f64; 2]], k: usize, seed: u64) -> Result<Self> {
        let labels = kmeans_partition(points, k, seed)?;
        let folds = (0..k)
            .map(|c| {
                let (held, rest): (Vec<usize>, Vec<usize>) =
                    (0..points.len()).partition(|&i| labels[i] == c);
                (rest, held)
            })
            .collect::<Vec<_>>();
        if let Some(c) = folds.iter().position(|(_, h)| h.is_empty()) {
            return Err(Error::Config(format!("cluster {c} is empty")));
        }
        Ok(FoldPlan { k, labels, folds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub architecture: Architecture,
    pub init_seed: u64,
    pub train_seed: Option<u64>,
    pub param_count: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    composition: String,
    scene_digest: String,
    room_m: [f64; 2],
    weights: Vec<f64>,
    norm: Option<NormStats>,
    k: usize,
    cv_seed: u64,
    fold_mpes_m: Vec<f64>,
    members: Vec<MemberInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleBundle {
    pub members: Vec<ModelWeights>,
    /// Simplex weights, one per member.
    pub weights: Vec<f64>,
    pub scene_digest: String,
    pub room_m: [f64; 2],
    pub norm: Option<NormStats>,
    pub k: usize,
    pub cv_seed: u64,
    pub fold_mpes_m: Vec<f64>,
}

/// Composition tag such as "mlp+cnn" in architecture order of first use.
pub fn composition_of(members: &[ModelWeights]) -> String {
    let mut archs: Vec<Architecture> = Vec::new();
    for m in members {
        if !archs.contains(&m.spec.architecture) {
            archs.push(m.spec.architecture);
        }
    }
    archs.iter().map(|a| a.name()).collect::<Vec<_>>().join("+")
}

impl EnsembleBundle {
    /// Uniformly weighted bundle, before cross-validation.
    pub fn uniform(members: Vec<ModelWeights>, ds: &FingerprintDataset) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Misuse("ensemble needs at least one member".into()));
        }
        let n = members.len();
        Ok(EnsembleBundle {
            norm: members[0].norm.clone(),
            members,
            weights: vec![1.0 / n as f64; n],
            scene_digest: ds.scene_digest.clone(),
            room_m: ds.room_m,
            k: 0,
            cv_seed: 0,
            fold_mpes_m: Vec::new(),
        })
    }

    pub fn composition(&self) -> String {
        composition_of(&self.members)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() != self.weights.len() {
            return Err(Error::Format(format!(
                "{} members but {} weights",
                self.members.len(),
                self.weights.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Format(format!(
                "weights {:?} are not on the simplex",
                self.weights
            )));
        }
        Ok(())
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(0.0, self.room_m[0]),
            p[1].clamp(0.0, self.room_m[1]),
        ]
    }

    /// Room-clamped outputs of every member for raw ΔRSS rows; outer index is
    /// the member.
    pub fn member_predictions(&self, drss: &[[f64; 9]]) -> Vec<Vec<[f64; 2]>> {
        self.members
            .par_iter()
            .map(|m| {
                m.predict_batch(drss)
                    .into_iter()
                    .map(|p| self.clamp(p))
                    .collect()
            })
            .collect()
    }

    /// Weighted combination of member predictions.
    pub fn combine(&self, member_preds: &[Vec<[f64; 2]>]) -> Vec<[f64; 2]> {
        let n = member_preds.first().map_or(0, Vec::len);
        (0..n)
            .map(|r| {
                let mut p = [0.0; 2];
                for (mp, &w) in member_preds.iter().zip(&self.weights) {
                    p[0] += w * mp[r][0];
                    p[1] += w * mp[r][1];
                }
                self.clamp(p)
            })
            .collect()
    }

    pub fn predict_batch(&self, drss: &[[f64; 9]]) -> Vec<[f64; 2]> {
        self.combine(&self.member_predictions(drss))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut infos = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member{i:02}_{}.dnnw", m.spec.architecture);
            save_weights(m, &dir.join(&file))?;
            infos.push(MemberInfo {
                architecture: m.spec.architecture,
                init_seed: m.init_seed,
                train_seed: m.train_seed,
                param_count: m.params.len(),
                file,
            });
        }
        let manifest = Manifest {
            format_version: 1,
            composition: self.composition(),
            scene_digest: self.scene_digest.clone(),
            room_m: self.room_m,
            weights: self.weights.clone(),
            norm: self.norm.clone(),
            k: self.k,
            cv_seed: self.cv_seed,
            fold_mpes_m: self.fold_mpes_m.clone(),
            members: infos,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a bundle directory (or its manifest file).
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, manifest_path): (PathBuf, PathBuf) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (
                path.parent().unwrap_or(Path::new(".")).to_path_buf(),
                path.to_path_buf(),
            )
        };
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut members = Vec::with_capacity(m.members.len());
        for info in &m.members {
            let w = load_weights(&dir.join(&info.file))?;
            if w.spec.architecture != info.architecture || w.params.len() != info.param_count {
                return Err(Error::Format(format!(
                    "member file {} disagrees with the manifest",
                    info.file
                )));
            }
            members.push(w);
        }
        let b = EnsembleBundle {
            members,
            weights: m.weights,
            scene_digest: m.scene_digest,
            room_m: m.room_m,
            norm: m.norm,
            k: m.k,
            cv_seed: m.cv_seed,
            fold_mpes_m: m.fold_mpes_m,
        };
        b.validate()?;
        Ok(b)
    }
}

/// Weighted position estimate from one raw ΔRSS vector, clamped to the room.
pub fn ensemble_predict(bundle: &EnsembleBundle, drss: &[f64]) -> Result<(f64, f64)> {
    if drss.len() != 9 {
        return Err(Error::Length {
            expected: 9,
            got: drss.len(),
        });
    }
    if drss.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("ΔRSS {drss:?}")));
    }
    let row: [f64; 9] = drss.try_into().expect("length checked");
    let [x, y] = bundle.predict_batch(&[row])[0];
    Ok((x, y))
}

/// A trained member with its own training wall time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMember {
    pub weights: ModelWeights,
    pub train_s: f64,
}

/// Seed of member `j` of an architecture; also its shuffle seed.
pub fn member_seed(seed: u64, arch: Architecture, j: usize) -> u64 {
    let a = match arch {
        Architecture::Mlp => 0,
        Architecture::Cnn => 1,
        Architecture::Unet => 2,
        Architecture::Dense => 3,
    };
    seed.wrapping_add(100 * a + j as u64)
}

/// Trains `MEMBERS_PER_ARCHITECTURE` networks per architecture on the
/// dataset's train split, in parallel, using the dataset's normalization
/// (or statistics fit on the train split).
pub fn train_members(
    ds: &FingerprintDataset,
    architectures: &[Architecture],
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<TrainedMember>> {
    let norm = match &ds.norm {
        Some(n) => n.clone(),
        None => NormStats::fit(ds.with_split(Split::Train).map(|r| &r.drss))?,
    };
    let tr = samples(ds.with_split(Split::Train), &norm);
    let va = samples(ds.with_split(Split::Val), &norm);
    let jobs: Vec<(Architecture, u64)> = architectures
        .iter()
        .flat_map(|&arch| {
            (0..MEMBERS_PER_ARCHITECTURE).map(move |j| (arch, member_seed(seed, arch, j)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(arch, s)| {
            let t0 = Instant::now();
            let mut w = build_model(&ModelSpec::for_architecture(arch), s)?;
            w.norm = Some(norm.clone());
            train_samples(
                &mut w,
                &tr,
                &va,
                &TrainConfig {
                    seed: s,
                    ..cfg.clone()
                },
            )?;
            Ok(TrainedMember {
                weights: w,
                train_s: t0.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_rows: usize,
    pub weights: Vec<f64>,
    pub mpe_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean_fold_mpe_m: f64,
    pub wall_s: f64,
}

/// Member predictions and truths for the weight-fitting rows (train + val).
fn fitting_rows(
    bundle: &EnsembleBundle,
    ds: &FingerprintDataset,
) -> (Vec<[f64; 2]>, Vec<Vec<[f64; 2]>>) {
    let rows: Vec<_> = ds.rows.iter().filter(|r| r.split != Split::Test).collect();
    let truths: Vec<[f64; 2]> = rows.iter().map(|r| [r.x, r.y]).collect();
    let drss: Vec<[f64; 9]> = rows.iter().map(|r| r.drss).collect();
    (truths, bundle.member_predictions(&drss))
}

fn cv_with(
    truths: &[[f64; 2]],
    preds: &[Vec<[f64; 2]>],
    k: usize,
    seed: u64,
) -> Result<(Vec<f64>, CvReport)> {
    if k < 2 {
        return Err(Error::Config(format!(
            "spatial cross-validation needs k ≥ 2, got {k}"
        )));
    }
    let t0 = Instant::now();
    let plan = FoldPlan::new(truths, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for (_, held) in &plan.folds {
        let t: Vec<[f64; 2]> = held.iter().map(|&i| truths[i]).collect();
        let p: Vec<Vec<[f64; 2]>> = preds
            .iter()
            .map(|mp| held.iter().map(|&i| mp[i]).collect())
            .collect();
        let w = fit_fold_weights(&p, &t)?;
        let mpe = weighted_mpe(&p, &t, &w);
        folds.push(FoldResult {
            held_out_rows: held.len(),
            weights: w,
            mpe_m: mpe,
        });
    }
    let ws: Vec<Vec<f64>> = folds.iter().map(|f| f.weights.clone()).collect();
    let mpes: Vec<f64> = folds.iter().map(|f| f.mpe_m).collect();
    let w = aggregate_fold_weights(&ws, &mpes)?;
    let report = CvReport {
        k,
        mean_fold_mpe_m: mpes.iter().sum::<f64>() / k as f64,
        folds,
        wall_s: t0.elapsed().as_secs_f64(),
    };
    Ok((w, report))
}

/// Fits ensemble weights by spatial k-fold cross-validation on the train and
/// val rows; members stay frozen.
pub fn spatial_cv(
    members: Vec<ModelWeights>,
    ds: &FingerprintDataset,
    k: usize,
    seed: u64,
) -> Result<(EnsembleBundle, CvReport)> {
    let mut bundle = EnsembleBundle::uniform(members, ds)?;
    let (truths, preds) = fitting_rows(&bundle, ds);
    let (w, report) = cv_with(&truths, &preds, k, seed)?;
    bundle.weights = w;
    bundle.k = k;
    bundle.cv_seed = seed;
    bundle.fold_mpes_m = report.folds.iter().map(|f| f.mpe_m).collect();
    Ok((bundle, report))
}

/// Cross-validation reports for each k, sharing one set of member predictions.
pub fn k_sweep(
    bundle: &EnsembleBundle,
    ds: &FingerprintDataset,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<CvReport>> {
    let (truths, preds) = fitting_rows(bundle, ds);
    ks.iter()
        .map(|&k| cv_with(&truths, &preds, k, seed).map(|(_, r)| r))
        .collect()
}

pub fn k_sweep_table(reports: &[CvReport]) -> String {
    let mut s = String::from("k,mean_fold_mpe_cm,wall_s\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:.4},{:.6}\n",
            r.k,
            r.mean_fold_mpe_m * 100.0,
            r.wall_s
        ));
    }
    s
}
