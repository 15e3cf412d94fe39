use rayon::prelude::*;

use super::{
    assemble, bounce_powers, build_transfer_matrix, exchange_factor, first_bounce, gather,
    gather_gain, gather_matrix, los_vector, pair_clear, DetectorVec, GainSet, Receiver,
    TransferMatrix,
};
use crate::error::{Error, Result};
use crate::geometry::{clear_path, Cuboid, SurfaceSegment};
use crate::scene::Scene;

/// Empty-room channel state shared by every human placement of a sweep.
///
/// Placing the human only removes the static-to-static exchanges whose
/// connecting segment crosses the body and adds rows and columns for the
/// body's own segments, so the dense base matrix is never copied or edited.
#[derive(Debug, Clone)]
pub struct ChannelBase {
    scene: Scene,
    digest: String,
    bounces: usize,
    transfer: TransferMatrix,
    first: Vec<f64>,
    gather_rows: Vec<Vec<f64>>,
    empty: GainSet,
}

/// Static segment pairs (i < j) whose exchange the body interrupts.
fn blocked_pairs(
    segments: &[SurfaceSegment],
    transfer: &TransferMatrix,
    body: &Cuboid,
) -> Vec<(u32, u32)> {
    let n = segments.len();
    let per_row: Vec<Vec<(u32, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = segments[i].centroid;
            let row = transfer.row(i);
            let mut hits = Vec::new();
            for j in i + 1..n {
                if row[j] == 0.0 && transfer.get(j, i) == 0.0 {
                    continue;
                }
                let b = segments[j].centroid;
                if !body.trivially_misses(a, b) && body.blocks(a, b) {
                    hits.push((i as u32, j as u32));
                }
            }
            hits
        })
        .collect();
    per_row.into_iter().flatten().collect()
}

impl ChannelBase {
    /// Precomputes the empty-room transfer matrix, direct illumination and
    /// detector gather weights for `bounces` reflections.
    pub fn new(scene: &Scene, bounces: usize) -> Result<Self> {
        if scene.human().is_some() {
            return Err(Error::Misuse("channel base requires an empty room".into()));
        }
        let segments = &scene.static_segments;
        let transfer = build_transfer_matrix(segments, &[])?;
        let first = first_bounce(scene, segments, &[])?;
        let gather_rows = gather_matrix(scene, segments, &[]);
        let per_bounce = bounce_powers(first.clone(), &transfer, bounces)
            .iter()
            .map(|p| gather(&gather_rows, segments, p))
            .collect();
        let empty = assemble(scene, los_vector(scene, &[]), per_bounce);
        Ok(ChannelBase {
            digest: scene.config_digest(),
            scene: scene.clone(),
            bounces,
            transfer,
            first,
            gather_rows,
            empty,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn bounces(&self) -> usize {
        self.bounces
    }

    pub fn transfer(&self) -> &TransferMatrix {
        &self.transfer
    }

    pub fn empty_gains(&self) -> &GainSet {
        &self.empty
    }

    /// Transfer entry (i, j) between static segments once `body` is in the
    /// room.
    pub fn transfer_entry_with(&self, body: &Cuboid, i: usize, j: usize) -> f64 {
        let t = self.transfer.get(i, j);
        if t == 0.0
            || pair_clear(
                &self.scene.static_segments,
                i,
                j,
                std::slice::from_ref(body),
            )
        {
            t
        } else {
            0.0
        }
    }

    /// Places the human at (x, y) and recomputes incrementally.
    pub fn place_and_recompute(&self, x: f64, y: f64) -> Result<GainSet> {
        self.occluded_recompute(&self.scene.place_human(x, y)?)
    }

    /// Gains of `scene`, which must share this base's configuration. Equal to
    /// [`super::multi_bounce_gains`] on the same scene up to summation order.
    pub fn occluded_recompute(&self, scene: &Scene) -> Result<GainSet> {
        let found = scene.config_digest();
        if found != self.digest {
            return Err(Error::Invalidation {
                expected: self.digest.clone(),
                found,
            });
        }
        let Some(human) = scene.human() else {
            return Ok(self.empty.clone());
        };
        let body = human.body;
        let occ = std::slice::from_ref(&body);
        let statics = &self.scene.static_segments;
        let humans = &human.segments;
        let (n, h) = (statics.len(), humans.len());

        let blocked = blocked_pairs(statics, &self.transfer, &body);

        // Combined index space: statics first, then the body, as in
        // `Scene::all_segments`.
        let mut all = statics.clone();
        all.extend_from_slice(humans);

        // Rows: static receiver i, columns: human source.
        let to_static: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (0..h).map(|k| exchange(&all, n + k, i, occ)).collect())
            .collect();
        // Rows: human receiver, columns: every source.
        let to_human: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|k| (0..n + h).map(|j| exchange(&all, j, n + k, occ)).collect())
            .collect();

        let mut p_static: Vec<f64> = self
            .first
            .iter()
            .zip(statics)
            .map(|(&p, s)| {
                if p > 0.0 && !clear_path(self.scene.emitter.position, s.centroid, occ) {
                    0.0
                } else {
                    p
                }
            })
            .collect();
        let mut p_human = first_bounce(scene, humans, occ)?;

        let rows: Vec<Vec<f64>> = self
            .gather_rows
            .iter()
            .zip(&scene.detectors)
            .map(|(base_row, d)| {
                let rx = Receiver::detector(d);
                let mut row: Vec<f64> = base_row
                    .iter()
                    .zip(statics)
                    .map(|(&g, s)| {
                        if g > 0.0 && !clear_path(s.centroid, rx.position, occ) {
                            0.0
                        } else {
                            g
                        }
                    })
                    .collect();
                row.extend(humans.iter().map(|s| gather_gain(s, &rx, occ)));
                row
            })
            .collect();

        let los = los_vector(scene, occ);
        let mut per_bounce: Vec<DetectorVec> = Vec::with_capacity(self.bounces);
        for k in 0..self.bounces {
            if k > 0 {
                let mut next_static = self.transfer.apply(&p_static);
                for &(i, j) in &blocked {
                    let (i, j) = (i as usize, j as usize);
                    next_static[i] -= self.transfer.get(i, j) * p_static[j];
                    next_static[j] -= self.transfer.get(j, i) * p_static[i];
                }
                for (y, row) in next_static.iter_mut().zip(&to_static) {
                    *y += row.iter().zip(&p_human).map(|(t, p)| t * p).sum::<f64>();
                    *y = y.max(0.0);
                }
                let next_human: Vec<f64> = to_human
                    .iter()
                    .map(|row| {
                        row[..n]
                            .iter()
                            .zip(&p_static)
                            .map(|(t, p)| t * p)
                            .sum::<f64>()
                            + row[n..]
                                .iter()
                                .zip(&p_human)
                                .map(|(t, p)| t * p)
                                .sum::<f64>()
                    })
                    .collect();
                p_static = next_static;
                p_human = next_human;
            }
            let mut p = p_static.clone();
            p.extend_from_slice(&p_human);
            per_bounce.push(gather(&rows, &all, &p));
        }
        Ok(assemble(scene, los, per_bounce))
    }
}

/// Transfer entry from source `j` into receiver `i` of the combined list.
#[inline]
fn exchange(all: &[SurfaceSegment], j: usize, i: usize, occ: &[Cuboid]) -> f64 {
    let (src, rx) = (&all[j], &all[i]);
    if i == j || src.reflectance == 0.0 {
        return 0.0;
    }
    let f = exchange_factor(src, rx);
    if f > 0.0 && pair_clear(all, i, j, occ) {
        src.reflectance * f
    } else {
        0.0
    }
}
