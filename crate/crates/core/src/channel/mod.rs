//! DC channel gains from the LED to the ceiling detectors through up to K
//! diffuse reflections off walls, floor and the human body.
//!
//! Light leaves the LED, lands on surface segments (first bounce), and is
//! re-emitted by each segment as a first-order Lambertian source scaled by
//! the segment reflectance. Segment-to-segment exchange is a dense transfer
//! matrix; after every bounce the re-emitted power is gathered into the
//! detectors through their field of view, concentrator and optical filter.

mod incremental;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clear_path, Cuboid, SurfaceSegment, Vec3};
use crate::scene::{Detector, Scene, DETECTOR_COUNT};

pub use incremental::ChannelBase;

pub type DetectorVec = [f64; DETECTOR_COUNT];

/// Receiving aperture of a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Receiver {
    pub position: Vec3,
    pub normal: Vec3,
    /// m²
    pub area: f64,
    /// Cosine of the field-of-view half angle; light arriving at a larger
    /// incidence angle is rejected.
    pub cos_fov: f64,
    /// Optical filter gain times concentrator gain inside the field of view.
    pub optical_gain: f64,
}

impl Receiver {
    /// A photodetector with filter `Ts` and a concentrator of gain
    /// `n² / sin² Ψ` inside its field of view `Ψ`.
    pub fn detector(d: &Detector) -> Self {
        let s = d.fov.sin();
        Receiver {
            position: d.position,
            normal: d.normal,
            area: d.area,
            cos_fov: d.fov.cos(),
            optical_gain: d.filter_gain * d.lens_index * d.lens_index / (s * s),
        }
    }

    /// A bare surface patch: full hemisphere, no optics.
    pub fn surface(s: &SurfaceSegment) -> Self {
        Receiver {
            position: s.centroid,
            normal: s.normal,
            area: s.area,
            cos_fov: 0.0,
            optical_gain: 1.0,
        }
    }
}

/// Line-of-sight DC gain of a generalized Lambertian source of order `order`
/// into `rx`:
///
/// `H = (m+1) A / (2π d²) · cos^m φ · g · cos ψ` for ψ within the field of
/// view and a clear path, 0 otherwise.
pub fn los_link_gain(
    src_pos: Vec3,
    src_normal: Vec3,
    order: f64,
    rx: &Receiver,
    occluders: &[Cuboid],
) -> Result<f64> {
    let d = rx.position - src_pos;
    let d2 = d.norm_squared();
    if d2 == 0.0 {
        return Err(Error::DegenerateLink(src_pos.to_array()));
    }
    Ok(link_gain_unchecked(
        src_pos, src_normal, order, rx, d, d2, occluders,
    ))
}

#[inline]
fn link_gain_unchecked(
    src_pos: Vec3,
    src_normal: Vec3,
    order: f64,
    rx: &Receiver,
    d: Vec3,
    d2: f64,
    occluders: &[Cuboid],
) -> f64 {
    let dist = d2.sqrt();
    let cos_phi = src_normal.dot(d) / dist;
    let cos_psi = -rx.normal.dot(d) / dist;
    if cos_phi <= 0.0 || cos_psi <= 0.0 || cos_psi < rx.cos_fov {
        return 0.0;
    }
    if !clear_path(src_pos, rx.position, occluders) {
        return 0.0;
    }
    (order + 1.0) * rx.area / (2.0 * PI * d2) * cos_phi.powf(order) * rx.optical_gain * cos_psi
}

/// Geometric exchange factor from segment `src` into segment `rx`, ignoring
/// visibility and reflectance: `cos θ_src cos θ_rx ΔA_rx / (π d²)`.
#[inline]
pub(crate) fn exchange_factor(src: &SurfaceSegment, rx: &SurfaceSegment) -> f64 {
    let d = rx.centroid - src.centroid;
    let d2 = d.norm_squared();
    let dot_src = src.normal.dot(d);
    let dot_rx = -rx.normal.dot(d);
    if dot_src <= 0.0 || dot_rx <= 0.0 {
        return 0.0;
    }
    dot_src * dot_rx * rx.area / (PI * d2 * d2)
}

/// Visibility between segments `i` and `j`, evaluated in index order so both
/// directions always agree.
#[inline]
pub(crate) fn pair_clear(
    segments: &[SurfaceSegment],
    i: usize,
    j: usize,
    occluders: &[Cuboid],
) -> bool {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    let (pa, pb) = (segments[a].centroid, segments[b].centroid);
    occluders
        .iter()
        .all(|c| c.trivially_misses(pa, pb) || !c.blocks(pa, pb))
}

/// Dense segment-to-segment power transfer, row-major: entry (i, j) is the
/// fraction of power incident on segment j that segment j re-emits onto
/// segment i.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransferMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `T · p`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        assert_eq!(p.len(), self.n);
        self.data
            .par_chunks(self.n.max(1))
            .map(|row| row.iter().zip(p).map(|(t, x)| t * x).sum())
            .collect()
    }
}

/// Builds the transfer matrix
/// `T[i][j] = ρ_j cos θ_j cos θ_i ΔA_i / (π d²) · V(i, j)`.
pub fn build_transfer_matrix(
    segments: &[SurfaceSegment],
    occluders: &[Cuboid],
) -> Result<TransferMatrix> {
    let n = segments.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "transfer matrix needs at least 2 segments, got {n}"
        )));
    }
    let mut data = vec![0.0; n * n];
    let degenerate = data
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let rx = &segments[i];
            for (j, src) in segments.iter().enumerate() {
                if i == j {
                    continue;
                }
                if src.centroid == rx.centroid {
                    return Some(rx.centroid);
                }
                if src.reflectance == 0.0 {
                    continue;
                }
                let f = exchange_factor(src, rx);
                if f > 0.0 && pair_clear(segments, i, j, occluders) {
                    row[j] = src.reflectance * f;
                }
            }
            None
        })
        .find_any(|d| d.is_some())
        .flatten();
    if let Some(p) = degenerate {
        return Err(Error::DegenerateLink(p.to_array()));
    }
    Ok(TransferMatrix { n, data })
}

/// Per-detector DC gains of one scene state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    /// Direct LED-to-detector gain.
    pub los: DetectorVec,
    /// `bounces[k-1][j]`: gain into detector j via exactly k reflections.
    pub bounces: Vec<DetectorVec>,
    /// Total gain, `los + Σ_k bounces[k]`.
    pub gains: DetectorVec,
    /// Received power in mW, `Pt · R · gains` plus optional noise.
    pub rss_mw: DetectorVec,
}

impl GainSet {
    fn assemble(
        los: DetectorVec,
        bounces: Vec<DetectorVec>,
        tx_power_mw: f64,
        responsivity: f64,
    ) -> Self {
        let mut gains = los;
        for b in &bounces {
            for (g, v) in gains.iter_mut().zip(b) {
                *g += v;
            }
        }
        let rss_mw = gains.map(|g| tx_power_mw * responsivity * g);
        GainSet {
            los,
            bounces,
            gains,
            rss_mw,
        }
    }

    /// Adds zero-mean Gaussian noise of standard deviation `sigma_mw` to the
    /// RSS vector; `sigma_mw == 0` leaves it untouched.
    pub fn with_noise(mut self, sigma_mw: f64, seed: u64) -> Result<Self> {
        if sigma_mw > 0.0 {
            let normal = Normal::new(0.0, sigma_mw).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for r in self.rss_mw.iter_mut() {
                *r += normal.sample(&mut rng);
            }
        } else if sigma_mw < 0.0 || !sigma_mw.is_finite() {
            return Err(Error::Config(format!("noise sigma {sigma_mw} invalid")));
        }
        Ok(self)
    }

    /// Writes `pd_index,h1..hK,h_total,rss_mw` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("pd_index");
        for k in 1..=self.bounces.len() {
            out.push_str(&format!(",h{k}"));
        }
        out.push_str(",h_total,rss_mw\n");
        for j in 0..DETECTOR_COUNT {
            out.push_str(&j.to_string());
            for b in &self.bounces {
                out.push_str(&format!(",{:e}", b[j]));
            }
            out.push_str(&format!(",{:e},{:e}\n", self.gains[j], self.rss_mw[j]));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// LED-to-detector line-of-sight gains; a detector sharing the LED position
/// receives nothing directly.
fn los_vector(scene: &Scene, occluders: &[Cuboid]) -> DetectorVec {
    let mut los = [0.0; DETECTOR_COUNT];
    for (out, d) in los.iter_mut().zip(&scene.detectors) {
        *out = los_link_gain(
            scene.emitter.position,
            scene.emitter.normal,
            scene.emitter.order,
            &Receiver::detector(d),
            occluders,
        )
        .unwrap_or(0.0);
    }
    los
}

/// Power landing on each segment directly from the LED (unit transmit power).
pub(crate) fn first_bounce(
    scene: &Scene,
    segments: &[SurfaceSegment],
    occluders: &[Cuboid],
) -> Result<Vec<f64>> {
    segments
        .par_iter()
        .map(|s| {
            los_link_gain(
                scene.emitter.position,
                scene.emitter.normal,
                scene.emitter.order,
                &Receiver::surface(s),
                occluders,
            )
        })
        .collect()
}

/// Gain from segment `s`, as a unit-power first-order Lambertian emitter,
/// into detector `rx`.
#[inline]
pub(crate) fn gather_gain(s: &SurfaceSegment, rx: &Receiver, occluders: &[Cuboid]) -> f64 {
    let d = rx.position - s.centroid;
    let d2 = d.norm_squared();
    if d2 == 0.0 {
        return 0.0;
    }
    link_gain_unchecked(s.centroid, s.normal, 1.0, rx, d, d2, occluders)
}

/// Detector gains of the power re-emitted by segments carrying incident
/// power `incident`.
pub(crate) fn gather(
    gather_rows: &[Vec<f64>],
    segments: &[SurfaceSegment],
    incident: &[f64],
) -> DetectorVec {
    let mut out = [0.0; DETECTOR_COUNT];
    for (o, row) in out.iter_mut().zip(gather_rows) {
        *o = row
            .iter()
            .zip(segments)
            .zip(incident)
            .map(|((g, s), p)| g * s.reflectance * p)
            .sum();
    }
    out
}

pub(crate) fn gather_matrix(
    scene: &Scene,
    segments: &[SurfaceSegment],
    occluders: &[Cuboid],
) -> Vec<Vec<f64>> {
    scene
        .detectors
        .iter()
        .map(|d| {
            let rx = Receiver::detector(d);
            segments
                .par_iter()
                .map(|s| gather_gain(s, &rx, occluders))
                .collect()
        })
        .collect()
}

/// Incident segment power after each bounce `1..=bounces`, the first entry
/// being the direct illumination by the LED.
pub fn bounce_powers(first: Vec<f64>, transfer: &TransferMatrix, bounces: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(bounces);
    if bounces == 0 {
        return out;
    }
    out.push(first);
    while out.len() < bounces {
        let next = transfer.apply(out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

/// Full (non-incremental) multi-bounce computation on `scene`, human
/// included when present.
pub fn multi_bounce_gains(scene: &Scene, bounces: usize) -> Result<GainSet> {
    let occluders = scene.occluders();
    let los = los_vector(scene, occluders);
    let mut per_bounce = Vec::with_capacity(bounces);
    if bounces > 0 {
        let segments = scene.all_segments();
        let transfer = build_transfer_matrix(&segments, occluders)?;
        let gather_rows = gather_matrix(scene, &segments, occluders);
        let first = first_bounce(scene, &segments, occluders)?;
        for p in bounce_powers(first, &transfer, bounces) {
            per_bounce.push(gather(&gather_rows, &segments, &p));
        }
    }
    Ok(GainSet::assemble(
        los,
        per_bounce,
        scene.config.tx_power_mw,
        scene.config.pd_responsivity,
    ))
}

/// Gains plus RSS in mW with optional seeded Gaussian noise.
pub fn rss_vector(
    scene: &Scene,
    bounces: usize,
    noise_sigma_mw: f64,
    seed: u64,
) -> Result<GainSet> {
    if scene.config.tx_power_mw.is_nan() || scene.config.tx_power_mw <= 0.0 {
        return Err(Error::Config("transmit power must be positive".into()));
    }
    multi_bounce_gains(scene, bounces)?.with_noise(noise_sigma_mw, seed)
}

pub(crate) fn assemble(scene: &Scene, los: DetectorVec, bounces: Vec<DetectorVec>) -> GainSet {
    GainSet::assemble(
        los,
        bounces,
        scene.config.tx_power_mw,
        scene.config.pd_responsivity,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SurfaceTag;
    use crate::scene::{build_scene, SceneConfig};

    fn pd_receiver(pos: Vec3, normal: Vec3) -> Receiver {
        let fov = 85f64.to_radians();
        Receiver {
            position: pos,
            normal,
            area: 1e-4,
            cos_fov: fov.cos(),
            optical_gain: 1.5 * 1.5 / (fov.sin() * fov.sin()),
        }
    }

    fn seg(c: Vec3, n: Vec3, area: f64, rho: f64) -> SurfaceSegment {
        SurfaceSegment {
            centroid: c,
            normal: n,
            area,
            reflectance: rho,
            tag: SurfaceTag::Floor,
        }
    }

    #[test]
    fn nadir_link_value() {
        let rx = pd_receiver(Vec3::new(2.5, 2.5, 0.0), Vec3::UP);
        let h = los_link_gain(Vec3::new(2.5, 2.5, 3.0), Vec3::DOWN, 1.0, &rx, &[]).unwrap();
        let geometric = 2.0 * 1e-4 / (2.0 * PI * 9.0);
        assert!((geometric - 3.53678e-6).abs() < 1e-11);
        assert!((rx.optical_gain - 2.26723).abs() < 1e-5);
        assert!((h - 8.0187e-6).abs() < 1e-9);
        assert!((h - geometric * rx.optical_gain).abs() <= 1e-12 * h);
    }

    #[test]
    fn fov_cutoff_and_half_power() {
        // Receiver tilted so the arrival angle is 89 degrees.
        let a = 89f64.to_radians();
        let rx = pd_receiver(Vec3::new(0.0, 0.0, 0.0), Vec3::new(a.sin(), 0.0, a.cos()));
        let h = los_link_gain(Vec3::new(0.0, 0.0, 3.0), Vec3::DOWN, 1.0, &rx, &[]).unwrap();
        assert_eq!(h, 0.0);

        // Source tilted 60 degrees off the link direction.
        let surf = Receiver {
            cos_fov: 0.0,
            optical_gain: 1.0,
            ..pd_receiver(Vec3::new(0.0, 0.0, 0.0), Vec3::UP)
        };
        let on_axis = los_link_gain(Vec3::new(0.0, 0.0, 3.0), Vec3::DOWN, 1.0, &surf, &[]).unwrap();
        let t = 60f64.to_radians();
        let tilted = los_link_gain(
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::new(t.sin(), 0.0, -t.cos()),
            1.0,
            &surf,
            &[],
        )
        .unwrap();
        assert!((tilted - 0.5 * on_axis).abs() < 1e-15);
    }

    #[test]
    fn self_link_is_an_error() {
        let rx = pd_receiver(Vec3::new(1.0, 1.0, 1.0), Vec3::UP);
        assert!(matches!(
            los_link_gain(Vec3::new(1.0, 1.0, 1.0), Vec3::DOWN, 1.0, &rx, &[]),
            Err(Error::DegenerateLink(_))
        ));
    }

    #[test]
    fn occluded_link_is_zero() {
        let rx = pd_receiver(Vec3::new(2.5, 2.5, 0.0), Vec3::UP);
        let body = Cuboid::new(Vec3::new(2.3, 2.3, 0.0), Vec3::new(2.7, 2.7, 1.8)).unwrap();
        let h = los_link_gain(Vec3::new(2.5, 2.5, 3.0), Vec3::DOWN, 1.0, &rx, &[body]).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn transfer_entry_examples() {
        let segs = vec![
            seg(Vec3::new(0.0, 0.0, 0.0), Vec3::UP, 0.0625, 0.8),
            seg(Vec3::new(0.0, 0.0, 1.0), Vec3::DOWN, 0.0625, 0.8),
            // Behind segment 0's plane.
            seg(Vec3::new(3.0, 0.0, -1.0), Vec3::UP, 0.0625, 0.8),
        ];
        let t = build_transfer_matrix(&segs, &[]).unwrap();
        assert!((t.get(1, 0) - 0.0159155).abs() < 1e-7);
        assert!((t.get(1, 0) - 0.8 * 0.0625 / PI).abs() < 1e-16);
        assert_eq!(t.get(2, 0), 0.0);
        assert_eq!(t.get(0, 2), 0.0);
        for i in 0..3 {
            assert_eq!(t.get(i, i), 0.0);
        }

        let body = Cuboid::new(Vec3::new(-0.5, -0.5, 0.3), Vec3::new(0.5, 0.5, 0.6)).unwrap();
        let blocked = build_transfer_matrix(&segs, &[body]).unwrap();
        assert_eq!(blocked.get(1, 0), 0.0);
        assert_eq!(blocked.get(0, 1), 0.0);
    }

    #[test]
    fn coincident_segments_are_rejected() {
        let segs = vec![
            seg(Vec3::new(0.0, 0.0, 0.0), Vec3::UP, 0.1, 0.8),
            seg(Vec3::new(0.0, 0.0, 0.0), Vec3::DOWN, 0.1, 0.8),
        ];
        assert!(build_transfer_matrix(&segs, &[]).is_err());
        assert!(build_transfer_matrix(&segs[..1], &[]).is_err());
    }

    fn coarse() -> Scene {
        build_scene(&SceneConfig {
            resolution_m: 0.5,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn no_direct_light_reaches_ceiling_detectors() {
        let g = multi_bounce_gains(&coarse(), 0).unwrap();
        assert_eq!(g.gains, [0.0; 9]);
        assert!(g.bounces.is_empty());
    }

    #[test]
    fn gains_grow_with_bounce_count() {
        let scene = coarse();
        let g: Vec<GainSet> = (1..=3)
            .map(|k| multi_bounce_gains(&scene, k).unwrap())
            .collect();
        for j in 0..9 {
            assert!(g[0].gains[j] > 0.0);
            assert!(g[1].gains[j] >= g[0].gains[j]);
            assert!(g[2].gains[j] >= g[1].gains[j]);
        }
        // Per-order contributions are shared between runs.
        assert_eq!(g[2].bounces[0], g[0].bounces[0]);
        for j in 0..9 {
            let total: f64 = g[2].bounces.iter().map(|b| b[j]).sum();
            assert!((total - g[2].gains[j]).abs() <= 1e-15 * total);
        }
    }

    #[test]
    fn rss_scales_and_noise_is_seeded() {
        let scene = coarse();
        let g = rss_vector(&scene, 2, 0.0, 1).unwrap();
        for j in 0..9 {
            assert_eq!(g.rss_mw[j], 1000.0 * g.gains[j]);
        }
        assert_eq!(g, rss_vector(&scene, 2, 0.0, 99).unwrap());
        let a = rss_vector(&scene, 2, 1e-4, 7).unwrap();
        let b = rss_vector(&scene, 2, 1e-4, 7).unwrap();
        let c = rss_vector(&scene, 2, 1e-4, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.rss_mw, c.rss_mw);
        assert_eq!(a.gains, g.gains);
    }

    #[test]
    fn rss_arithmetic() {
        let mut bounce = [0.0; 9];
        bounce[0] = 8.0187e-6;
        let g = GainSet::assemble([0.0; 9], vec![bounce], 1000.0, 1.0);
        assert!((g.rss_mw[0] - 8.0187e-3).abs() < 1e-15);
        let zero = GainSet::assemble([0.0; 9], vec![[0.0; 9]], 1000.0, 1.0);
        assert_eq!(zero.rss_mw, [0.0; 9]);
    }

    #[test]
    fn first_bounce_and_decay_bounds() {
        let scene = build_scene(&SceneConfig::default()).unwrap();
        let segs = scene.all_segments();
        let first = first_bounce(&scene, &segs, &[]).unwrap();
        let total: f64 = first.iter().sum();
        // Every ray leaving the LED hits a wall or the floor, so the exact
        // total is 1; centroid sampling overshoots by O(resolution²).
        let coarse_total: f64 = {
            let c = coarse();
            first_bounce(&c, &c.static_segments, &[])
                .unwrap()
                .iter()
                .sum()
        };
        assert!((total - 1.0).abs() < 2e-3, "first-bounce total {total}");
        assert!((total - 1.0).abs() < 0.5 * (coarse_total - 1.0).abs());
        assert!(first.iter().all(|p| *p >= 0.0));
        let t = build_transfer_matrix(&segs, &[]).unwrap();
        let rho_max = segs.iter().map(|s| s.reflectance).fold(0.0, f64::max);
        let powers = bounce_powers(first, &t, 4);
        for w in powers.windows(2) {
            let (a, b): (f64, f64) = (w[0].iter().sum(), w[1].iter().sum());
            assert!(b <= rho_max * a, "{b} > {rho_max} * {a}");
        }
    }

    #[test]
    fn gain_dump_columns() {
        let g = multi_bounce_gains(&coarse(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gains.csv");
        g.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "pd_index,h1,h2,h3,h_total,rss_mw");
        assert_eq!(lines.len(), 10);
        let row: Vec<f64> = lines[5].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row[0], 4.0);
        assert_eq!(row[4], g.gains[4]);
        assert_eq!(row[5], g.rss_mw[4]);
    }
}
