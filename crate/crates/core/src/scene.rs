//! Physical scene: room, LED, ceiling photodetectors, reflective surfaces and
//! the optional human target.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{
    tessellate_rect, tessellate_rect_even, Cuboid, SurfaceSegment, SurfaceTag, Vec3,
};

/// Environment variable naming the default scene configuration file.
pub const CONFIG_ENV: &str = "VLPSENSE_CONFIG";

pub const DETECTOR_COUNT: usize = 9;

/// Declarative scene description. Every field has a default; an empty
/// document yields the reference 5 × 5 × 3 m room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub room_size_m: [f64; 3],
    pub led_position_m: [f64; 3],
    pub led_half_power_angle_deg: f64,
    pub tx_power_mw: f64,
    pub pd_area_m2: f64,
    pub pd_tilt_deg: f64,
    pub pd_responsivity: f64,
    pub pd_fov_deg: f64,
    pub filter_gain: f64,
    pub lens_index: f64,
    pub wall_reflectance: f64,
    pub floor_reflectance: f64,
    pub hair_reflectance: f64,
    pub face_reflectance: f64,
    pub shirt_reflectance: f64,
    pub human_width_x_m: f64,
    pub human_width_y_m: f64,
    pub human_height_m: f64,
    pub head_band_m: f64,
    pub pd_grid_x_m: [f64; 3],
    pub pd_grid_y_m: [f64; 3],
    pub resolution_m: f64,
    pub bounces: usize,
    pub noise_sigma_mw: f64,
    pub noise_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            room_size_m: [5.0, 5.0, 3.0],
            led_position_m: [2.5, 2.5, 3.0],
            led_half_power_angle_deg: 60.0,
            tx_power_mw: 1000.0,
            pd_area_m2: 1e-4,
            pd_tilt_deg: 10.0,
            pd_responsivity: 1.0,
            pd_fov_deg: 85.0,
            filter_gain: 1.0,
            lens_index: 1.5,
            wall_reflectance: 0.8,
            floor_reflectance: 0.45,
            hair_reflectance: 0.6,
            face_reflectance: 0.5,
            shirt_reflectance: 0.3,
            human_width_x_m: 0.4,
            human_width_y_m: 0.4,
            human_height_m: 1.8,
            head_band_m: 0.3,
            pd_grid_x_m: [1.25, 2.5, 3.75],
            pd_grid_y_m: [1.25, 2.5, 3.75],
            resolution_m: 0.25,
            bounces: 3,
            noise_sigma_mw: 0.0,
            noise_seed: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl SceneConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let cfg: SceneConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let [lx, ly, lz] = self.room_size_m;
        for (n, v) in [("room x", lx), ("room y", ly), ("room z", lz)] {
            positive(n, v)?;
        }
        let phi = self.led_half_power_angle_deg;
        if !(phi > 0.0 && phi < 90.0) {
            return Err(Error::Config(format!(
                "half-power angle must lie in (0, 90) degrees, got {phi}"
            )));
        }
        let fov = self.pd_fov_deg;
        if !(fov > 0.0 && fov <= 90.0) {
            return Err(Error::Config(format!(
                "FOV must lie in (0, 90] degrees, got {fov}"
            )));
        }
        if !(0.0..90.0).contains(&self.pd_tilt_deg) {
            return Err(Error::Config(format!(
                "PD tilt {} out of range",
                self.pd_tilt_deg
            )));
        }
        positive("transmit power", self.tx_power_mw)?;
        positive("PD area", self.pd_area_m2)?;
        positive("responsivity", self.pd_responsivity)?;
        positive("filter gain", self.filter_gain)?;
        positive("lens index", self.lens_index)?;
        positive("resolution", self.resolution_m)?;
        positive("human width x", self.human_width_x_m)?;
        positive("human width y", self.human_width_y_m)?;
        positive("human height", self.human_height_m)?;
        positive("head band", self.head_band_m)?;
        if self.head_band_m > self.human_height_m {
            return Err(Error::Config("head band taller than the human".into()));
        }
        if self.human_height_m >= lz || self.human_width_x_m > lx || self.human_width_y_m > ly {
            return Err(Error::Config("human does not fit in the room".into()));
        }
        for (n, v) in [
            ("wall reflectance", self.wall_reflectance),
            ("floor reflectance", self.floor_reflectance),
            ("hair reflectance", self.hair_reflectance),
            ("face reflectance", self.face_reflectance),
            ("shirt reflectance", self.shirt_reflectance),
        ] {
            unit_interval(n, v)?;
        }
        if !(self.noise_sigma_mw >= 0.0 && self.noise_sigma_mw.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma {} invalid",
                self.noise_sigma_mw
            )));
        }
        let inside = |p: [f64; 3]| {
            (0..3).all(|a| p[a].is_finite() && p[a] >= 0.0 && p[a] <= self.room_size_m[a])
        };
        if !inside(self.led_position_m) {
            return Err(Error::Config(format!(
                "LED position {:?} outside the room",
                self.led_position_m
            )));
        }
        for &x in &self.pd_grid_x_m {
            for &y in &self.pd_grid_y_m {
                if !inside([x, y, lz]) {
                    return Err(Error::Config(format!(
                        "PD position ({x}, {y}) outside the room"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Lambertian order of the LED.
    pub fn lambertian_order(&self) -> f64 {
        -std::f64::consts::LN_2 / self.led_half_power_angle_deg.to_radians().cos().ln()
    }

    /// Content hash of the configuration (hex SHA-256).
    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Center coordinates that keep the human footprint inside the room,
    /// closest to the requested point.
    pub fn clamp_center(&self, x: f64, y: f64) -> (f64, f64) {
        let (hx, hy) = (0.5 * self.human_width_x_m, 0.5 * self.human_width_y_m);
        (
            x.clamp(hx, self.room_size_m[0] - hx),
            y.clamp(hy, self.room_size_m[1] - hy),
        )
    }
}

pub(crate) fn digest_json(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub position: Vec3,
    pub normal: Vec3,
    pub order: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub index: usize,
    pub position: Vec3,
    pub normal: Vec3,
    pub area: f64,
    /// Field of view, radians.
    pub fov: f64,
    pub filter_gain: f64,
    pub lens_index: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Human {
    pub center: (f64, f64),
    pub body: Cuboid,
    pub segments: Vec<SurfaceSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub emitter: Emitter,
    pub detectors: Vec<Detector>,
    pub static_segments: Vec<SurfaceSegment>,
    human: Option<Human>,
}

/// Position and normal of the photodetector at `grid_index` (row-major over
/// y then x). Off-center detectors tilt toward the nearest wall or corner.
pub fn pd_pose(grid_index: usize, config: &SceneConfig) -> (Vec3, Vec3) {
    assert!(grid_index < DETECTOR_COUNT, "detector index {grid_index}");
    let (ix, iy) = (grid_index % 3, grid_index / 3);
    let x = config.pd_grid_x_m[ix];
    let y = config.pd_grid_y_m[iy];
    let position = Vec3::new(x, y, config.room_size_m[2]);
    let side = |v: f64, center: f64| {
        if (v - center).abs() <= 1e-12 {
            0.0
        } else {
            (v - center).signum()
        }
    };
    let sx = side(x, 0.5 * config.room_size_m[0]);
    let sy = side(y, 0.5 * config.room_size_m[1]);
    if sx == 0.0 && sy == 0.0 {
        return (position, Vec3::DOWN);
    }
    let tilt = config.pd_tilt_deg.to_radians();
    let h = Vec3::new(sx, sy, 0.0).normalized();
    let normal = Vec3::new(h.x * tilt.sin(), h.y * tilt.sin(), -tilt.cos());
    (position, normal)
}

fn room_segments(c: &SceneConfig) -> Result<Vec<SurfaceSegment>> {
    let [lx, ly, lz] = c.room_size_m;
    let (rw, res) = (c.wall_reflectance, c.resolution_m);
    let up = Vec3::new(0.0, 0.0, lz);
    let mut out = Vec::new();
    // Walls counter-clockwise seen from above so the tiling respects the
    // square's symmetries.
    let walls = [
        (
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(lx, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            SurfaceTag::WallSouth,
        ),
        (
            Vec3::new(lx, 0.0, 0.0),
            Vec3::new(0.0, ly, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            SurfaceTag::WallEast,
        ),
        (
            Vec3::new(lx, ly, 0.0),
            Vec3::new(-lx, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            SurfaceTag::WallNorth,
        ),
        (
            Vec3::new(0.0, ly, 0.0),
            Vec3::new(0.0, -ly, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            SurfaceTag::WallWest,
        ),
    ];
    for (origin, edge, normal, tag) in walls {
        out.extend(tessellate_rect(origin, edge, up, normal, rw, res, tag)?);
    }
    out.extend(tessellate_rect(
        Vec3::ZERO,
        Vec3::new(lx, 0.0, 0.0),
        Vec3::new(0.0, ly, 0.0),
        Vec3::UP,
        c.floor_reflectance,
        res,
        SurfaceTag::Floor,
    )?);
    Ok(out)
}

fn human_surfaces(c: &SceneConfig, body: &Cuboid) -> Result<Vec<SurfaceSegment>> {
    let res = c.resolution_m;
    let (x0, y0, x1, y1) = (body.min.x, body.min.y, body.max.x, body.max.y);
    let (wx, wy, h) = (x1 - x0, y1 - y0, body.max.z);
    let band_floor = h - c.head_band_m;
    let mut out = tessellate_rect_even(
        Vec3::new(x0, y0, h),
        Vec3::new(wx, 0.0, 0.0),
        Vec3::new(0.0, wy, 0.0),
        Vec3::UP,
        c.hair_reflectance,
        res,
        SurfaceTag::HumanTop,
    )?;
    let sides = [
        (
            Vec3::new(x0, y0, 0.0),
            Vec3::new(wx, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
        ),
        (
            Vec3::new(x1, y0, 0.0),
            Vec3::new(0.0, wy, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
        ),
        (
            Vec3::new(x1, y1, 0.0),
            Vec3::new(-wx, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ),
        (
            Vec3::new(x0, y1, 0.0),
            Vec3::new(0.0, -wy, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
        ),
    ];
    for (origin, edge, normal) in sides {
        if band_floor > 0.0 {
            out.extend(tessellate_rect_even(
                origin,
                edge,
                Vec3::new(0.0, 0.0, band_floor),
                normal,
                c.shirt_reflectance,
                res,
                SurfaceTag::HumanSideLower,
            )?);
        }
        out.extend(tessellate_rect_even(
            Vec3::new(origin.x, origin.y, band_floor),
            edge,
            Vec3::new(0.0, 0.0, c.head_band_m),
            normal,
            c.face_reflectance,
            res,
            SurfaceTag::HumanSideUpper,
        )?);
    }
    Ok(out)
}

/// Builds the empty-room scene.
pub fn build_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let [ex, ey, ez] = config.led_position_m;
    let emitter = Emitter {
        position: Vec3::new(ex, ey, ez),
        normal: Vec3::DOWN,
        order: config.lambertian_order(),
    };
    let detectors = (0..DETECTOR_COUNT)
        .map(|index| {
            let (position, normal) = pd_pose(index, config);
            Detector {
                index,
                position,
                normal,
                area: config.pd_area_m2,
                fov: config.pd_fov_deg.to_radians(),
                filter_gain: config.filter_gain,
                lens_index: config.lens_index,
            }
        })
        .collect();
    Ok(Scene {
        config: config.clone(),
        emitter,
        detectors,
        static_segments: room_segments(config)?,
        human: None,
    })
}

impl Scene {
    /// Returns a copy of the scene with the human centered at (x, y),
    /// replacing any previous placement.
    pub fn place_human(&self, x: f64, y: f64) -> Result<Scene> {
        let c = &self.config;
        let (hx, hy) = (0.5 * c.human_width_x_m, 0.5 * c.human_width_y_m);
        const TOL: f64 = 1e-12;
        let fits = x.is_finite()
            && y.is_finite()
            && x - hx >= -TOL
            && y - hy >= -TOL
            && x + hx <= c.room_size_m[0] + TOL
            && y + hy <= c.room_size_m[1] + TOL;
        if !fits {
            return Err(Error::Placement { x, y });
        }
        let body = Cuboid::new(
            Vec3::new(x - hx, y - hy, 0.0),
            Vec3::new(x + hx, y + hy, c.human_height_m),
        )?;
        let segments = human_surfaces(c, &body)?;
        Ok(Scene {
            human: Some(Human {
                center: (x, y),
                body,
                segments,
            }),
            ..self.clone()
        })
    }

    pub fn remove_human(&self) -> Scene {
        Scene {
            human: None,
            ..self.clone()
        }
    }

    pub fn human(&self) -> Option<&Human> {
        self.human.as_ref()
    }

    pub fn human_segments(&self) -> &[SurfaceSegment] {
        self.human.as_ref().map_or(&[], |h| &h.segments)
    }

    pub fn occluders(&self) -> &[Cuboid] {
        self.human
            .as_ref()
            .map_or(&[], |h| std::slice::from_ref(&h.body))
    }

    /// Static segments followed by human segments.
    pub fn all_segments(&self) -> Vec<SurfaceSegment> {
        let mut v = self.static_segments.clone();
        v.extend_from_slice(self.human_segments());
        v
    }

    /// Digest of the empty-room configuration.
    pub fn config_digest(&self) -> String {
        self.config.digest()
    }

    /// Digest of the full scene state, human placement included.
    pub fn digest(&self) -> String {
        match &self.human {
            None => self.config.digest(),
            Some(h) => {
                let doc = serde_json::json!({
                    "config": self.config,
                    "human": [h.center.0, h.center.1],
                });
                digest_json(&serde_json::to_vec(&doc).expect("json"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The eight symmetries of the square about the room center.
    fn square_symmetries() -> Vec<Box<dyn Fn(Vec3) -> Vec3>> {
        let c = 2.5;
        let mut out: Vec<Box<dyn Fn(Vec3) -> Vec3>> = Vec::new();
        for k in 0..4 {
            for mirror in [false, true] {
                out.push(Box::new(move |p: Vec3| {
                    let (mut x, mut y) = (p.x - c, p.y - c);
                    if mirror {
                        x = -x;
                    }
                    for _ in 0..k {
                        (x, y) = (-y, x);
                    }
                    Vec3::new(x + c, y + c, p.z)
                }));
            }
        }
        out
    }

    fn direction_map(f: &dyn Fn(Vec3) -> Vec3, v: Vec3) -> Vec3 {
        let o = Vec3::new(0.0, 0.0, 0.0);
        f(v + Vec3::new(2.5, 2.5, 0.0)) - f(o + Vec3::new(2.5, 2.5, 0.0))
    }

    #[test]
    fn default_scene_layout() {
        let scene = build_scene(&SceneConfig::default()).unwrap();
        assert_eq!(scene.detectors.len(), 9);
        assert_eq!(scene.detectors[4].position, Vec3::new(2.5, 2.5, 3.0));
        assert_eq!(scene.detectors[4].position, scene.emitter.position);
        assert_eq!(scene.static_segments.len(), 4 * 240 + 400);
        assert!(scene.human().is_none());
        assert!(scene.occluders().is_empty());
        assert!(scene.detectors.iter().all(|d| d.position.z == 3.0));
        assert!(scene.static_segments.iter().all(|s| s.centroid.z < 3.0));
    }

    #[test]
    fn sixty_degree_led_is_first_order() {
        let cfg = SceneConfig::default();
        assert!((cfg.lambertian_order() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detector_poses() {
        let cfg = SceneConfig::default();
        let (_, n) = pd_pose(4, &cfg);
        assert_eq!(n, Vec3::DOWN);

        let s = 10f64.to_radians().sin();
        let c = 10f64.to_radians().cos();
        let (p, n) = pd_pose(0, &cfg);
        assert_eq!((p.x, p.y), (1.25, 1.25));
        let horiz = (n.x * n.x + n.y * n.y).sqrt();
        assert!((horiz - 0.17365).abs() < 1e-5);
        assert!((horiz - s).abs() < 1e-12);
        assert!(n.x < 0.0 && n.y < 0.0 && (n.x - n.y).abs() < 1e-15);
        assert!((n.z + c).abs() < 1e-12);

        let (p, n) = pd_pose(1, &cfg);
        assert_eq!((p.x, p.y), (2.5, 1.25));
        assert!((n - Vec3::new(0.0, -s, -c)).norm() < 1e-12);

        for i in 0..9 {
            assert!(pd_pose(i, &cfg).1.is_unit(1e-12));
        }
    }

    #[test]
    fn detectors_map_onto_detectors_under_square_symmetry() {
        let scene = build_scene(&SceneConfig::default()).unwrap();
        for g in square_symmetries() {
            for d in &scene.detectors {
                let p = g(d.position);
                let image = scene
                    .detectors
                    .iter()
                    .find(|e| (e.position - p).norm() < 1e-12)
                    .expect("detector image");
                let n = direction_map(&*g, d.normal);
                assert!((image.normal - n).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn human_surfaces_carry_three_reflectances() {
        let scene = build_scene(&SceneConfig::default()).unwrap();
        let occupied = scene.place_human(2.5, 2.5).unwrap();
        let mut rhos: Vec<f64> = occupied
            .human_segments()
            .iter()
            .map(|s| s.reflectance)
            .collect();
        rhos.sort_by(f64::total_cmp);
        rhos.dedup();
        assert_eq!(rhos, vec![0.3, 0.5, 0.6]);
        assert_eq!(occupied.occluders().len(), 1);
        assert_eq!(occupied.human_segments().len(), 4 + 4 * 2 * (6 + 2));

        let area: f64 = occupied.human_segments().iter().map(|s| s.area).sum();
        let expected = 0.4 * 0.4 + 4.0 * 0.4 * 1.8;
        assert!((area - expected).abs() < 1e-12);
        let band: f64 = occupied
            .human_segments()
            .iter()
            .filter(|s| s.tag == SurfaceTag::HumanSideUpper)
            .map(|s| s.area)
            .sum();
        assert!((band - 4.0 * 0.4 * 0.3).abs() < 1e-12);
        assert!(occupied
            .human_segments()
            .iter()
            .filter(|s| s.tag == SurfaceTag::HumanSideUpper)
            .all(|s| s.centroid.z > 1.5 && s.reflectance == 0.5));
    }

    #[test]
    fn placement_must_fit() {
        let scene = build_scene(&SceneConfig::default()).unwrap();
        assert!(matches!(
            scene.place_human(0.1, 2.5),
            Err(Error::Placement { .. })
        ));
        assert!(matches!(
            scene.place_human(2.5, 4.85),
            Err(Error::Placement { .. })
        ));
        assert!(scene.place_human(0.2, 4.8).is_ok());
    }

    #[test]
    fn remove_human_restores_digest() {
        let scene = build_scene(&SceneConfig::default()).unwrap();
        let occupied = scene.place_human(1.0, 3.0).unwrap();
        assert_ne!(occupied.digest(), scene.digest());
        let cleared = occupied.remove_human();
        assert_eq!(cleared.digest(), scene.digest());
        assert_eq!(cleared, scene);
    }

    #[test]
    fn digest_is_deterministic_and_config_sensitive() {
        let a = SceneConfig::default();
        assert_eq!(a.digest(), SceneConfig::default().digest());
        let b = SceneConfig {
            wall_reflectance: 0.7,
            ..SceneConfig::default()
        };
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn config_file_parsing() {
        assert_eq!(
            SceneConfig::from_json_str("").unwrap(),
            SceneConfig::default()
        );
        assert_eq!(
            SceneConfig::from_json_str("{}").unwrap(),
            SceneConfig::default()
        );
        let cfg = SceneConfig::from_json_str(r#"{"resolution_m": 0.5, "bounces": 2}"#).unwrap();
        assert_eq!(cfg.resolution_m, 0.5);
        assert_eq!(cfg.bounces, 2);
        assert!(SceneConfig::from_json_str(r#"{"colour": 1}"#).is_err());
        assert!(SceneConfig::from_json_str(r#"{"pd_fov_deg": 95}"#).is_err());
        assert!(SceneConfig::from_json_str(r#"{"led_position_m": [6, 2.5, 3]}"#).is_err());
        assert!(SceneConfig::from_json_str(r#"{"pd_grid_x_m": [-1, 2.5, 3.75]}"#).is_err());
        assert!(SceneConfig::from_json_str(r#"{"wall_reflectance": 1.2}"#).is_err());
        let round = SceneConfig::from_json_str(&SceneConfig::default().to_json()).unwrap();
        assert_eq!(round, SceneConfig::default());
    }
}
