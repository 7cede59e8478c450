//! Samples, the on-disk dataset layout, and the protocol validator.
//!
//! ```text
//! <root>/manifest.json
//! <root>/sample_0000/cameras.json        {"input": Camera, "views": [Camera, ...]}
//! <root>/sample_0000/face_box.json       {"center": [x, y], "size": s}
//! <root>/sample_0000/input.png           premultiplied RGBA, 8-bit
//! <root>/sample_0000/input_depth.pfm     camera-frame z, 0 where not fully covered
//! <root>/sample_0000/input_mask.png      alpha > 0.5
//! <root>/sample_0000/view_1.png ...      same triple for every supervision view
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cameras::{angle_between, sample_cameras, CENTRAL_FRACTION};
use super::noise::splitmix;
use super::raytrace::raytrace_view;
use super::scene::{build_scene, face_axis};
use super::DatasetConfig;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::roi::FaceBox;

pub const FORMAT_VERSION: &str = "splatterlab-ds/1";
const ANGLE_TOL: f64 = 1e-6;
const DISTANCE_TOL: f64 = 1e-9;

/// One calibrated view: premultiplied RGBA, camera-frame depth and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub rgba: Image,
    pub depth: Image,
    pub mask: Image,
}

impl View {
    pub fn color(&self) -> Image {
        self.rgba.select_channels(0, 3)
    }

    pub fn alpha(&self) -> Image {
        self.rgba.select_channels(3, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub input: View,
    pub face_box: FaceBox,
    pub views: Vec<View>,
    pub background_seed: u64,
}

impl MultiViewSample {
    /// Background colour every render of this sample is composited over.
    pub fn background(&self) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.background_seed);
        [rng.random(), rng.random(), rng.random()]
    }

    /// Views including the input, which comes first.
    pub fn view_count(&self) -> usize {
        1 + self.views.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub dir: String,
    pub sample_seed: u64,
    pub scene_seed: u64,
    pub camera_seed: u64,
    pub background_seed: u64,
}

impl SampleEntry {
    pub fn new(dataset_seed: u64, index: usize) -> Self {
        let sample_seed = splitmix(dataset_seed ^ splitmix(index as u64));
        Self {
            dir: format!("sample_{index:04}"),
            sample_seed,
            scene_seed: sample_seed,
            camera_seed: splitmix(sample_seed ^ 1),
            background_seed: splitmix(sample_seed ^ 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: DatasetConfig,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.format != FORMAT_VERSION {
            return Err(Error::format("manifest", format!("unsupported format {:?}", m.format)));
        }
        m.config.validate()?;
        if m.samples.len() != m.config.n_samples {
            return Err(Error::format(
                "manifest",
                format!("{} sample entries for n_samples = {}", m.samples.len(), m.config.n_samples),
            ));
        }
        for s in &m.samples {
            if s.dir.is_empty() || s.dir.contains(['/', '\\']) || s.dir.starts_with('.') {
                return Err(Error::format("manifest", format!("invalid sample directory {:?}", s.dir)));
            }
        }
        Ok(m)
    }

    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasJson {
    input: Camera,
    views: Vec<Camera>,
}

fn quantize_rgba(img: &Image) -> Image {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn mask_of(rgba: &Image) -> Image {
    rgba.select_channels(3, 1).map(|a| if a > 0.5 { 1.0 } else { 0.0 })
}

fn render_view(scene: &super::ProceduralScene, camera: Camera) -> View {
    let traced = raytrace_view(scene, &camera);
    // Stored precision: 8-bit colour and 32-bit depth.
    let rgba = quantize_rgba(&traced.rgba);
    let depth = traced.depth.map(|z| z as f32 as f64);
    View {
        mask: mask_of(&rgba),
        camera,
        rgba,
        depth,
    }
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &DatasetConfig, index: usize) -> Result<(MultiViewSample, SampleEntry)> {
    cfg.validate()?;
    let entry = SampleEntry::new(cfg.seed, index);
    let scene = build_scene(entry.scene_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(entry.camera_seed);
    let cams = sample_cameras(&scene, cfg, &mut rng)?;
    let input = render_view(&scene, cams.input);
    let views = cams.views.into_iter().map(|c| render_view(&scene, c)).collect();
    Ok((
        MultiViewSample {
            input,
            face_box: cams.face_box,
            views,
            background_seed: entry.background_seed,
        },
        entry,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_view(dir: &Path, stem: &str, view: &View) -> Result<()> {
    view.rgba.write_png(dir.join(format!("{stem}.png")))?;
    view.depth.write_pfm(dir.join(format!("{stem}_depth.pfm")))?;
    view.mask.write_png(dir.join(format!("{stem}_mask.png")))
}

pub fn write_sample(dir: &Path, sample: &MultiViewSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("cameras.json"),
        &CamerasJson {
            input: sample.input.camera.clone(),
            views: sample.views.iter().map(|v| v.camera.clone()).collect(),
        },
    )?;
    write_json(&dir.join("face_box.json"), &sample.face_box)?;
    write_view(dir, "input", &sample.input)?;
    for (k, v) in sample.views.iter().enumerate() {
        write_view(dir, &format!("view_{}", k + 1), v)?;
    }
    Ok(())
}

pub fn generate_dataset(cfg: &DatasetConfig, root: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let samples = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let (sample, entry) = generate_sample(cfg, i)?;
            write_sample(&root.join(&entry.dir), &sample)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        samples,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn read_view(dir: &Path, stem: &str, camera: Camera) -> Result<View> {
    let rgba = Image::read_png(dir.join(format!("{stem}.png")))?;
    let depth = Image::read_pfm(dir.join(format!("{stem}_depth.pfm")))?;
    let mask = Image::read_png(dir.join(format!("{stem}_mask.png")))?;
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let ok = rgba.channels() == 4
        && depth.channels() == 1
        && mask.channels() == 1
        && [&rgba, &depth, &mask].iter().all(|i| i.width() == w && i.height() == h);
    if !ok {
        return Err(Error::Validation(format!("{stem}: image shapes disagree with its {w}x{h} camera")));
    }
    Ok(View {
        camera,
        rgba,
        depth,
        mask,
    })
}

/// Parses `cameras.json` into the input camera and the supervision cameras.
pub fn parse_cameras(text: &str) -> Result<(Camera, Vec<Camera>)> {
    let cams: CamerasJson = serde_json::from_str(text)?;
    Ok((cams.input, cams.views))
}

/// Loads a sample directory written by [`write_sample`].
pub fn load_sample(dir: impl AsRef<Path>, background_seed: u64) -> Result<MultiViewSample> {
    let dir = dir.as_ref();
    let path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (input_cam, view_cams) = parse_cameras(&text)?;
    let face_box = FaceBox::read_json(dir.join("face_box.json"))?;
    let input = read_view(dir, "input", input_cam)?;
    let views = view_cams
        .into_iter()
        .enumerate()
        .map(|(k, c)| read_view(dir, &format!("view_{}", k + 1), c))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiViewSample {
        input,
        face_box,
        views,
        background_seed,
    })
}

/// Loads sample `index` of the dataset at `root`.
pub fn load_dataset_sample(root: impl AsRef<Path>, index: usize) -> Result<MultiViewSample> {
    let root = root.as_ref();
    let manifest = Manifest::read(root)?;
    let entry = manifest
        .samples
        .get(index)
        .ok_or_else(|| Error::Validation(format!("no sample {index} in {} samples", manifest.samples.len())))?;
    load_sample(root.join(&entry.dir), entry.background_seed)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn check_view(view: &View, name: &str, fail: &mut impl FnMut(String)) {
    for i in 0..view.mask.pixel_count() {
        let alpha = view.rgba.data()[4 * i + 3];
        let expected = if alpha > 0.5 { 1.0 } else { 0.0 };
        if view.mask.data()[i] != expected {
            fail(format!("{name}: mask disagrees with alpha at pixel {i}"));
            return;
        }
        let depth = view.depth.data()[i];
        if (depth > 0.0) != (alpha == 1.0) || !depth.is_finite() || depth < 0.0 {
            fail(format!("{name}: depth {depth} inconsistent with alpha {alpha} at pixel {i}"));
            return;
        }
    }
}

fn check_sample(sample: &MultiViewSample, cfg: &DatasetConfig, name: &str, fail: &mut impl FnMut(String)) {
    let head = Vector3::zeros();
    if sample.view_count() != cfg.n_views {
        fail(format!("{name}: {} views, expected {}", sample.view_count(), cfg.n_views));
    }
    let input = &sample.input.camera;
    let offset = input.center() - head;
    let distance = offset.norm();
    if distance < cfg.distance_min - DISTANCE_TOL || distance > cfg.distance_max + DISTANCE_TOL {
        fail(format!("{name}: input distance {distance:.4} m outside [{}, {}]", cfg.distance_min, cfg.distance_max));
    }
    let face = angle_between(&offset, &face_axis()).to_degrees();
    if face > cfg.face_angle_deg + ANGLE_TOL {
        fail(format!("{name}: face angle {face:.3} deg exceeds {}", cfg.face_angle_deg));
    }
    match input.project(&head) {
        Ok((px, _)) => {
            let margin = (1.0 - CENTRAL_FRACTION) / 2.0;
            let (w, h) = (input.width() as f64, input.height() as f64);
            let inside = px.x >= margin * w - 1e-6
                && px.x <= (1.0 - margin) * w + 1e-6
                && px.y >= margin * h - 1e-6
                && px.y <= (1.0 - margin) * h + 1e-6;
            if !inside {
                fail(format!("{name}: head center projects to {px:?}, outside the central region"));
            }
        }
        Err(_) => fail(format!("{name}: head center behind the input camera")),
    }
    if sample.face_box.validate(input).is_err() {
        fail(format!("{name}: face box invalid for the input camera"));
    }
    for (k, v) in sample.views.iter().enumerate() {
        let rel = v.camera.center() - head;
        if (rel.norm() - cfg.view_distance).abs() > 1e-6 {
            fail(format!("view {} of {name}: distance {:.4} m, expected {}", k + 1, rel.norm(), cfg.view_distance));
        }
        let cap = angle_between(&rel, &offset).to_degrees();
        if cap > cfg.cap_angle_deg + ANGLE_TOL {
            fail(format!("view {} of {name}: {cap:.3} deg from the input direction", k + 1));
        }
        let axis = v.camera.rotation().column(2).into_owned();
        if angle_between(&axis, &(head - v.camera.center())) > 1e-6 {
            fail(format!("view {} of {name}: not aimed at the head center", k + 1));
        }
        check_view(v, &format!("view {} of {name}", k + 1), fail);
    }
    check_view(&sample.input, &format!("input of {name}"), fail);
}

/// Checks every sample of a dataset against the capture protocol and the
/// image invariants.
pub fn validate_dataset(root: impl AsRef<Path>) -> Result<ValidationReport> {
    let root = root.as_ref();
    let manifest = Manifest::read(root)?;
    let results: Vec<Vec<String>> = manifest
        .samples
        .par_iter()
        .map(|entry| {
            let mut failures = Vec::new();
            let dir: PathBuf = root.join(&entry.dir);
            match load_sample(&dir, entry.background_seed) {
                Ok(sample) => check_sample(&sample, &manifest.config, &entry.dir, &mut |f| failures.push(f)),
                Err(e) => failures.push(format!("{}: {e}", entry.dir)),
            }
            failures
        })
        .collect();
    Ok(ValidationReport {
        samples: manifest.samples.len(),
        failures: results.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_sample_satisfies_its_invariants() {
        let cfg = DatasetConfig::default();
        let (sample, _) = generate_sample(&cfg, 0).unwrap();
        let mut failures = Vec::new();
        check_sample(&sample, &cfg, "s", &mut |f| failures.push(f));
        assert!(failures.is_empty(), "{failures:?}");
        let covered: f64 = sample.input.mask.data().iter().sum();
        assert!(covered > 100.0, "head covers {covered} input pixels");
    }

    #[test]
    fn background_is_deterministic_and_in_range() {
        let cfg = DatasetConfig::default();
        let (a, _) = generate_sample(&cfg, 2).unwrap();
        let (b, _) = generate_sample(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.background(), b.background());
        assert!(a.background().iter().all(|c| (0.0..1.0).contains(c)));
    }

    #[test]
    fn manifest_rejects_bad_input() {
        let cfg = DatasetConfig::default();
        let good = Manifest {
            format: FORMAT_VERSION.into(),
            config: cfg.clone(),
            samples: vec![SampleEntry::new(0, 0)],
        };
        let text = serde_json::to_string(&good).unwrap();
        assert_eq!(Manifest::from_json(&text).unwrap(), good);
        assert!(Manifest::from_json(&text.replace("splatterlab-ds/1", "other/2")).is_err());
        assert!(Manifest::from_json(&text.replace("sample_0000", "../x")).is_err());
        assert!(Manifest::from_json(&text.replace("\"n_samples\":1", "\"n_samples\":2")).is_err());
        assert!(Manifest::from_json(&text.replace("\"format\"", "\"bogus\":1,\"format\"")).is_err());
    }
}
