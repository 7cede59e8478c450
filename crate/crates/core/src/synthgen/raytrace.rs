//! Ground-truth renderer: exact ray casting against the scene's ellipsoids.
//!
//! Colour and alpha use 2×2 supersampling; colour is premultiplied (misses
//! contribute black). Depth is the camera-frame z of the centre ray and is
//! only reported where all four subsamples hit, so `depth > 0 ⟺ alpha = 1`.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::scene::ProceduralScene;
use crate::camera::Camera;
use crate::image::Image;

const SUBSAMPLES: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

pub struct RayTraced {
    pub rgba: Image,
    pub depth: Image,
}

pub fn raytrace_view(scene: &ProceduralScene, cam: &Camera) -> RayTraced {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut rgba = vec![0.0; w * 4];
            let mut depth = vec![0.0; w];
            for col in 0..w {
                let mut color = Vector3::zeros();
                let mut hits = 0;
                for (dx, dy) in SUBSAMPLES {
                    let dir = cam.ray(&Vector2::new(col as f64 + dx, row as f64 + dy));
                    if let Some(hit) = scene.intersect(cam.center(), &dir) {
                        color += scene.shade(&hit);
                        hits += 1;
                    }
                }
                let px = &mut rgba[col * 4..col * 4 + 4];
                px[0] = color.x / 4.0;
                px[1] = color.y / 4.0;
                px[2] = color.z / 4.0;
                px[3] = hits as f64 / 4.0;
                if hits == SUBSAMPLES.len() {
                    let center = cam.ray(&Camera::pixel_center(row, col));
                    let z = match scene.intersect(cam.center(), &center) {
                        Some(hit) => cam.world_to_camera(&hit.point).z,
                        None => {
                            // Only possible in a crease between primitives.
                            let mut acc = 0.0;
                            for (dx, dy) in SUBSAMPLES {
                                let dir = cam.ray(&Vector2::new(col as f64 + dx, row as f64 + dy));
                                let hit = scene.intersect(cam.center(), &dir).expect("subsample hit");
                                acc += cam.world_to_camera(&hit.point).z;
                            }
                            acc / 4.0
                        }
                    };
                    depth[col] = z;
                }
            }
            (rgba, depth)
        })
        .collect();
    let mut rgba = Vec::with_capacity(w * h * 4);
    let mut depth = Vec::with_capacity(w * h);
    for (r, d) in rows {
        rgba.extend(r);
        depth.extend(d);
    }
    RayTraced {
        rgba: Image::from_vec(w, h, 4, rgba).expect("sized"),
        depth: Image::from_vec(w, h, 1, depth).expect("sized"),
    }
}
