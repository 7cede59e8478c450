//! Seeded 3D value noise.

/// Hash of a lattice point to `[0, 1)`.
fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x51_7cc1_b727_220a;
    for v in [x, y, z] {
        h = splitmix(h ^ (v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise with smoothstep weights, in `[0, 1)`.
pub fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let base = p.map(|v| v.floor());
    let frac = [smooth(p[0] - base[0]), smooth(p[1] - base[1]), smooth(p[2] - base[2])];
    let b = base.map(|v| v as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [(dx, 0), (dy, 1), (dz, 2)]
            .iter()
            .map(|&(d, axis)| if d == 1 { frac[axis] } else { 1.0 - frac[axis] })
            .product::<f64>();
        acc += w * lattice(seed, b[0] + dx as i64, b[1] + dy as i64, b[2] + dz as i64);
    }
    acc
}

/// Three octaves at `frequency`, doubling each octave with halved amplitude,
/// normalized back to `[0, 1)`.
pub fn fractal_noise(seed: u64, p: [f64; 3], frequency: f64) -> f64 {
    let mut acc = 0.0;
    let mut amp = 1.0;
    let mut norm = 0.0;
    let mut f = frequency;
    for octave in 0..3u64 {
        acc += amp * value_noise(seed.wrapping_add(octave), p.map(|v| v * f));
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    acc / norm
}
