//! Seeded lattice hashing and value noise used by the procedural scene.

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a seed and lattice coordinates, uniform in `[0, 1)`.
#[inline]
pub fn hash3(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ x as u64);
    h = splitmix64(h ^ (y as u64).rotate_left(21));
    h = splitmix64(h ^ (z as u64).rotate_left(42));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Smoothly interpolated 2D value noise in `[0, 1)`.
pub fn value_noise2(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (ix, iy) = (x0 as i64, y0 as i64);
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let c00 = hash3(seed, ix, iy, 0);
    let c10 = hash3(seed, ix + 1, iy, 0);
    let c01 = hash3(seed, ix, iy + 1, 0);
    let c11 = hash3(seed, ix + 1, iy + 1, 0);
    lerp(lerp(c00, c10, tx), lerp(c01, c11, tx), ty)
}

/// Smoothly interpolated 3D value noise in `[0, 1)`.
pub fn value_noise3(seed: u64, x: f64, y: f64, z: f64) -> f64 {
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (ix, iy, iz) = (x0 as i64, y0 as i64, z0 as i64);
    let (tx, ty, tz) = (smooth(x - x0), smooth(y - y0), smooth(z - z0));
    let c = |dx: i64, dy: i64, dz: i64| hash3(seed, ix + dx, iy + dy, iz + dz);
    let a = lerp(
        lerp(c(0, 0, 0), c(1, 0, 0), tx),
        lerp(c(0, 1, 0), c(1, 1, 0), tx),
        ty,
    );
    let b = lerp(
        lerp(c(0, 0, 1), c(1, 0, 1), tx),
        lerp(c(0, 1, 1), c(1, 1, 1), tx),
        ty,
    );
    lerp(a, b, tz)
}

/// Fractal sum of `octaves` layers of 2D value noise, normalized to `[-1, 1]`.
pub fn fbm2(seed: u64, x: f64, y: f64, octaves: u32, persistence: f64) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    for o in 0..octaves {
        sum += amp
            * (2.0 * value_noise2(seed.wrapping_add(o as u64 * 7919), x * freq, y * freq) - 1.0);
        norm += amp;
        amp *= persistence;
        freq *= 2.0;
    }
    if norm > 0.0 {
        sum / norm
    } else {
        0.0
    }
}
