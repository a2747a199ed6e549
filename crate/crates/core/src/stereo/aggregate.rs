use rayon::prelude::*;

use super::cost::CostVolume;
use super::{SgmParams, StereoError};

/// Path directions `r` as `(dx, dy)`. Four-path aggregation uses the
/// first four.
pub const DIRECTIONS: [(isize, isize); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, 1),
    (1, -1),
    (-1, -1),
];

/// One recursion step for a single pixel, returning `min_d L(p, d)`.
#[inline]
fn step(c: &[u16], prev: &[u16], p1: u32, p2: u32, out: &mut [u16]) -> u16 {
    let n = c.len();
    let prev_min = prev.iter().copied().min().unwrap_or(0) as u32;
    let jump = prev_min + p2;
    let mut out_min = u16::MAX;
    for d in 0..n {
        let mut best = prev[d] as u32;
        if d > 0 {
            best = best.min(prev[d - 1] as u32 + p1);
        }
        if d + 1 < n {
            best = best.min(prev[d + 1] as u32 + p1);
        }
        best = best.min(jump);
        let v = (c[d] as u32 + best - prev_min) as u16;
        out[d] = v;
        out_min = out_min.min(v);
    }
    out_min
}

/// Path costs `L_r` for one direction `r = (dx, dy)` with unit steps.
///
/// `L_r(p, d) = C(p, d) + min(L_r(p-r, d), L_r(p-r, d±1) + P1,
/// min_k L_r(p-r, k) + P2) - min_k L_r(p-r, k)`, and `L_r = C` where
/// `p - r` leaves the image.
pub fn aggregate_direction(
    volume: &CostVolume,
    dir: (isize, isize),
    p1: u16,
    p2: u16,
) -> CostVolume {
    let (dx, dy) = dir;
    assert!(
        dx.abs() <= 1 && dy.abs() <= 1 && (dx, dy) != (0, 0),
        "unit direction required"
    );
    let (w, h, nd) = (volume.width(), volume.height(), volume.num_disparities());
    let (p1, p2) = (p1 as u32, p2 as u32);
    let costs = volume.as_slice();
    let mut out = CostVolume::zeros(w, h, nd);
    if w == 0 || h == 0 {
        return out;
    }
    let row_len = w * nd;
    let lbuf = out.as_mut_slice();

    if dy == 0 {
        lbuf.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, lrow)| {
                let crow = &costs[y * row_len..(y + 1) * row_len];
                let xs: Box<dyn Iterator<Item = usize>> = if dx > 0 {
                    Box::new(0..w)
                } else {
                    Box::new((0..w).rev())
                };
                let mut prev_x: Option<usize> = None;
                for x in xs {
                    let c = &crow[x * nd..(x + 1) * nd];
                    match prev_x {
                        None => lrow[x * nd..(x + 1) * nd].copy_from_slice(c),
                        Some(px) => {
                            let (prev, cur) = if px < x {
                                let (a, b) = lrow.split_at_mut(x * nd);
                                (&a[px * nd..(px + 1) * nd], &mut b[..nd])
                            } else {
                                let (a, b) = lrow.split_at_mut(px * nd);
                                (&b[..nd], &mut a[x * nd..(x + 1) * nd])
                            };
                            step(c, prev, p1, p2, cur);
                        }
                    }
                    prev_x = Some(x);
                }
            });
        return out;
    }

    let ys: Vec<usize> = if dy > 0 {
        (0..h).collect()
    } else {
        (0..h).rev().collect()
    };
    for (i, &y) in ys.iter().enumerate() {
        let crow = &costs[y * row_len..(y + 1) * row_len];
        if i == 0 {
            lbuf[y * row_len..(y + 1) * row_len].copy_from_slice(crow);
            continue;
        }
        let py = ys[i - 1];
        let (prev_row, cur_row): (&[u16], &mut [u16]) = if py < y {
            let (a, b) = lbuf.split_at_mut(y * row_len);
            (&a[py * row_len..(py + 1) * row_len], &mut b[..row_len])
        } else {
            let (a, b) = lbuf.split_at_mut(py * row_len);
            (&b[..row_len], &mut a[y * row_len..(y + 1) * row_len])
        };
        cur_row.par_chunks_mut(nd).enumerate().for_each(|(x, cur)| {
            let c = &crow[x * nd..(x + 1) * nd];
            let px = x as isize - dx;
            if px < 0 || px >= w as isize {
                cur.copy_from_slice(c);
            } else {
                let px = px as usize;
                step(c, &prev_row[px * nd..(px + 1) * nd], p1, p2, cur);
            }
        });
    }
    out
}

/// Aggregated costs `S(p, d) = Σ_r L_r(p, d)` over the first
/// `params.num_paths` entries of [`DIRECTIONS`].
pub fn aggregate_paths(volume: &CostVolume, params: &SgmParams) -> Result<CostVolume, StereoError> {
    params.validate_aggregation(volume.max_cost())?;
    let (w, h, nd) = (volume.width(), volume.height(), volume.num_disparities());
    let mut sum = CostVolume::zeros(w, h, nd);
    for &dir in &DIRECTIONS[..params.num_paths] {
        let l = aggregate_direction(volume, dir, params.p1, params.p2);
        sum.as_mut_slice()
            .par_chunks_mut(4096)
            .zip(l.as_slice().par_chunks(4096))
            .for_each(|(s, l)| {
                for (s, l) in s.iter_mut().zip(l) {
                    *s += *l;
                }
            });
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(p1: u16, p2: u16, num_paths: usize) -> SgmParams {
        SgmParams {
            p1,
            p2,
            num_paths,
            ..Default::default()
        }
    }

    #[test]
    fn zero_volume_stays_zero() {
        let v = CostVolume::zeros(7, 5, 8);
        let s = aggregate_paths(&v, &params(3, 10, 8)).unwrap();
        assert!(s.as_slice().iter().all(|&c| c == 0));
    }

    #[test]
    fn hand_computed_scanline() {
        // C = [[0,5],[5,0],[5,0],[0,5]], P1=1, P2=2, left-to-right.
        // x=0: L=[0,5]                          (path start)
        // x=1: prev min 0 -> L=[5+min(0,6,2)-0, 0+min(5,1,2)-0] = [5,1]
        // x=2: prev min 1 -> L=[5+min(5,2,3)-1, 0+min(1,6,3)-1] = [6,0]
        // x=3: prev min 0 -> L=[0+min(6,1,2)-0, 5+min(0,7,2)-0] = [1,5]
        let c = CostVolume::new(4, 1, 2, vec![0, 5, 5, 0, 5, 0, 0, 5]);
        let l = aggregate_direction(&c, (1, 0), 1, 2);
        assert_eq!(l.as_slice(), &[0, 5, 5, 1, 6, 0, 1, 5]);
    }

    #[test]
    fn single_pixel_is_four_or_eight_copies() {
        let c = CostVolume::new(1, 1, 3, vec![4, 0, 9]);
        let s4 = aggregate_paths(&c, &params(1, 2, 4)).unwrap();
        assert_eq!(s4.as_slice(), &[16, 0, 36]);
        let s8 = aggregate_paths(&c, &params(1, 2, 8)).unwrap();
        assert_eq!(s8.as_slice(), &[32, 0, 72]);
    }

    #[test]
    fn overflow_bound_is_checked() {
        let c = CostVolume::new(1, 1, 2, vec![60000, 0]);
        assert!(aggregate_paths(&c, &params(1, 2, 8)).is_err());
    }
}
