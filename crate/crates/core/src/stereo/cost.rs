use rayon::prelude::*;

use super::census::{hamming, CensusImage};
use super::StereoError;

/// Matching or aggregated costs laid out as `[(y * width + x) * D + d]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    num_disparities: usize,
    costs: Vec<u16>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, num_disparities: usize, costs: Vec<u16>) -> Self {
        assert!(num_disparities >= 1);
        assert_eq!(costs.len(), width * height * num_disparities);
        Self {
            width,
            height,
            num_disparities,
            costs,
        }
    }

    pub fn zeros(width: usize, height: usize, num_disparities: usize) -> Self {
        Self::new(
            width,
            height,
            num_disparities,
            vec![0; width * height * num_disparities],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_disparities(&self) -> usize {
        self.num_disparities
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize) -> u16 {
        self.costs[(y * self.width + x) * self.num_disparities + d]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: usize, c: u16) {
        self.costs[(y * self.width + x) * self.num_disparities + d] = c;
    }

    /// All disparity costs of one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u16] {
        let i = (y * self.width + x) * self.num_disparities;
        &self.costs[i..i + self.num_disparities]
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.costs
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [u16] {
        &mut self.costs
    }

    pub fn max_cost(&self) -> u16 {
        self.costs.iter().copied().max().unwrap_or(0)
    }
}

fn check_pair(left: &CensusImage, right: &CensusImage, d: usize) -> Result<(), StereoError> {
    if left.width() != right.width()
        || left.height() != right.height()
        || left.bits() != right.bits()
    {
        return Err(StereoError::DimensionMismatch(format!(
            "census images {}x{} ({} bits) vs {}x{} ({} bits)",
            left.width(),
            left.height(),
            left.bits(),
            right.width(),
            right.height(),
            right.bits()
        )));
    }
    if d == 0 {
        return Err(StereoError::InvalidParams(
            "num_disparities must be >= 1".into(),
        ));
    }
    Ok(())
}

/// Left-reference costs: `C(x, y, d) = H(L(x, y), R(x - d, y))`, with the
/// maximum cost (descriptor length) where `x - d` falls off the image.
pub fn build_cost_volume(
    left: &CensusImage,
    right: &CensusImage,
    num_disparities: usize,
) -> Result<CostVolume, StereoError> {
    check_pair(left, right, num_disparities)?;
    let (w, h, nd) = (left.width(), left.height(), num_disparities);
    let max = left.bits() as u16;
    let mut costs = vec![0u16; w * h * nd];
    costs
        .par_chunks_mut(w * nd)
        .enumerate()
        .for_each(|(y, row)| {
            let (lrow, rrow) = (left.row(y), right.row(y));
            for x in 0..w {
                let out = &mut row[x * nd..(x + 1) * nd];
                for (d, c) in out.iter_mut().enumerate() {
                    *c = if d <= x {
                        hamming(lrow[x], rrow[x - d]) as u16
                    } else {
                        max
                    };
                }
            }
        });
    Ok(CostVolume::new(w, h, nd, costs))
}

/// Right-reference costs with the roles swapped:
/// `C(x, y, d) = H(R(x, y), L(x + d, y))`, maximum cost past the right edge.
pub fn build_cost_volume_right(
    left: &CensusImage,
    right: &CensusImage,
    num_disparities: usize,
) -> Result<CostVolume, StereoError> {
    check_pair(left, right, num_disparities)?;
    let (w, h, nd) = (left.width(), left.height(), num_disparities);
    let max = left.bits() as u16;
    let mut costs = vec![0u16; w * h * nd];
    costs
        .par_chunks_mut(w * nd)
        .enumerate()
        .for_each(|(y, row)| {
            let (lrow, rrow) = (left.row(y), right.row(y));
            for x in 0..w {
                let out = &mut row[x * nd..(x + 1) * nd];
                for (d, c) in out.iter_mut().enumerate() {
                    *c = if x + d < w {
                        hamming(rrow[x], lrow[x + d]) as u16
                    } else {
                        max
                    };
                }
            }
        });
    Ok(CostVolume::new(w, h, nd, costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo::census::census_transform;
    use image::{GrayImage, Luma};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: u32, h: u32, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| Luma([rng.random()]))
    }

    fn shift_left(img: &GrayImage, s: u32) -> GrayImage {
        // right(x) = left(x + s), so left(x) matches right(x - s)
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            *img.get_pixel((x + s).min(img.width() - 1), y)
        })
    }

    #[test]
    fn true_shift_has_zero_cost() {
        let left = noise_image(40, 20, 1);
        let right = shift_left(&left, 5);
        let (cl, cr) = (
            census_transform(&left, (5, 5)).unwrap(),
            census_transform(&right, (5, 5)).unwrap(),
        );
        let vol = build_cost_volume(&cl, &cr, 16).unwrap();
        for y in 2..18 {
            for x in 7..33 {
                assert_eq!(vol.get(x, y, 5), 0, "({x},{y})");
            }
        }
    }

    #[test]
    fn off_image_disparities_get_max_cost() {
        let img = noise_image(20, 10, 2);
        let c = census_transform(&img, (5, 5)).unwrap();
        let vol = build_cost_volume(&c, &c, 16).unwrap();
        assert_eq!(vol.get(3, 4, 4), 24);
        assert_eq!(vol.get(3, 4, 15), 24);
        assert_eq!(vol.get(3, 4, 0), 0);
        let rv = build_cost_volume_right(&c, &c, 16).unwrap();
        assert_eq!(rv.get(19, 4, 1), 24);
        assert_eq!(rv.get(19, 4, 0), 0);
    }

    #[test]
    fn matches_brute_force_hamming() {
        let l = noise_image(8, 8, 3);
        let r = noise_image(8, 8, 4);
        let (cl, cr) = (
            census_transform(&l, (3, 3)).unwrap(),
            census_transform(&r, (3, 3)).unwrap(),
        );
        let vol = build_cost_volume(&cl, &cr, 4).unwrap();
        let rvol = build_cost_volume_right(&cl, &cr, 4).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for d in 0..4 {
                    let want = if x >= d {
                        (cl.get(x, y) ^ cr.get(x - d, y)).count_ones() as u16
                    } else {
                        8
                    };
                    assert_eq!(vol.get(x, y, d), want);
                    let want_r = if x + d < 8 {
                        (cr.get(x, y) ^ cl.get(x + d, y)).count_ones() as u16
                    } else {
                        8
                    };
                    assert_eq!(rvol.get(x, y, d), want_r);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let a = census_transform(&noise_image(8, 8, 1), (3, 3)).unwrap();
        let b = census_transform(&noise_image(9, 8, 1), (3, 3)).unwrap();
        assert!(matches!(
            build_cost_volume(&a, &b, 4),
            Err(StereoError::DimensionMismatch(_))
        ));
        assert!(build_cost_volume(&a, &a, 0).is_err());
    }
}
