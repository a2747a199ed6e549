use image::GrayImage;

use super::StereoError;

/// Per-pixel census descriptors.
///
/// Bit `k` is set iff the `k`-th neighbor of the window (row-major order,
/// center skipped) is strictly darker than the center. Neighborhoods are
/// edge-clamped at the image border.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusImage {
    width: usize,
    height: usize,
    bits: u32,
    data: Vec<u64>,
}

impl CensusImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Descriptor length, `window_w * window_h - 1`.
    pub fn bits(&self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u64 {
        self.data[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[u64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

#[inline]
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

pub(crate) fn validate_window(window: (usize, usize)) -> Result<(), StereoError> {
    let (w, h) = window;
    if w % 2 == 0 || h % 2 == 0 || w < 3 || h < 3 {
        return Err(StereoError::InvalidParams(format!(
            "census window {w}x{h} must have odd dimensions >= 3"
        )));
    }
    if w * h - 1 > 64 {
        return Err(StereoError::InvalidParams(format!(
            "census window {w}x{h} exceeds 64 descriptor bits"
        )));
    }
    Ok(())
}

pub fn census_transform(
    image: &GrayImage,
    window: (usize, usize),
) -> Result<CensusImage, StereoError> {
    validate_window(window)?;
    let (width, height) = (image.width() as usize, image.height() as usize);
    let (ww, wh) = window;
    if ww > width || wh > height {
        return Err(StereoError::WindowTooLarge {
            window,
            width,
            height,
        });
    }
    let (rx, ry) = ((ww / 2) as isize, (wh / 2) as isize);
    let px = image.as_raw();
    let at = |x: isize, y: isize| -> u8 {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        px[yc * width + xc]
    };
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let center = at(x, y);
            let mut desc = 0u64;
            let mut k = 0;
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if at(x + dx, y + dy) < center {
                        desc |= 1 << k;
                    }
                    k += 1;
                }
            }
            data.push(desc);
        }
    }
    Ok(CensusImage {
        width,
        height,
        bits: (ww * wh - 1) as u32,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let img = GrayImage::from_pixel(9, 7, Luma([77]));
        let c = census_transform(&img, (5, 5)).unwrap();
        assert_eq!(c.bits(), 24);
        assert!((0..7).all(|y| c.row(y).iter().all(|&d| d == 0)));
    }

    #[test]
    fn bright_center_sets_every_bit() {
        let mut img = GrayImage::from_pixel(3, 3, Luma([0]));
        img.put_pixel(1, 1, Luma([100]));
        let c = census_transform(&img, (3, 3)).unwrap();
        assert_eq!(c.get(1, 1), 0b1111_1111);
    }

    #[test]
    fn bit_order_is_row_major() {
        // only the top-left neighbor is darker
        let mut img = GrayImage::from_pixel(3, 3, Luma([50]));
        img.put_pixel(0, 0, Luma([10]));
        assert_eq!(census_transform(&img, (3, 3)).unwrap().get(1, 1), 1);
        // only the bottom-right neighbor is darker
        let mut img = GrayImage::from_pixel(3, 3, Luma([50]));
        img.put_pixel(2, 2, Luma([10]));
        assert_eq!(census_transform(&img, (3, 3)).unwrap().get(1, 1), 1 << 7);
    }

    #[test]
    fn border_is_edge_clamped() {
        let mut img = GrayImage::from_pixel(4, 4, Luma([50]));
        img.put_pixel(0, 0, Luma([90]));
        // corner pixel: its clamped neighbors above/left duplicate itself,
        // the three real neighbors are darker
        let d = census_transform(&img, (3, 3)).unwrap().get(0, 0);
        // neighbors in order: (-1,-1) (0,-1) (1,-1) (-1,0) (1,0) (-1,1) (0,1) (1,1)
        // clamped:            self    self   (1,0)  self  (1,0) (0,1)  (0,1) (1,1)
        assert_eq!(d, 0b1111_0100);
    }

    #[test]
    fn identical_images_have_zero_hamming() {
        let img = GrayImage::from_fn(16, 12, |x, y| Luma([((x * 37 + y * 91) % 251) as u8]));
        let a = census_transform(&img, (5, 5)).unwrap();
        let b = census_transform(&img, (5, 5)).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                assert_eq!(hamming(a.get(x, y), b.get(x, y)), 0);
            }
        }
    }

    #[test]
    fn window_errors() {
        let img = GrayImage::new(4, 4);
        assert!(matches!(
            census_transform(&img, (5, 5)),
            Err(StereoError::WindowTooLarge { .. })
        ));
        assert!(census_transform(&img, (2, 3)).is_err());
        assert!(census_transform(&img, (1, 1)).is_err());
        let big = GrayImage::new(20, 20);
        assert!(census_transform(&big, (9, 9)).is_err());
    }
}
