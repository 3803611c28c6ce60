//! Colour-space helpers and simple foreground measurements on RGB images.

use crate::rendering::RenderedImage;

/// `(h in [0, 360), s in [0, 1], v in [0, 1])` from RGB in `[0, 1]`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h.rem_euclid(360.0), s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Thresholds defining "coloured foreground" against a grey background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForegroundThreshold {
    pub min_saturation: f64,
    pub min_value: f64,
}

impl Default for ForegroundThreshold {
    fn default() -> Self {
        Self {
            min_saturation: 0.25,
            min_value: 0.15,
        }
    }
}

/// Row-major boolean mask of coloured pixels.
pub fn foreground_mask(image: &RenderedImage, t: ForegroundThreshold) -> Vec<bool> {
    (0..image.height * image.width)
        .map(|i| {
            let [_, s, v] = rgb_to_hsv(image.pixel(i / image.width, i % image.width));
            s > t.min_saturation && v > t.min_value
        })
        .collect()
}

/// Circular mean hue (degrees) of the foreground, or `None` without foreground.
pub fn mean_foreground_hue(image: &RenderedImage, t: ForegroundThreshold) -> Option<f64> {
    let mask = foreground_mask(image, t);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let [h, _, _] = rgb_to_hsv(image.pixel(i / image.width, i % image.width));
            sx += h.to_radians().cos();
            sy += h.to_radians().sin();
            n += 1;
        }
    }
    (n > 0).then(|| sy.atan2(sx).to_degrees().rem_euclid(360.0))
}

/// Signed smallest angle `b - a` in `(-180, 180]` degrees.
pub fn hue_difference(a: f64, b: f64) -> f64 {
    let d = (b - a).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Sizes of the 4-connected components of `mask` (a `height x width` grid),
/// largest first.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (i, j) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - width);
            }
            if i + 1 < height {
                visit(p + width);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < width {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Number of foreground blobs with at least `min_pixels` pixels.
pub fn count_blobs(image: &RenderedImage, t: ForegroundThreshold, min_pixels: usize) -> usize {
    let mask = foreground_mask(image, t);
    connected_components(&mask, image.height, image.width)
        .into_iter()
        .filter(|&s| s >= min_pixels)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hsv_round_trip(h in 0.0f64..360.0, s in 0.0f64..=1.0, v in 0.0f64..=1.0) {
            let rgb = hsv_to_rgb([h, s, v]);
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for k in 0..3 {
                prop_assert!((rgb[k] - back[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn mixing_with_grey_keeps_hue(h in 0.0f64..360.0, g in 0.0f64..=1.0, a in 0.05f64..=1.0) {
            let c = hsv_to_rgb([h, 0.9, 0.8]);
            let mixed = [0, 1, 2].map(|k| a * c[k] + (1.0 - a) * g);
            prop_assert!(hue_difference(h, rgb_to_hsv(mixed)[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn primaries() {
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0])[0], 0.0);
        assert_eq!(rgb_to_hsv([0.0, 1.0, 0.0])[0], 120.0);
        assert_eq!(rgb_to_hsv([0.0, 0.0, 1.0])[0], 240.0);
        assert_eq!(rgb_to_hsv([0.5, 0.5, 0.5])[1], 0.0);
        assert_eq!(hue_difference(350.0, 10.0), 20.0);
        assert_eq!(hue_difference(10.0, 350.0), -20.0);
    }

    #[test]
    fn blob_counting() {
        #[rustfmt::skip]
        let mask = [
            true,  true,  false, false, true,
            false, true,  false, false, true,
            false, false, false, false, false,
            true,  false, false, true,  false,
        ];
        assert_eq!(connected_components(&mask, 4, 5), vec![3, 2, 1, 1]);
    }
}
