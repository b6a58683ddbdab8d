use crate::rng::Rng;

/// Crops a random region covering 60-100% of the area with aspect ratio in
/// [3/4, 4/3] and resizes it back bilinearly. `img` is `C×H×W`.
pub fn random_resized_crop(img: &[f64], c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let area = (h * w) as f64 * rng.uniform_range(0.6, 1.0);
    let ratio = rng.uniform_range((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln()).exp();
    let cw = (area * ratio).sqrt().clamp(1.0, w as f64);
    let ch = (area / ratio).sqrt().clamp(1.0, h as f64);
    let x0 = rng.uniform() * (w as f64 - cw);
    let y0 = rng.uniform() * (h as f64 - ch);
    let mut out = Vec::with_capacity(img.len());
    for k in 0..c {
        let plane = &img[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            let sy = (y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (y1, fy) = (sy.floor() as usize, sy - sy.floor());
            let y2 = (y1 + 1).min(h - 1);
            for x in 0..w {
                let sx = (x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (x1, fx) = (sx.floor() as usize, sx - sx.floor());
                let x2 = (x1 + 1).min(w - 1);
                let top = plane[y1 * w + x1] * (1.0 - fx) + plane[y1 * w + x2] * fx;
                let bot = plane[y2 * w + x1] * (1.0 - fx) + plane[y2 * w + x2] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Mirrors each row of a `C×H×W` image in place.
pub fn hflip(img: &mut [f64], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let orig: Vec<f64> = (0..12).map(f64::from).collect();
        let mut img = orig.clone();
        hflip(&mut img, 3);
        assert_eq!(&img[..3], &[2.0, 1.0, 0.0]);
        hflip(&mut img, 3);
        assert_eq!(img, orig);
    }

    #[test]
    fn crop_of_constant_image_is_constant() {
        let img = vec![0.7; 2 * 8 * 8];
        let mut rng = Rng::new(5);
        let out = random_resized_crop(&img, 2, 8, 8, &mut rng);
        assert_eq!(out.len(), img.len());
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }
}
