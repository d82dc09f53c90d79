//! Asymmetric augmentation: the child gets flips, quarter turns, a random
//! crop and contrast jitter; the parent only gets contrast jitter.

use rand::Rng;

use super::sampler::PretextSample;
use crate::pyramid::Raster;
use crate::Scalar;

pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.25);
pub const CROP_AREA_RANGE: (f64, f64) = (0.8, 1.0);

/// Random choices for one call of [`augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub child_contrast: f64,
    pub parent_contrast: f64,
    /// Kept area fraction of the child crop.
    pub crop_area: f64,
    /// Crop offset as fractions of the available slack, in [0, 1].
    pub crop_offset: (f64, f64),
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        vflip: false,
        quarter_turns: 0,
        child_contrast: 1.0,
        parent_contrast: 1.0,
        crop_area: 1.0,
        crop_offset: (0.0, 0.0),
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentDraw {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
            child_contrast: rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            parent_contrast: rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            crop_area: rng.gen_range(CROP_AREA_RANGE.0..=CROP_AREA_RANGE.1),
            crop_offset: (rng.gen(), rng.gen()),
        }
    }

    pub fn apply<T: Scalar>(&self, sample: &PretextSample<T>) -> PretextSample<T> {
        let (parent, child) = self.apply_pair(&sample.parent, &sample.child);
        PretextSample {
            parent,
            child,
            label: sample.label,
            source: sample.source.clone(),
        }
    }

    /// Augments a bare `(parent, child)` pair.
    pub fn apply_pair<T: Scalar>(&self, parent: &Raster<T>, child: &Raster<T>) -> (Raster<T>, Raster<T>) {
        let mut child = child.clone();
        if self.hflip {
            child = flip(&child, true);
        }
        if self.vflip {
            child = flip(&child, false);
        }
        for _ in 0..self.quarter_turns % 4 {
            child = rotate90(&child);
        }
        child = crop_resize(&child, self.crop_area, self.crop_offset);
        (contrast(parent, self.parent_contrast), contrast(&child, self.child_contrast))
    }
}

/// Applies a freshly drawn [`AugmentDraw`].
pub fn augment<T: Scalar>(sample: &PretextSample<T>, rng: &mut impl Rng) -> PretextSample<T> {
    AugmentDraw::sample(rng).apply(sample)
}

fn flip<T: Scalar>(r: &Raster<T>, horizontal: bool) -> Raster<T> {
    let (w, h) = (r.width(), r.height());
    let mut out = Raster::new(w, h, r.channels());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            out.pixel_mut(y, x).copy_from_slice(r.pixel(sy, sx));
        }
    }
    out
}

fn rotate90<T: Scalar>(r: &Raster<T>) -> Raster<T> {
    let (w, h) = (r.width(), r.height());
    let mut out = Raster::new(h, w, r.channels());
    for y in 0..w {
        for x in 0..h {
            // counter-clockwise: out(y, x) = in(x, w - 1 - y)
            out.pixel_mut(y, x).copy_from_slice(r.pixel(x, w - 1 - y));
        }
    }
    out
}

fn crop_resize<T: Scalar>(r: &Raster<T>, area: f64, offset: (f64, f64)) -> Raster<T> {
    let scale = area.clamp(0.0, 1.0).sqrt();
    let ch = ((r.height() as f64 * scale).round() as usize).clamp(1, r.height());
    let cw = ((r.width() as f64 * scale).round() as usize).clamp(1, r.width());
    if ch == r.height() && cw == r.width() {
        return r.clone();
    }
    let row = ((r.height() - ch) as f64 * offset.0.clamp(0.0, 1.0)).round() as usize;
    let col = ((r.width() - cw) as f64 * offset.1.clamp(0.0, 1.0)).round() as usize;
    r.crop(row, col, ch, cw)
        .expect("crop lies inside the raster")
        .resize_bilinear(r.width(), r.height())
}

/// Scales each channel about its mean by `factor`, clamped to [0, 1].
fn contrast<T: Scalar>(r: &Raster<T>, factor: f64) -> Raster<T> {
    if factor == 1.0 {
        return r.clone();
    }
    let means: Vec<T> = r.channel_means().into_iter().map(T::from_f64_lossy).collect();
    let f = T::from_f64_lossy(factor);
    let c = r.channels();
    let mut out = r.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = means[i % c];
        *v = (m + f * (*v - m)).max(T::zero()).min(T::one());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretext::SampleSource;
    use crate::pyramid::PatchRef;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> PretextSample<f64> {
        let mk = |k: usize| {
            let data = (0..8 * 8 * 3).map(|i| ((i * k) % 101) as f64 / 100.0).collect();
            Raster::from_vec(8, 8, 3, data).unwrap()
        };
        PretextSample {
            parent: mk(7),
            child: mk(13),
            label: 5,
            source: SampleSource {
                pyramid_id: "x".into(),
                parent: PatchRef::square(0, 0, 0, 8),
                child_index: 5,
            },
        }
    }

    #[test]
    fn identity_draw_is_noop() {
        let s = sample();
        assert_eq!(AugmentDraw::IDENTITY.apply(&s), s);
    }

    #[test]
    fn labels_and_parent_geometry_survive() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = augment(&s, &mut rng);
            assert_eq!(a.label, s.label);
            assert_eq!((a.parent.width(), a.parent.height()), (8, 8));
            assert_eq!((a.child.width(), a.child.height()), (8, 8));
            assert!(a.child.all_unit_interval() && a.parent.all_unit_interval());
        }
    }

    #[test]
    fn contrast_about_mean_keeps_mid_gray() {
        let gray = Raster::filled(6, 6, &[0.5f64, 0.5, 0.5]);
        let out = contrast(&gray, 1.25);
        assert!(out.data().iter().all(|&v| v == 0.5));
        // a two-level image stretches symmetrically about its mean
        let mut two = Raster::filled(2, 1, &[0.4f64, 0.4, 0.4]);
        two.pixel_mut(0, 1).fill(0.6);
        let out = contrast(&two, 1.25);
        assert!((out.pixel(0, 0)[0] - 0.375).abs() < 1e-12);
        assert!((out.pixel(0, 1)[0] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn four_quarter_turns_restore() {
        let s = sample();
        let mut r = s.child.clone();
        for _ in 0..4 {
            r = rotate90(&r);
        }
        assert_eq!(r, s.child);
        assert_ne!(rotate90(&s.child), s.child);
        assert_eq!(flip(&flip(&s.child, true), true), s.child);
    }
}
