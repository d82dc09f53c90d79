use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{whiteness, PatchRef, PyramidImage, Raster, WhiteRule};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Level difference between parent and child; fixes the label space to `4^n`.
    pub n: usize,
    /// Side of parent and child windows in source pixels.
    pub patch_size: usize,
    /// Side both windows are resized to.
    pub input_size: usize,
    /// Probabilities for the child level, highest-resolution level first.
    pub level_probs: Vec<f64>,
    pub white_rule: WhiteRule,
    /// Samples whose parent or child whiteness exceeds this are redrawn.
    pub white_reject: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n: 2,
            patch_size: 64,
            input_size: 32,
            level_probs: vec![0.4, 0.4, 0.2],
            white_rule: WhiteRule::default(),
            white_reject: 0.5,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn num_locations(&self) -> usize {
        1 << (2 * self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("zoom difference n must be >= 1".into()));
        }
        if self.patch_size == 0 || self.input_size == 0 {
            return Err(Error::Config("patch and input sizes must be positive".into()));
        }
        if self.level_probs.is_empty() || self.level_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config("level_probs must be probabilities".into()));
        }
        let sum: f64 = self.level_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("level_probs sum to {sum}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.white_reject) {
            return Err(Error::Config("white_reject must be in [0, 1]".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("max_retries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Child levels reachable in `img` with their renormalised probabilities.
///
/// `level_probs[i]` applies to level `N - i`; levels whose parent level
/// `x - n` does not exist or is smaller than a patch are dropped.
pub fn level_distribution<T: Scalar>(img: &PyramidImage<T>, cfg: &SamplerConfig) -> Result<Vec<(usize, f64)>> {
    let top = img.top_level();
    let mut out = Vec::new();
    for (i, &p) in cfg.level_probs.iter().enumerate() {
        if i > top || p == 0.0 {
            continue;
        }
        let x = top - i;
        if x < cfg.n {
            continue;
        }
        let parent = img.level(x - cfg.n)?;
        if parent.width() >= cfg.patch_size && parent.height() >= cfg.patch_size {
            out.push((x, p));
        }
    }
    let total: f64 = out.iter().map(|(_, p)| p).sum();
    if out.is_empty() || total <= 0.0 {
        return Err(Error::Config(format!(
            "no child level can host n={} with {}px patches in a {}-level pyramid",
            cfg.n,
            cfg.patch_size,
            img.num_levels()
        )));
    }
    Ok(out.into_iter().map(|(x, p)| (x, p / total)).collect())
}

/// Provenance of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSource {
    pub pyramid_id: String,
    pub parent: PatchRef,
    pub child_index: usize,
}

/// Parent, child and label at input resolution, pixels on the 8-bit grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextSample<T> {
    pub parent: Raster<T>,
    pub child: Raster<T>,
    pub label: u32,
    pub source: SampleSource,
}

/// The same draw before resizing.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDraw<T> {
    pub parent: Raster<T>,
    pub child: Raster<T>,
    pub child_ref: PatchRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample<T> {
    pub parent: Raster<T>,
    pub child: Raster<T>,
    /// 1 when the child lies inside the parent.
    pub label: u8,
}

fn pick_level(dist: &[(usize, f64)], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(x, p) in dist {
        acc += p;
        if u < acc {
            return x;
        }
    }
    dist.last().expect("non-empty").0
}

fn to_input<T: Scalar>(r: &Raster<T>, size: usize) -> Raster<T> {
    r.resize_bilinear(size, size).quantized()
}

/// Draws one location sample and also returns the un-resized windows.
pub fn sample_location_with_source<T: Scalar>(
    img: &PyramidImage<T>,
    pyramid_id: &str,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(PretextSample<T>, SourceDraw<T>)> {
    let dist = level_distribution(img, cfg)?;
    let p = cfg.patch_size;
    for _ in 0..cfg.max_retries {
        let x = pick_level(&dist, rng);
        let y = x - cfg.n;
        let lvl = img.level(y)?;
        let row = rng.gen_range(0..=lvl.height() - p);
        let col = rng.gen_range(0..=lvl.width() - p);
        let parent_ref = PatchRef::square(y, row, col, p);
        let index = rng.gen_range(0..cfg.num_locations());
        let child_ref = parent_ref.children_set(cfg.n, img.top_level())?[index];

        let parent_src = img.extract(&parent_ref)?;
        let parent = to_input(&parent_src, cfg.input_size);
        if whiteness(&parent, &cfg.white_rule) > cfg.white_reject {
            continue;
        }
        let child_src = img.extract(&child_ref)?;
        let child = to_input(&child_src, cfg.input_size);
        if whiteness(&child, &cfg.white_rule) > cfg.white_reject {
            continue;
        }
        let sample = PretextSample {
            parent,
            child,
            label: index as u32,
            source: SampleSource {
                pyramid_id: pyramid_id.to_string(),
                parent: parent_ref,
                child_index: index,
            },
        };
        let draw = SourceDraw {
            parent: parent_src,
            child: child_src,
            child_ref,
        };
        return Ok((sample, draw));
    }
    Err(Error::ExhaustedRetries(cfg.max_retries))
}

/// Draws a child level, a tissue parent window and a child cell; the
/// label is the cell's row-major index.
pub fn sample_location<T: Scalar>(
    img: &PyramidImage<T>,
    pyramid_id: &str,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<PretextSample<T>> {
    sample_location_with_source(img, pyramid_id, cfg, rng).map(|(s, _)| s)
}

/// Two independent location draws; with probability 0.5 their children are
/// exchanged and both become negatives, otherwise both are positives.
pub fn sample_pair<T: Scalar>(
    img: &PyramidImage<T>,
    pyramid_id: &str,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(PairSample<T>, PairSample<T>)> {
    let a = sample_location(img, pyramid_id, cfg, rng)?;
    let b = sample_location(img, pyramid_id, cfg, rng)?;
    let swap = rng.gen_bool(0.5);
    Ok(if swap {
        (
            PairSample {
                parent: a.parent,
                child: b.child,
                label: 0,
            },
            PairSample {
                parent: b.parent,
                child: a.child,
                label: 0,
            },
        )
    } else {
        (
            PairSample {
                parent: a.parent,
                child: a.child,
                label: 1,
            },
            PairSample {
                parent: b.parent,
                child: b.child,
                label: 1,
            },
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pyramid, SynthCohort, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_pyramid(levels: usize, base: usize) -> PyramidImage<f64> {
        let cfg = SynthConfig {
            levels,
            base_size: base,
            ..SynthConfig::default()
        };
        let cohort = SynthCohort::plan(&cfg).unwrap();
        generate_pyramid(cohort.patients[0].slides[0].spec.as_ref().unwrap()).unwrap()
    }

    fn cfg(n: usize, patch: usize) -> SamplerConfig {
        SamplerConfig {
            n,
            patch_size: patch,
            input_size: 8,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn n2_labels_in_range() {
        let img = small_pyramid(4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = sample_location(&img, "p", &cfg(2, 8), &mut rng).unwrap();
            assert!(s.label < 16);
            assert_eq!(s.parent.width(), 8);
            assert_eq!(s.child.height(), 8);
        }
    }

    #[test]
    fn label_is_row_major_index_of_child() {
        let img = small_pyramid(4, 16);
        let c = cfg(1, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (s, d) = sample_location_with_source(&img, "p", &c, &mut rng).unwrap();
            assert_eq!(
                s.source.parent.child_index(&d.child_ref, 1),
                Some(s.label as usize)
            );
            let (i, j) = (s.label / 2, s.label % 2);
            assert_eq!(d.child_ref.row, s.source.parent.row * 2 + i as usize * 8);
            assert_eq!(d.child_ref.col, s.source.parent.col * 2 + j as usize * 8);
        }
    }

    #[test]
    fn child_pools_to_parent_block() {
        let img = small_pyramid(4, 16);
        let c = cfg(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (s, d) = sample_location_with_source(&img, "p", &c, &mut rng).unwrap();
            let pooled = d.child.avg_pool(4);
            let (i, j) = ((s.label / 4) as usize, (s.label % 4) as usize);
            let block = d.parent.crop(i * 2, j * 2, 2, 2).unwrap();
            for (a, b) in pooled.data().iter().zip(block.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_distribution_drops_unreachable_levels() {
        let img = small_pyramid(4, 16);
        // n=2 on levels {3,2,1}: level 1 has no parent level
        let d = level_distribution(&img, &cfg(2, 8)).unwrap();
        assert_eq!(d, vec![(3, 0.5), (2, 0.5)]);
        let d = level_distribution(&img, &cfg(1, 8)).unwrap();
        assert_eq!(d, vec![(3, 0.4), (2, 0.4), (1, 0.2)]);
        assert!(level_distribution(&img, &cfg(4, 8)).is_err());
    }

    #[test]
    fn all_white_pyramid_exhausts_retries() {
        let top = Raster::filled(32, 32, &[1.0f64, 1.0, 1.0]);
        let img = PyramidImage::from_top(top, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_location(&img, "w", &cfg(1, 4), &mut rng),
            Err(Error::ExhaustedRetries(100))
        ));
    }

    #[test]
    fn pair_labels_follow_swap() {
        let img = small_pyramid(4, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut pos, mut neg) = (0, 0);
        for _ in 0..200 {
            let (a, b) = sample_pair(&img, "p", &cfg(2, 8), &mut rng).unwrap();
            assert_eq!(a.label, b.label);
            if a.label == 1 {
                pos += 1
            } else {
                neg += 1
            }
        }
        assert!(pos > 0 && neg > 0);
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        c.level_probs = vec![0.5, 0.4];
        assert!(c.validate().is_err());
    }
}
