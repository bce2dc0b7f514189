//! Two-view augmentation: a random fixed-length crop followed by
//! SpecAugment-style frequency and time masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataspec::{Spectrogram, SpectrogramClip};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub segment_len: usize,
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    #[serde(default)]
    pub mask_value: f32,
}

impl AugmentConfig {
    /// Two frequency masks of width up to `ceil(F/8)`, two time masks of width
    /// up to `ceil(L/8)`, masked entries set to zero.
    pub fn defaults_for(freq_bins: usize, segment_len: usize) -> Self {
        AugmentConfig {
            segment_len,
            num_freq_masks: 2,
            max_freq_width: freq_bins.div_ceil(8),
            num_time_masks: 2,
            max_time_width: segment_len.div_ceil(8),
            mask_value: 0.0,
        }
    }

    /// No masking, only cropping.
    pub fn crop_only(segment_len: usize) -> Self {
        AugmentConfig {
            segment_len,
            num_freq_masks: 0,
            max_freq_width: 0,
            num_time_masks: 0,
            max_time_width: 0,
            mask_value: 0.0,
        }
    }

    pub fn validate(&self, freq_bins: usize) -> Result<()> {
        if self.segment_len < 1 {
            return Err(Error::Config("augment.segment_len must be >= 1".into()));
        }
        if self.max_freq_width > freq_bins {
            return Err(Error::Config(format!(
                "augment.max_freq_width {} exceeds {freq_bins} frequency bins",
                self.max_freq_width
            )));
        }
        if self.max_time_width > self.segment_len {
            return Err(Error::Config(format!(
                "augment.max_time_width {} exceeds segment length {}",
                self.max_time_width, self.segment_len
            )));
        }
        if !self.mask_value.is_finite() {
            return Err(Error::Config("augment.mask_value must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: Spectrogram,
    pub view_b: Spectrogram,
    pub source_clip_id: String,
}

/// Copies `len` frames starting at `offset`, wrapping around the end of the clip.
pub fn segment_at(features: &Spectrogram, offset: usize, len: usize) -> Spectrogram {
    let frames = features.frames();
    let mut out = Spectrogram::filled(features.bins(), len, 0.0);
    for f in 0..features.bins() {
        let src = features.row(f);
        let dst = out.row_mut(f);
        if offset + len <= frames {
            dst.copy_from_slice(&src[offset..offset + len]);
        } else {
            for (n, d) in dst.iter_mut().enumerate() {
                *d = src[(offset + n) % frames];
            }
        }
    }
    out
}

/// A window of `len` frames at a uniform offset in `[0, N - len]`. Clips
/// shorter than `len` are tiled along time starting at offset 0.
pub fn random_segment(features: &Spectrogram, len: usize, rng: &mut impl Rng) -> Result<Spectrogram> {
    if len < 1 {
        return Err(Error::Config("segment length must be >= 1".into()));
    }
    let frames = features.frames();
    let offset = if frames >= len {
        rng.random_range(0..=frames - len)
    } else {
        0
    };
    Ok(segment_at(features, offset, len))
}

/// The deterministic window used at evaluation time.
pub fn center_segment(features: &Spectrogram, len: usize) -> Spectrogram {
    let frames = features.frames();
    let offset = if frames >= len { (frames - len) / 2 } else { 0 };
    segment_at(features, offset, len)
}

/// A mask band: `start..start + width` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub freq: Vec<Band>,
    pub time: Vec<Band>,
}

fn draw_band(rng: &mut impl Rng, max_width: usize, axis: usize) -> Band {
    let width = rng.random_range(0..=max_width.min(axis));
    let start = rng.random_range(0..=axis - width);
    Band { start, width }
}

/// Draws mask positions. Widths are uniform on `[0, max]`, zero included.
pub fn sample_masks(cfg: &AugmentConfig, bins: usize, frames: usize, rng: &mut impl Rng) -> MaskPlan {
    MaskPlan {
        freq: (0..cfg.num_freq_masks)
            .map(|_| draw_band(rng, cfg.max_freq_width, bins))
            .collect(),
        time: (0..cfg.num_time_masks)
            .map(|_| draw_band(rng, cfg.max_time_width, frames))
            .collect(),
    }
}

pub fn apply_masks(segment: &mut Spectrogram, plan: &MaskPlan, value: f32) {
    for band in &plan.freq {
        for f in band.start..band.start + band.width {
            segment.row_mut(f).fill(value);
        }
    }
    for band in &plan.time {
        for f in 0..segment.bins() {
            segment.row_mut(f)[band.start..band.start + band.width].fill(value);
        }
    }
}

pub fn spec_augment(segment: &Spectrogram, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Spectrogram> {
    cfg.validate(segment.bins())?;
    let plan = sample_masks(cfg, segment.bins(), segment.frames(), rng);
    let mut out = segment.clone();
    apply_masks(&mut out, &plan, cfg.mask_value);
    Ok(out)
}

/// Crop then mask.
pub fn augment_view(features: &Spectrogram, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Spectrogram> {
    let seg = random_segment(features, cfg.segment_len, rng)?;
    spec_augment(&seg, cfg, rng)
}

/// Two independent augmentations of the same clip, drawn in order a then b.
pub fn make_view_pair(clip: &SpectrogramClip, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    Ok(ViewPair {
        view_a: augment_view(&clip.features, cfg, rng)?,
        view_b: augment_view(&clip.features, cfg, rng)?,
        source_clip_id: clip.clip_id.clone(),
    })
}
