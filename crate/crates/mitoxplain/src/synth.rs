//! Synthetic skeletal-muscle pseudo-image cohorts.
//!
//! Fibres are Voronoi cells of seeded random centres. The membrane channel
//! is bright on cell boundaries only; mitochondrial channels are bright in
//! fibre interiors with a boosted band just inside the membrane. Disease
//! phenotypes are planted per fibre: reduced intensity in configured
//! channels (deficiency) and an elevated subsarcolemmal band (ragged-red
//! fibres). Ground-truth masks record exactly where each phenotype went,
//! so explanation maps can be checked against known signal locations.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::{ChannelStack, ClassLabel, CANONICAL_CHANNELS, MEMBRANE_CHANNEL};
use crate::tiffio;

/// Generator parameters. All intensities are raw counts in [0, 65535].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TissueParams {
    /// Square image side in pixels.
    pub image_size: usize,
    pub fiber_count: usize,
    /// Mean fibre diameter in micrometers (1 um per pixel).
    pub mean_fiber_diameter: f64,
    /// Membrane band width in pixels.
    pub membrane_thickness: usize,
    /// Baseline counts per channel name.
    pub baseline_intensity: std::collections::BTreeMap<String, f64>,
    /// Gaussian noise sd in counts; samples are truncated at +-3 sd.
    pub noise_sd: f64,
    /// Fraction of image area removed as tissue gaps (whole fibres).
    pub hole_fraction: f64,
    /// Fraction of fibres with reduced intensity in `deficient_channels`.
    pub deficient_fiber_fraction: f64,
    /// Multiplicative intensity reduction inside deficient fibres, (0, 1].
    pub deficiency_factor: f64,
    /// Fraction of fibres with an elevated subsarcolemmal band.
    pub rrf_fraction: f64,
    /// Multiplicative boost of the subsarcolemmal band in those fibres, >= 1.
    pub rrf_gain: f64,
    /// Channels carrying the deficiency signal.
    pub deficient_channels: Vec<String>,
    /// Width of the band just inside the membrane, pixels.
    pub subsarcolemmal_band: usize,
    /// Band boost applied to every healthy fibre.
    pub subsarcolemmal_gain: f64,
}

impl Default for TissueParams {
    fn default() -> TissueParams {
        let mut baseline = std::collections::BTreeMap::new();
        for name in CANONICAL_CHANNELS {
            let counts = if name == MEMBRANE_CHANNEL { 20000.0 } else { 10000.0 };
            baseline.insert(name.to_string(), counts);
        }
        TissueParams {
            image_size: 512,
            fiber_count: 60,
            mean_fiber_diameter: 50.0,
            membrane_thickness: 2,
            baseline_intensity: baseline,
            noise_sd: 300.0,
            hole_fraction: 0.05,
            deficient_fiber_fraction: 0.5,
            deficiency_factor: 0.3,
            rrf_fraction: 0.15,
            rrf_gain: 2.5,
            deficient_channels: vec!["NDUFB8".to_string()],
            subsarcolemmal_band: 3,
            subsarcolemmal_gain: 1.2,
        }
    }
}

impl TissueParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("hole_fraction", self.hole_fraction),
            ("deficient_fiber_fraction", self.deficient_fiber_fraction),
            ("rrf_fraction", self.rrf_fraction),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidParameter(format!("{name} = {value} outside [0, 1]")));
            }
        }
        if !(self.deficiency_factor > 0.0 && self.deficiency_factor <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "deficiency_factor = {} outside (0, 1]",
                self.deficiency_factor
            )));
        }
        if self.rrf_gain < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "rrf_gain = {} below 1",
                self.rrf_gain
            )));
        }
        if self.fiber_count == 0 {
            return Err(Error::InvalidParameter("fiber_count must be >= 1".to_string()));
        }
        if self.fiber_count > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "fiber_count = {} exceeds the mask label range",
                self.fiber_count
            )));
        }
        // each fibre needs room for a disc of the mean diameter
        let per_fiber = std::f64::consts::PI * (self.mean_fiber_diameter / 2.0).powi(2);
        let area = (self.image_size * self.image_size) as f64;
        if per_fiber * self.fiber_count as f64 > area {
            return Err(Error::InvalidParameter(format!(
                "image of {}x{} px too small to host {} fibres of diameter {} um",
                self.image_size, self.image_size, self.fiber_count, self.mean_fiber_diameter
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::InvalidParameter("noise_sd must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Pixel-exact record of where the generator put signal.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// 0 = background/hole, k = fibre k.
    pub fiber_label_mask: Array2<u32>,
    pub deficient_fiber_ids: BTreeSet<u32>,
    pub rrf_fiber_ids: BTreeSet<u32>,
    pub membrane_mask: Array2<bool>,
}

impl GroundTruth {
    /// Ids of fibres that survived hole removal.
    pub fn occurring_fiber_ids(&self) -> BTreeSet<u32> {
        self.fiber_label_mask
            .iter()
            .copied()
            .filter(|&v| v != 0)
            .collect()
    }
}

/// Sidecar metadata persisted with a ground-truth mask pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthMeta {
    pub subject_id: String,
    pub class_label: ClassLabel,
    pub seed: u64,
    pub deficient_fiber_ids: Vec<u32>,
    pub rrf_fiber_ids: Vec<u32>,
    pub params: TissueParams,
}

/// Generate one subject. Deterministic in (params, class_label, seed).
pub fn generate_tissue(
    params: &TissueParams,
    class_label: ClassLabel,
    seed: u64,
) -> Result<(ChannelStack, GroundTruth)> {
    params.validate()?;
    let size = params.image_size;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // Voronoi partition of seeded centres; nearest centre wins, ties to the
    // lower fibre id.
    let centers: Vec<(f64, f64)> = (0..params.fiber_count)
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
            )
        })
        .collect();
    let mut labels = Array2::<u32>::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, &(cr, cc)) in centers.iter().enumerate() {
                let d = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            labels[(r, c)] = best as u32 + 1;
        }
    }

    // holes: remove whole fibres until the removed area reaches the target
    let mut areas = vec![0usize; params.fiber_count + 1];
    for &l in labels.iter() {
        areas[l as usize] += 1;
    }
    let mut removal_order: Vec<u32> = (1..=params.fiber_count as u32).collect();
    removal_order.shuffle(&mut rng);
    let target_hole_area = (params.hole_fraction * (size * size) as f64).round() as usize;
    let mut removed: BTreeSet<u32> = BTreeSet::new();
    let mut removed_area = 0usize;
    for id in removal_order {
        if removed_area >= target_hole_area {
            break;
        }
        removed.insert(id);
        removed_area += areas[id as usize];
    }
    if target_hole_area > 0 {
        for l in labels.iter_mut() {
            if removed.contains(l) {
                *l = 0;
            }
        }
    }

    // membrane: fibre pixels within `membrane_thickness` (Chebyshev) of a
    // different label or the image border; subsarcolemmal band sits just
    // inside it
    let near_other = |r: usize, c: usize, radius: usize| -> bool {
        let own = labels[(r, c)];
        let r0 = r.saturating_sub(radius);
        let c0 = c.saturating_sub(radius);
        let r1 = (r + radius).min(size - 1);
        let c1 = (c + radius).min(size - 1);
        if r < radius || c < radius || r + radius >= size || c + radius >= size {
            return true; // border counts as outside tissue
        }
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                if labels[(rr, cc)] != own {
                    return true;
                }
            }
        }
        false
    };
    let mut membrane = Array2::<bool>::from_elem((size, size), false);
    let mut band = Array2::<bool>::from_elem((size, size), false);
    let band_radius = params.membrane_thickness + params.subsarcolemmal_band;
    for r in 0..size {
        for c in 0..size {
            if labels[(r, c)] == 0 {
                continue;
            }
            if near_other(r, c, params.membrane_thickness) {
                membrane[(r, c)] = true;
            } else if near_other(r, c, band_radius) {
                band[(r, c)] = true;
            }
        }
    }

    // phenotype flags per surviving fibre; controls never carry any
    let surviving: Vec<u32> = (1..=params.fiber_count as u32)
        .filter(|id| !removed.contains(id))
        .collect();
    let mut deficient = BTreeSet::new();
    let mut rrf = BTreeSet::new();
    if class_label == ClassLabel::Patient {
        for &id in &surviving {
            if rng.random::<f64>() < params.deficient_fiber_fraction {
                deficient.insert(id);
            }
            if rng.random::<f64>() < params.rrf_fraction {
                rrf.insert(id);
            }
        }
    }

    // paint channels then add truncated Gaussian noise
    let noise = Normal::new(0.0, params.noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
    let mut channels: Vec<(String, Array2<u16>)> =
        Vec::with_capacity(params.baseline_intensity.len());
    for (name, &baseline) in &params.baseline_intensity {
        let is_membrane_channel = name == MEMBRANE_CHANNEL;
        let is_deficient_channel = params.deficient_channels.contains(name);
        let mut grid = Array2::<u16>::zeros((size, size));
        for r in 0..size {
            for c in 0..size {
                let label = labels[(r, c)];
                let mut value = if is_membrane_channel {
                    if membrane[(r, c)] { baseline } else { 0.0 }
                } else if label == 0 || membrane[(r, c)] {
                    0.0
                } else {
                    let mut v = baseline;
                    if is_deficient_channel && deficient.contains(&label) {
                        v *= params.deficiency_factor;
                    }
                    if band[(r, c)] {
                        v *= if rrf.contains(&label) {
                            params.rrf_gain
                        } else {
                            params.subsarcolemmal_gain
                        };
                    }
                    v
                };
                if params.noise_sd > 0.0 {
                    let n: f64 = noise.sample(&mut rng);
                    value += n.clamp(-3.0 * params.noise_sd, 3.0 * params.noise_sd);
                }
                grid[(r, c)] = value.clamp(0.0, 65535.0).round() as u16;
            }
        }
        channels.push((name.clone(), grid));
    }

    let stack = ChannelStack::new(format!("synth-{seed:08x}"), class_label, channels)?;
    Ok((
        stack,
        GroundTruth {
            fiber_label_mask: labels,
            deficient_fiber_ids: deficient,
            rrf_fiber_ids: rrf,
            membrane_mask: membrane,
        },
    ))
}

/// Generate a labelled cohort with per-subject derived seeds.
pub fn generate_cohort(
    params: &TissueParams,
    n_control: usize,
    n_patient: usize,
    seed: u64,
) -> Result<Vec<(ChannelStack, GroundTruth)>> {
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut cohort = Vec::with_capacity(n_control + n_patient);
    for i in 0..n_control {
        let subject_seed: u64 = master.random();
        let (mut stack, truth) = generate_tissue(params, ClassLabel::Control, subject_seed)?;
        stack.subject_id = format!("control{i:02}");
        cohort.push((stack, truth));
    }
    for i in 0..n_patient {
        let subject_seed: u64 = master.random();
        let (mut stack, truth) = generate_tissue(params, ClassLabel::Patient, subject_seed)?;
        stack.subject_id = format!("patient{i:02}");
        cohort.push((stack, truth));
    }
    Ok(cohort)
}

/// Persist a subject's ground truth: a 2-page mask TIFF plus TOML metadata.
pub fn write_ground_truth(
    truth: &GroundTruth,
    meta: &GroundTruthMeta,
    mask_path: &Path,
    meta_path: &Path,
) -> Result<()> {
    let labels_u16 = truth.fiber_label_mask.mapv(|v| v as u16);
    tiffio::write_masks(&labels_u16, &truth.membrane_mask, mask_path)?;
    let text = toml::to_string_pretty(meta)
        .map_err(|e| Error::Config(format!("ground truth meta: {e}")))?;
    fs::write(meta_path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_params() -> TissueParams {
        TissueParams {
            image_size: 128,
            fiber_count: 12,
            mean_fiber_diameter: 20.0,
            noise_sd: 0.0,
            hole_fraction: 0.0,
            ..TissueParams::default()
        }
    }

    #[test]
    fn membrane_channel_is_nonzero_exactly_on_the_mask() {
        let (stack, truth) = generate_tissue(&quiet_params(), ClassLabel::Control, 5).unwrap();
        let membrane = stack.channel(MEMBRANE_CHANNEL).unwrap();
        for r in 0..128 {
            for c in 0..128 {
                let on = membrane[(r, c)] > 0;
                assert_eq!(on, truth.membrane_mask[(r, c)], "at ({r},{c})");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let params = TissueParams {
            image_size: 96,
            fiber_count: 10,
            mean_fiber_diameter: 20.0,
            ..TissueParams::default()
        };
        let (a, ta) = generate_tissue(&params, ClassLabel::Patient, 77).unwrap();
        let (b, tb) = generate_tissue(&params, ClassLabel::Patient, 77).unwrap();
        for (name, grid) in a.channels() {
            assert_eq!(b.channel(name).unwrap(), grid);
        }
        assert_eq!(ta.fiber_label_mask, tb.fiber_label_mask);
        assert_eq!(ta.deficient_fiber_ids, tb.deficient_fiber_ids);
    }

    #[test]
    fn deficient_fibres_carry_the_configured_reduction() {
        let params = TissueParams {
            image_size: 256,
            fiber_count: 30,
            mean_fiber_diameter: 20.0,
            noise_sd: 50.0,
            hole_fraction: 0.0,
            deficient_fiber_fraction: 0.5,
            deficiency_factor: 0.3,
            rrf_fraction: 0.0,
            ..TissueParams::default()
        };
        let (stack, truth) = generate_tissue(&params, ClassLabel::Patient, 41).unwrap();
        assert!(!truth.deficient_fiber_ids.is_empty());
        let channel = stack.channel("NDUFB8").unwrap();

        // independent mean computation from the ground-truth masks,
        // interior pixels only (membrane pixels carry no mito signal)
        let mut sum_def = 0.0;
        let mut n_def = 0usize;
        let mut sum_healthy = 0.0;
        let mut n_healthy = 0usize;
        for r in 0..256 {
            for c in 0..256 {
                let label = truth.fiber_label_mask[(r, c)];
                if label == 0 || truth.membrane_mask[(r, c)] {
                    continue;
                }
                if truth.deficient_fiber_ids.contains(&label) {
                    sum_def += f64::from(channel[(r, c)]);
                    n_def += 1;
                } else {
                    sum_healthy += f64::from(channel[(r, c)]);
                    n_healthy += 1;
                }
            }
        }
        let ratio = (sum_def / n_def as f64) / (sum_healthy / n_healthy as f64);
        assert!((ratio - 0.3).abs() < 0.05, "observed ratio {ratio}");
    }

    #[test]
    fn cohort_counts_and_labels() {
        let params = TissueParams {
            image_size: 64,
            fiber_count: 6,
            mean_fiber_diameter: 16.0,
            ..TissueParams::default()
        };
        let cohort = generate_cohort(&params, 4, 10, 99).unwrap();
        assert_eq!(cohort.len(), 14);
        let controls = cohort
            .iter()
            .filter(|(s, _)| s.class_label == ClassLabel::Control)
            .count();
        assert_eq!(controls, 4);
        // unique subject ids
        let ids: BTreeSet<String> = cohort.iter().map(|(s, _)| s.subject_id.clone()).collect();
        assert_eq!(ids.len(), 14);

        assert!(generate_cohort(&params, 0, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn holes_carry_no_signal_beyond_noise() {
        let params = TissueParams {
            image_size: 128,
            fiber_count: 12,
            mean_fiber_diameter: 20.0,
            noise_sd: 200.0,
            hole_fraction: 0.2,
            ..TissueParams::default()
        };
        let (stack, truth) = generate_tissue(&params, ClassLabel::Patient, 13).unwrap();
        let limit = 3.0 * params.noise_sd;
        let mut background_pixels = 0usize;
        for (_, grid) in stack.channels() {
            for r in 0..128 {
                for c in 0..128 {
                    if truth.fiber_label_mask[(r, c)] == 0 {
                        background_pixels += 1;
                        assert!(
                            f64::from(grid[(r, c)]) <= limit,
                            "background pixel ({r},{c}) = {}",
                            grid[(r, c)]
                        );
                    }
                }
            }
        }
        assert!(background_pixels > 0, "hole_fraction 0.2 produced no holes");
    }

    #[test]
    fn controls_never_carry_phenotypes() {
        let params = TissueParams {
            image_size: 96,
            fiber_count: 10,
            mean_fiber_diameter: 20.0,
            deficient_fiber_fraction: 1.0,
            rrf_fraction: 1.0,
            ..TissueParams::default()
        };
        let (_, truth) = generate_tissue(&params, ClassLabel::Control, 3).unwrap();
        assert!(truth.deficient_fiber_ids.is_empty());
        assert!(truth.rrf_fiber_ids.is_empty());
    }

    #[test]
    fn deficient_fraction_tracks_the_parameter() {
        // binomial check over several seeds: fraction within 3 binomial sds
        let params = TissueParams {
            image_size: 256,
            fiber_count: 80,
            mean_fiber_diameter: 20.0,
            hole_fraction: 0.0,
            deficient_fiber_fraction: 0.4,
            ..TissueParams::default()
        };
        let mut total = 0usize;
        let mut flagged = 0usize;
        for seed in 0..6 {
            let (_, truth) = generate_tissue(&params, ClassLabel::Patient, seed).unwrap();
            total += truth.occurring_fiber_ids().len();
            flagged += truth.deficient_fiber_ids.len();
        }
        let p = 0.4;
        let sd = (p * (1.0 - p) / total as f64).sqrt();
        let observed = flagged as f64 / total as f64;
        assert!(
            (observed - p).abs() <= 3.0 * sd,
            "observed {observed}, expected {p} +- {}",
            3.0 * sd
        );
    }

    #[test]
    fn no_signal_cohorts_are_statistically_indistinguishable() {
        use statrs::distribution::{ContinuousCDF, StudentsT};

        // with every phenotype disabled, patient and control stacks are
        // draws from one distribution: a two-sample test on per-subject
        // mean intensity must not separate the classes
        let params = TissueParams {
            image_size: 96,
            fiber_count: 10,
            mean_fiber_diameter: 20.0,
            deficient_fiber_fraction: 0.0,
            rrf_fraction: 0.0,
            ..TissueParams::default()
        };
        let mut control_means = Vec::new();
        let mut patient_means = Vec::new();
        for seed in 0..8 {
            for (stack, _) in generate_cohort(&params, 2, 2, seed).unwrap() {
                let channel = stack.channel("NDUFB8").unwrap();
                let mean =
                    channel.iter().map(|&v| f64::from(v)).sum::<f64>() / channel.len() as f64;
                match stack.class_label {
                    ClassLabel::Control => control_means.push(mean),
                    ClassLabel::Patient => patient_means.push(mean),
                }
            }
        }

        // independent statistics routine: Welch's two-sample t-test
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var, n)
        };
        let (m1, v1, n1) = stats(&control_means);
        let (m2, v2, n2) = stats(&patient_means);
        let se = (v1 / n1 + v2 / n2).sqrt();
        let t = (m1 - m2) / se;
        let df = (v1 / n1 + v2 / n2).powi(2)
            / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        assert!(p > 0.01, "classes separated without planted signal: t={t:.3}, p={p:.4}");
    }

    #[test]
    fn image_too_small_for_fibres_is_a_parameter_error() {
        let params = TissueParams {
            image_size: 32,
            fiber_count: 100,
            mean_fiber_diameter: 30.0,
            ..TissueParams::default()
        };
        assert!(matches!(
            generate_tissue(&params, ClassLabel::Control, 0),
            Err(Error::InvalidParameter(_))
        ));
    }
}
