//! Deterministic train/validation/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checksum::sha256_hex;
use crate::error::{Error, Result};
use crate::patch::Patch;

/// Index-based partition of a patch list.
///
/// The three lists hold indices into the patch slice passed to
/// [`split_dataset`]; they are pairwise disjoint and jointly exhaustive.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub grouped_by_subject: bool,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    /// Stable fingerprint over membership, seed and ratios.
    pub fn fingerprint(&self, patches: &[Patch]) -> String {
        let mut text = format!(
            "seed={};ratios={:?};grouped={}",
            self.seed, self.ratios, self.grouped_by_subject
        );
        for (name, part) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            text.push_str(&format!(";{name}:"));
            for &i in part {
                let p = &patches[i];
                text.push_str(&format!("{}@{},{}|", p.source_subject, p.origin.0, p.origin.1));
            }
        }
        sha256_hex(text.as_bytes())
    }
}

/// Split patches into train/validation/test.
///
/// Counts follow floor-then-remainder-to-train: validation and test get
/// `floor(n * ratio)` items each, train gets the rest. With
/// `group_by_subject` the policy applies to subject groups instead and every
/// patch follows its subject.
pub fn split_dataset(
    patches: &[Patch],
    ratios: [f64; 3],
    seed: u64,
    group_by_subject: bool,
) -> Result<DatasetSplit> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadSplitRatios(ratios));
    }
    if patches.len() < 3 {
        return Err(Error::TooFewPatches { have: patches.len() });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (train, validation, test) = if group_by_subject {
        // distinct subjects in order of first appearance
        let mut subjects: Vec<&str> = Vec::new();
        for p in patches {
            if !subjects.contains(&p.source_subject.as_str()) {
                subjects.push(&p.source_subject);
            }
        }
        if subjects.len() < 3 {
            return Err(Error::TooFewGroups { have: subjects.len() });
        }
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.shuffle(&mut rng);
        let n = subjects.len();
        let n_val = (n as f64 * ratios[1]).floor() as usize;
        let n_test = (n as f64 * ratios[2]).floor() as usize;
        let val_subjects: Vec<&str> = order[..n_val].iter().map(|&i| subjects[i]).collect();
        let test_subjects: Vec<&str> =
            order[n_val..n_val + n_test].iter().map(|&i| subjects[i]).collect();
        let mut train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        for (i, p) in patches.iter().enumerate() {
            if val_subjects.contains(&p.source_subject.as_str()) {
                validation.push(i);
            } else if test_subjects.contains(&p.source_subject.as_str()) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, validation, test)
    } else {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng);
        let n = patches.len();
        let n_val = (n as f64 * ratios[1]).floor() as usize;
        let n_test = (n as f64 * ratios[2]).floor() as usize;
        let validation = order[..n_val].to_vec();
        let test = order[n_val..n_val + n_test].to_vec();
        let train = order[n_val + n_test..].to_vec();
        (train, validation, test)
    };
    Ok(DatasetSplit {
        train,
        validation,
        test,
        ratios,
        seed,
        grouped_by_subject: group_by_subject,
    })
}
