use rand::seq::SliceRandom;

use super::{DataError, SampleSet, CLASS_COUNT};
use crate::rng::child_rng;

/// Integer `train:test` proportion, e.g. `4:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub test: u32,
}

impl SplitRatio {
    pub const FOUR_TO_ONE: SplitRatio = SplitRatio { train: 4, test: 1 };

    pub fn new(train: u32, test: u32) -> Result<Self, DataError> {
        if train + test == 0 {
            return Err(DataError::InvalidArgument("split ratio 0:0".into()));
        }
        Ok(Self { train, test })
    }
}

/// Largest-remainder apportionment of `n` items into `(train, test)`.
/// Ties in the fractional part go to the train side.
pub fn split_counts(n: usize, ratio: SplitRatio) -> (usize, usize) {
    let total = (ratio.train + ratio.test) as u64;
    let n64 = n as u64;
    let train_num = n64 * ratio.train as u64;
    let test_num = n64 * ratio.test as u64;
    let (mut train, mut test) = (train_num / total, test_num / total);
    let leftover = n64 - train - test;
    if leftover > 0 {
        // at most one unit is left over with two parts
        if train_num % total >= test_num % total {
            train += leftover;
        } else {
            test += leftover;
        }
    }
    (train as usize, test as usize)
}

/// Stratified split: every class is apportioned separately and the chosen test
/// members come from a seeded shuffle. Both outputs keep the input order.
pub fn split_dataset(set: &SampleSet, ratio: SplitRatio, seed: u64) -> Result<(SampleSet, SampleSet), DataError> {
    SplitRatio::new(ratio.train, ratio.test)?;
    let mut is_test = vec![false; set.len()];
    for class in 0..CLASS_COUNT {
        let mut members: Vec<usize> = set
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.annotation.class.index() == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() && ratio.test > 0 {
            return Err(DataError::InvalidArgument(format!(
                "class {class} has no samples but the ratio requests a test share"
            )));
        }
        let (_, n_test) = split_counts(members.len(), ratio);
        members.shuffle(&mut child_rng(seed, 0x5B11, class as u64));
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in set.samples.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((SampleSet::new(train, set.seed), SampleSet::new(test, set.seed)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Annotation, BBox, DefectClass, GrayImage, Sample};
    use proptest::prelude::*;

    fn tiny_set(per_class: &[usize]) -> SampleSet {
        let mut samples = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: GrayImage::filled(2, 2, i as u8),
                    annotation: Annotation {
                        class: DefectClass::from_id(c as u8).unwrap(),
                        bbox: BBox { xmin: 0, ymin: 0, xmax: 1, ymax: 1 },
                        image_width: 2,
                        image_height: 2,
                    },
                });
            }
        }
        SampleSet::new(samples, 0)
    }

    #[test]
    fn four_to_one_on_hundred() {
        let (train, test) = split_dataset(&tiny_set(&[100; 4]), SplitRatio::FOUR_TO_ONE, 1).unwrap();
        assert_eq!(train.class_counts, [80; 4]);
        assert_eq!(test.class_counts, [20; 4]);
    }

    #[test]
    fn largest_remainder_seven() {
        assert_eq!(split_counts(7, SplitRatio::FOUR_TO_ONE), (6, 1));
        let (train, test) = split_dataset(&tiny_set(&[7, 5, 5, 5]), SplitRatio::FOUR_TO_ONE, 3).unwrap();
        assert_eq!(train.class_counts, [6, 4, 4, 4]);
        assert_eq!(test.class_counts, [1, 1, 1, 1]);
    }

    #[test]
    fn degenerate_ratio_keeps_everything() {
        let set = tiny_set(&[3, 3, 3, 3]);
        let (train, test) = split_dataset(&set, SplitRatio::new(1, 0).unwrap(), 5).unwrap();
        assert!(test.is_empty());
        assert_eq!(train, set);
    }

    #[test]
    fn empty_class_with_test_share_fails() {
        assert!(split_dataset(&tiny_set(&[5, 5, 0, 5]), SplitRatio::FOUR_TO_ONE, 0).is_err());
        assert!(split_dataset(&tiny_set(&[5, 5, 0, 5]), SplitRatio::new(1, 0).unwrap(), 0).is_ok());
    }

    #[test]
    fn deterministic_in_seed() {
        let set = crate::datagen::generate_set(40, 2, &Default::default(), false).unwrap();
        let a = split_dataset(&set, SplitRatio::FOUR_TO_ONE, 11).unwrap();
        let b = split_dataset(&set, SplitRatio::FOUR_TO_ONE, 11).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn apportionment_is_exact(n in 0usize..10_000, a in 0u32..10, b in 0u32..10) {
            prop_assume!(a + b > 0);
            let r = SplitRatio::new(a, b).unwrap();
            let (tr, te) = split_counts(n, r);
            prop_assert_eq!(tr + te, n);
            // each part within one unit of its exact quota
            let q = n as f64 * a as f64 / (a + b) as f64;
            prop_assert!((tr as f64 - q).abs() < 1.0);
        }
    }
}
