//! How many synthetic images of each class to generate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Adjective, ClassLabel};

pub const RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub ratio: f64,
    /// Synthetic images per class, in [`ClassLabel::ALL`] order.
    pub counts: [usize; 3],
    pub adjective: String,
    pub seed: u64,
}

/// Splits `total` seats over `weights` by largest remainder; equal
/// remainders go to the lower index.
pub fn apportion(total: usize, weights: &[usize]) -> Result<Vec<usize>> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return Err(Error::invalid("apportionment weights sum to zero"));
    }
    let (total128, sum128) = (total as u128, sum as u128);
    let mut seats: Vec<usize> = weights.iter().map(|&w| (total128 * w as u128 / sum128) as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(total128 * weights[i] as u128 % sum128), i));
    let left = total - seats.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        seats[i] += 1;
    }
    Ok(seats)
}

impl MixPlan {
    /// `floor(ratio·train_size)` images split in proportion to
    /// `class_counts`, or evenly over classes present when `balanced`.
    pub fn new(
        ratio: f64,
        train_size: usize,
        class_counts: [usize; 3],
        adjective: Adjective,
        seed: u64,
        balanced: bool,
    ) -> Result<Self> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::invalid(format!("mix ratio {ratio} must be positive")));
        }
        let total = (ratio * train_size as f64).floor() as usize;
        let weights = if balanced { class_counts.map(|c| usize::from(c > 0)) } else { class_counts };
        let seats = apportion(total, &weights)?;
        Ok(Self { ratio, counts: [seats[0], seats[1], seats[2]], adjective: adjective.as_str().to_owned(), seed })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn adjective(&self) -> Result<Adjective> {
        Adjective::parse(&self.adjective)
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.counts[label.index()]
    }
}
