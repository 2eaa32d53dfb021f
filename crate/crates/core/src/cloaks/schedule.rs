//! Budget schedules, per-family κ tables and the κ grid search.

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::image::ImageTensor;
use crate::models::FamilyTag;
use crate::{Error, Result};

pub const LEVELS: usize = 10;

/// Ten increasing L∞ budgets per model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub family: FamilyTag,
    pub epsilons: Vec<f64>,
}

impl BudgetSchedule {
    pub fn for_family(family: FamilyTag) -> Result<Self> {
        let epsilons = (0..LEVELS).map(|l| budget_for(family, l)).collect::<Result<_>>()?;
        Ok(Self { family, epsilons })
    }
}

/// ε at `level` (0..=9): uniform over [0.01, 0.07] for DCGAN/WGAN-like
/// families and over [0.01, 0.1] for StyleGAN-like ones.
pub fn budget_for(family: FamilyTag, level: usize) -> Result<f64> {
    if level >= LEVELS {
        return Err(Error::InvalidArgument(format!("budget level {level} outside 0..=9")));
    }
    let l = level as f64;
    match family {
        FamilyTag::DcganLike | FamilyTag::WganLike => Ok(0.01 + l * 0.06 / 9.0),
        FamilyTag::StyleganLike => Ok(0.01 + l * 0.01),
        FamilyTag::Toy => Err(Error::InvalidArgument("no budget schedule for the toy family".into())),
    }
}

const DCGAN: [[f64; LEVELS]; 3] = [
    [0.7, 0.0, 0.3, 0.2, 0.2, 0.3, 0.4, 0.2, 0.6, 0.6],
    [0.1, 0.5, 0.0, 0.8, 0.3, 0.2, 0.8, 0.6, 0.3, 0.2],
    [0.2, 0.8, 0.9, 0.7, 0.9, 0.0, 0.8, 0.7, 0.1, 0.3],
];
const WGAN: [[f64; LEVELS]; 3] = [
    [0.0, 0.7, 0.4, 0.6, 0.8, 0.5, 0.2, 0.2, 0.0, 0.5],
    [0.4, 0.1, 0.1, 0.7, 0.3, 0.1, 0.0, 0.1, 0.5, 0.9],
    [0.1, 0.9, 0.7, 0.3, 0.1, 0.3, 0.6, 0.0, 0.0, 0.0],
];
const STYLEGAN: [[f64; LEVELS]; 3] = [
    [1.0, 0.4, 0.6, 0.0, 0.3, 0.7, 0.2, 1.0, 1.0, 1.0],
    [0.4, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    [1.0, 0.1, 1.0, 0.3, 0.6, 1.0, 0.7, 0.8, 0.9, 0.9],
];

/// Published κ for (family, scenario, level). `None` for scenarios without
/// a latent term (v1, v4) and families without a table.
pub fn table_kappa(family: FamilyTag, scenario: Scenario, level: usize) -> Option<f64> {
    let row = match scenario {
        Scenario::V0 => 0,
        Scenario::V2 => 1,
        Scenario::V3 => 2,
        Scenario::V1 | Scenario::V4 => return None,
    };
    let table = match family {
        FamilyTag::DcganLike => &DCGAN,
        FamilyTag::WganLike => &WGAN,
        FamilyTag::StyleganLike => &STYLEGAN,
        FamilyTag::Toy => return None,
    };
    table[row].get(level).copied()
}

/// `0, 0.1, ..., 1`.
pub fn default_kappa_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSearch {
    pub kappa: f64,
    /// `(κ, mean matching rate)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the κ whose cloaks minimize `eval_fn`; ties go to the smaller κ.
pub fn grid_search_kappa<C, E>(x_set: &[ImageTensor], grid: &[f64], mut cloak_fn: C, mut eval_fn: E) -> Result<KappaSearch>
where
    C: FnMut(&[ImageTensor], f64) -> Result<Vec<ImageTensor>>,
    E: FnMut(&[ImageTensor], &[ImageTensor]) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty κ grid".into()));
    }
    if let Some(bad) = grid.iter().find(|k| !(0.0..=1.0).contains(*k)) {
        return Err(Error::InvalidArgument(format!("κ {bad} outside [0, 1]")));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best = (f64::INFINITY, f64::INFINITY);
    for &kappa in grid {
        let cloaked = cloak_fn(x_set, kappa)?;
        let rate = eval_fn(x_set, &cloaked)?;
        scores.push((kappa, rate));
        if rate < best.1 || (rate == best.1 && kappa < best.0) {
            best = (kappa, rate);
        }
    }
    Ok(KappaSearch { kappa: best.0, scores })
}
