//! Dempster-Shafer mass functions over small frames, used to check the
//! fusion channel against its evidential reading.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{arg, QcmmError, Result};
use crate::fusion::{belief_mass, fuse_triplet};

pub const MAX_FRAME: usize = 16;
pub const MASS_TOL: f64 = 1e-12;

/// Subsets of the frame are bitmasks; bit `i` is hypothesis `i`.
pub type Subset = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct MassFunction {
    frame_size: usize,
    masses: BTreeMap<Subset, f64>,
}

impl MassFunction {
    /// Zero entries are dropped; the empty set must carry no mass.
    pub fn new(frame_size: usize, masses: impl IntoIterator<Item = (Subset, f64)>) -> Result<Self> {
        if frame_size == 0 || frame_size > MAX_FRAME {
            return arg(format!("frame size must be in 1..={MAX_FRAME}, got {frame_size}"));
        }
        let full = Self::full_mask(frame_size);
        let mut map = BTreeMap::new();
        for (s, m) in masses {
            if s & !full != 0 {
                return arg(format!("subset {s:#b} outside a frame of {frame_size}"));
            }
            if !(0.0..=1.0).contains(&m) {
                return arg(format!("mass {m} outside [0, 1]"));
            }
            if m == 0.0 {
                continue;
            }
            if s == 0 {
                return arg("the empty set must carry zero mass");
            }
            *map.entry(s).or_insert(0.0) += m;
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return arg(format!("masses sum to {total}, not 1"));
        }
        Ok(Self {
            frame_size,
            masses: map,
        })
    }

    fn full_mask(frame_size: usize) -> Subset {
        ((1u64 << frame_size.min(MAX_FRAME)) - 1) as Subset
    }

    /// All mass on the whole frame.
    pub fn vacuous(frame_size: usize) -> Result<Self> {
        Self::new(frame_size, [(Self::full_mask(frame_size), 1.0)])
    }

    pub fn certain(frame_size: usize, subset: Subset) -> Result<Self> {
        Self::new(frame_size, [(subset, 1.0)])
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn omega(&self) -> Subset {
        Self::full_mask(self.frame_size)
    }

    pub fn mass(&self, subset: Subset) -> f64 {
        self.masses.get(&subset).copied().unwrap_or(0.0)
    }

    pub fn focal_elements(&self) -> impl Iterator<Item = (Subset, f64)> + '_ {
        self.masses.iter().map(|(&s, &m)| (s, m))
    }

    pub fn max_abs_diff(&self, other: &MassFunction) -> f64 {
        let keys: std::collections::BTreeSet<Subset> =
            self.masses.keys().chain(other.masses.keys()).copied().collect();
        keys.into_iter()
            .map(|k| (self.mass(k) - other.mass(k)).abs())
            .fold(0.0, f64::max)
    }
}

/// Order-independent sum, so that combination is bit-exactly commutative.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Dempster's rule. Returns the combined masses and the conflict `K`.
pub fn combine_conjunctive(m1: &MassFunction, m2: &MassFunction) -> Result<(MassFunction, f64)> {
    if m1.frame_size != m2.frame_size {
        return arg(format!(
            "frames differ: {} vs {}",
            m1.frame_size, m2.frame_size
        ));
    }
    let mut joint: BTreeMap<Subset, Vec<f64>> = BTreeMap::new();
    let mut conflict = Vec::new();
    for (a, ma) in m1.focal_elements() {
        for (b, mb) in m2.focal_elements() {
            let w = ma * mb;
            match a & b {
                0 => conflict.push(w),
                c => joint.entry(c).or_default().push(w),
            }
        }
    }
    let k = sorted_sum(conflict);
    let sums: BTreeMap<Subset, f64> = joint.into_iter().map(|(c, t)| (c, sorted_sum(t))).collect();
    let agree = sorted_sum(sums.values().copied().collect());
    if agree <= 0.0 {
        return Err(QcmmError::Domain("total conflict (K = 1)".into()));
    }
    let masses = sums.into_iter().map(|(c, w)| (c, w / agree)).collect();
    Ok((
        MassFunction {
            frame_size: m1.frame_size,
            masses,
        },
        k,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorrespondenceReport {
    pub quantum_mass: f64,
    pub evidential_mass: f64,
    pub abs_diff: f64,
}

/// Compare the fused `|1>` population with the conjunctive evidence mass
/// `m_h(a) m_l(a)` weighted by the channel's belief mass.
pub fn verify_fusion_correspondence(v_h: f64, v_l: f64, theta: f64) -> Result<CorrespondenceReport> {
    let quantum_mass = fuse_triplet(v_h, v_l, theta)?.get(1, 1).re;
    let evidential_mass =
        (v_h / 2.0).sin().powi(2) * (v_l / 2.0).sin().powi(2) * belief_mass(theta);
    Ok(CorrespondenceReport {
        quantum_mass,
        evidential_mass,
        abs_diff: (quantum_mass - evidential_mass).abs(),
    })
}
