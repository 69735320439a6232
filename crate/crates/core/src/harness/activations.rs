//! Group-averaged activation profiles.
//!
//! Files of very different lengths can't be compared window-by-window,
//! so each file's channel-averaged gated activations are resampled to a
//! fixed bin count and groups (original files, appended files, each
//! cave flavor, …) are compared by their per-bin means.

use super::HarnessError;
use crate::malconv::DetectorModel;
use serde::Serialize;

/// Default number of position bins profiles are resampled to.
pub const DEFAULT_PROFILE_BINS: usize = 200;

/// Mean resampled activation profile of one named group of files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupProfile {
    pub group: String,
    pub files: usize,
    /// Per-bin mean of the members' resampled profiles.
    pub mean: Vec<f64>,
}

/// Average each group's activation profiles into `bins` bins.
///
/// Groups are `(name, member files)` pairs; a group with no members is
/// an error (there is nothing to average).
pub fn activation_report(
    model: &DetectorModel,
    groups: &[(String, Vec<Vec<u8>>)],
    bins: usize,
) -> Result<Vec<GroupProfile>, HarnessError> {
    groups
        .iter()
        .map(|(name, files)| {
            if files.is_empty() {
                return Err(HarnessError::EmptyGroup(name.clone()));
            }
            let mut mean = vec![0.0f64; bins];
            for bytes in files {
                let profile = model.activation_profile(bytes, bins);
                for (m, v) in mean.iter_mut().zip(&profile.resampled) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= files.len() as f64;
            }
            Ok(GroupProfile {
                group: name.clone(),
                files: files.len(),
                mean,
            })
        })
        .collect()
}

/// CSV projection: `group,bin,value` rows, groups in input order.
pub fn activation_csv(profiles: &[GroupProfile]) -> String {
    let mut out = String::from("group,bin,value\n");
    for p in profiles {
        for (bin, value) in p.mean.iter().enumerate() {
            out.push_str(&format!("{},{bin},{value}\n", p.group));
        }
    }
    out
}
