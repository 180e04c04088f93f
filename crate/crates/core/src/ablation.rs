//! Named configuration variants along one ablation axis.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::tempomoe::{uniform_anchors, Homogeneity, RouteMode, ScaleSet};

pub const AXES: [&str; 7] = ["expert_group", "beat_scales", "group_count", "inter_mode", "intra_mode", "routing_feature", "ffn_baseline"];

/// Axes swept by `ablate` with no explicit axis. `routing_feature` is left
/// out: only the music input is implemented, so it would duplicate the base.
pub const DEFAULT_SWEEP: [&str; 6] = ["expert_group", "beat_scales", "group_count", "inter_mode", "intra_mode", "ffn_baseline"];

pub const GROUP_COUNTS: [usize; 4] = [4, 8, 16, 32];
pub const ANCHOR_RANGE: (f64, f64) = (60.0, 200.0);

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: DenoiserConfig,
}

const MODES: [(RouteMode, &str); 4] =
    [(RouteMode::Top1, "top1"), (RouteMode::Top2, "top2"), (RouteMode::Soft, "soft"), (RouteMode::Average, "average")];

pub fn ablation_expand(base: &DenoiserConfig, axis: &str) -> Result<Vec<Variant>> {
    let with = |value: &str, f: &dyn Fn(&mut DenoiserConfig)| {
        let mut config = base.clone();
        config.ffn_baseline = false;
        f(&mut config);
        Variant { name: format!("{axis}={value}"), config }
    };
    let out = match axis {
        "expert_group" => [
            (Homogeneity::HomoSameScale, "same_scale"),
            (Homogeneity::HomoMultiScale, "homo_multi"),
            (Homogeneity::Hetero, "hetero"),
        ]
        .iter()
        .map(|&(h, n)| with(n, &|c| c.bank.homogeneity = h))
        .collect(),
        "beat_scales" => [
            (ScaleSet::QuarterOnly, "quarter_only"),
            (ScaleSet::HalfOnly, "half_only"),
            (ScaleSet::WholeOnly, "whole_only"),
            (ScaleSet::Mixed, "mixed"),
        ]
        .iter()
        .map(|&(s, n)| with(n, &|c| c.bank.scales = s))
        .collect(),
        "group_count" => GROUP_COUNTS
            .iter()
            .map(|&g| with(&g.to_string(), &|c| c.bank.anchors = uniform_anchors(g, ANCHOR_RANGE.0, ANCHOR_RANGE.1)))
            .collect(),
        "inter_mode" => MODES.iter().map(|&(m, n)| with(n, &|c| c.routing.inter_mode = m)).collect(),
        "intra_mode" => MODES.iter().map(|&(m, n)| with(n, &|c| c.routing.intra_mode = m)).collect(),
        "routing_feature" => alloc::vec![with("music", &|_| {})],
        "ffn_baseline" => alloc::vec![with("on", &|c| c.ffn_baseline = true)],
        other => {
            return Err(Error::UnknownAxis { axis: other.into(), valid: AXES.join(", ") });
        }
    };
    Ok(out)
}

/// Every variant of the default sweep, in axis order.
pub fn full_sweep(base: &DenoiserConfig) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for axis in DEFAULT_SWEEP {
        out.extend(ablation_expand(base, axis)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Denoiser;

    #[test]
    fn group_count_axis() {
        let v = ablation_expand(&DenoiserConfig::tiny(1, 16, 3), "group_count").unwrap();
        assert_eq!(v.len(), 4);
        for (var, g) in v.iter().zip(GROUP_COUNTS) {
            let a = &var.config.bank.anchors;
            assert_eq!(a.len(), g);
            assert_eq!((a[0], a[g - 1]), ANCHOR_RANGE);
            let step = a[1] - a[0];
            assert!(a.windows(2).all(|w| (w[1] - w[0] - step).abs() < 1e-9));
        }
        assert_eq!(v[1].config.bank.anchors, crate::tempomoe::DEFAULT_ANCHORS.to_vec());
    }

    #[test]
    fn axis_sizes() {
        let base = DenoiserConfig::tiny(1, 16, 3);
        let sizes: Vec<usize> = AXES.iter().map(|a| ablation_expand(&base, a).unwrap().len()).collect();
        assert_eq!(sizes, [3, 4, 4, 4, 4, 1, 1]);
        assert_eq!(full_sweep(&base).unwrap().len(), 20);
    }

    #[test]
    fn unknown_axis_lists_valid_ones() {
        let e = ablation_expand(&DenoiserConfig::default(), "tempo").unwrap_err();
        let msg = alloc::format!("{e}");
        for a in AXES {
            assert!(msg.contains(a), "{msg}");
        }
    }

    #[test]
    fn every_variant_builds() {
        for v in full_sweep(&DenoiserConfig::tiny(1, 8, 3)).unwrap() {
            Denoiser::init::<f32>(v.config.clone(), 0).unwrap_or_else(|e| panic!("{}: {e}", v.name));
        }
    }
}
