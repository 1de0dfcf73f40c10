//! Injection plans: which sites get quantized or perturbed, and how.

use super::{ModelError, ModelParams, ModelResult};
use crate::perturb::{IntensityTarget, PerturbKind, PerturbSpec};
use crate::quant::{Granularity, QuantScheme, ScalePolicy, Transform};
use crate::tensor::{mix_seed, RngStream};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// What to do to a weight matrix, or to a matmul input activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    None,
    Quantize(QuantScheme),
    Perturb(PerturbSpec),
}

/// Per-site weight and activation actions. Weight actions apply to a copy of
/// the stored matrix before use; activation actions apply to the input of
/// that site's matmul, re-evaluated dynamically on every forward call.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    #[serde(default)]
    pub weight_actions: BTreeMap<String, Action>,
    #[serde(default)]
    pub activation_actions: BTreeMap<String, Action>,
}

/// The standard weight/activation bit-width settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    W4A16,
    W8A8,
    W4A8,
}

impl Preset {
    pub fn weight_bits(&self) -> u8 {
        match self {
            Preset::W4A16 | Preset::W4A8 => 4,
            Preset::W8A8 => 8,
        }
    }

    pub fn activation_bits(&self) -> Option<u8> {
        match self {
            Preset::W4A16 => None,
            Preset::W8A8 | Preset::W4A8 => Some(8),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Preset::W4A16 => "w4a16",
            Preset::W8A8 => "w8a8",
            Preset::W4A8 => "w4a8",
        }
    }
}

/// Weight scheme used by the presets: symmetric absmax per output channel.
pub fn weight_scheme(bits: u8, transform: Transform) -> QuantScheme {
    QuantScheme {
        bits,
        scale_policy: ScalePolicy::AbsmaxSymmetric,
        granularity: Granularity::PerChannel { axis: 1 },
        transform,
    }
}

/// Activation scheme used by the presets: symmetric absmax per tensor,
/// computed dynamically per forward call.
pub fn activation_scheme(bits: u8, transform: Transform) -> QuantScheme {
    QuantScheme {
        bits,
        scale_policy: ScalePolicy::AbsmaxSymmetric,
        granularity: Granularity::PerTensor,
        transform,
    }
}

impl InjectionPlan {
    pub fn empty() -> InjectionPlan {
        InjectionPlan::default()
    }

    /// A plan quantizing every site under `preset`, uniformly
    /// (`Transform::Identity`) or non-uniformly (e.g. the cube root).
    pub fn quantize_preset(params: &ModelParams, preset: Preset, transform: Transform) -> Self {
        let mut plan = InjectionPlan::empty();
        let w = weight_scheme(preset.weight_bits(), transform);
        for site in params.site_names() {
            plan.weight_actions.insert(site.clone(), Action::Quantize(w));
            if let Some(abits) = preset.activation_bits() {
                plan.activation_actions
                    .insert(site, Action::Quantize(activation_scheme(abits, transform)));
            }
        }
        plan
    }

    /// A plan perturbing every weight and activation with `kind`, each site
    /// matched to its own native quantization noise under `preset` (the
    /// W8A8-style simulation). Per-site seeds are derived from `seed` so
    /// sites are independent but reproducible.
    pub fn perturb_preset(
        params: &ModelParams,
        preset: Preset,
        kind: PerturbKind,
        seed: u64,
    ) -> Self {
        let mut plan = InjectionPlan::empty();
        let w_scheme = weight_scheme(preset.weight_bits(), Transform::Identity);
        for (idx, site) in params.site_names().into_iter().enumerate() {
            let w_spec = PerturbSpec {
                kind,
                intensity: if matches!(kind, PerturbKind::Clip { .. }) {
                    IntensityTarget::default()
                } else {
                    IntensityTarget::MatchQuantL2 { scheme: w_scheme }
                },
                seed: mix_seed(seed, 2 * idx as u64),
            };
            plan.weight_actions.insert(site.clone(), Action::Perturb(w_spec));
            if let Some(abits) = preset.activation_bits() {
                let a_spec = PerturbSpec {
                    kind,
                    intensity: if matches!(kind, PerturbKind::Clip { .. }) {
                        IntensityTarget::default()
                    } else {
                        IntensityTarget::MatchQuantL2 {
                            scheme: activation_scheme(abits, Transform::Identity),
                        }
                    },
                    seed: mix_seed(seed, 2 * idx as u64 + 1),
                };
                plan.activation_actions.insert(site, Action::Perturb(a_spec));
            }
        }
        plan
    }

    /// A plan applying the clip-at-μ±kσ perturbation to every weight and
    /// activation. Deterministic, so no seed.
    pub fn clip_preset(params: &ModelParams, k: f32) -> Self {
        let mut plan = InjectionPlan::empty();
        let spec = PerturbSpec {
            kind: PerturbKind::Clip { k, one_sided: false },
            intensity: IntensityTarget::default(),
            seed: 0,
        };
        for site in params.site_names() {
            plan.weight_actions.insert(site.clone(), Action::Perturb(spec));
            plan.activation_actions.insert(site, Action::Perturb(spec));
        }
        plan
    }

    /// The fair-comparison control for [`InjectionPlan::clip_preset`]: a
    /// Gaussian perturbation on every weight and activation whose L2 norm
    /// matches the clip perturbation of the same tensor.
    pub fn clip_matched_gaussian_preset(params: &ModelParams, k: f32, seed: u64) -> Self {
        let mut plan = InjectionPlan::empty();
        for (idx, site) in params.site_names().into_iter().enumerate() {
            let mk_spec = |tag: u64| PerturbSpec {
                kind: PerturbKind::Gaussian,
                intensity: IntensityTarget::MatchClipL2 { k, one_sided: false },
                seed: mix_seed(seed, 2 * idx as u64 + tag),
            };
            plan.weight_actions.insert(site.clone(), Action::Perturb(mk_spec(0)));
            plan.activation_actions.insert(site, Action::Perturb(mk_spec(1)));
        }
        plan
    }

    /// Checks that every named site exists and perturbation specs are valid.
    pub fn validate(&self, params: &ModelParams) -> ModelResult<Vec<String>> {
        let mut warnings = Vec::new();
        for (map, scope) in [
            (&self.weight_actions, "weight"),
            (&self.activation_actions, "activation"),
        ] {
            for (site, action) in map {
                if params.site(site).is_none() {
                    return Err(ModelError::UnknownSite { name: site.clone() });
                }
                match action {
                    Action::Quantize(scheme) => {
                        scheme.validate()?;
                        if let (Granularity::PerGroup { .. } | Granularity::PerChannel { .. }, "activation") =
                            (scheme.granularity, scope)
                        {
                            warnings.push(format!(
                                "{site}: activation quantization is per-tensor dynamic; \
                                 finer granularity applies to the flattened activation"
                            ));
                        }
                    }
                    Action::Perturb(spec) => {
                        for w in spec.validate()? {
                            warnings.push(format!("{site}: {w}"));
                        }
                    }
                    Action::None => {}
                }
            }
        }
        Ok(warnings)
    }

    pub fn is_empty_effect(&self) -> bool {
        self.weight_actions.values().all(|a| matches!(a, Action::None))
            && self.activation_actions.values().all(|a| matches!(a, Action::None))
    }
}

/// Makes a fraction of attention value channels carry large activations
/// without changing the network function: the chosen wv output columns are
/// multiplied by `scale` and the matching wo input rows by 1/scale. The
/// attention mix between them is linear, so the composition is exact; the
/// activation entering wo gains outlier channels that stress per-tensor
/// activation quantization.
pub fn inject_outliers(
    params: &mut ModelParams,
    channel_fraction: f64,
    scale: f32,
    seed: u64,
) -> Vec<(usize, usize)> {
    let d = params.config.model_dim;
    let n_channels = ((channel_fraction * d as f64).ceil() as usize).clamp(1, d);
    let mut rng = RngStream::new(seed);
    let mut chosen = Vec::new();
    for (l, layer) in params.set.layers.iter_mut().enumerate() {
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < n_channels {
            picked.insert(rng.next_index(d));
        }
        for &c in &picked {
            for row in 0..d {
                layer.wv[row * d + c] *= scale;
            }
            for col in 0..d {
                layer.wo[c * d + col] /= scale;
            }
            chosen.push((l, c));
        }
    }
    chosen
}
