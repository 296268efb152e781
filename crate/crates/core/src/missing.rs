//! Structured missing-modality simulation and baseline substitution policies.
//!
//! A scenario names the modalities that remain AVAILABLE; applying a plan
//! independently selects each sample with the plan's rate (seeded) and strips
//! everything outside the scenario from selected samples. Selection draws a
//! per-sample uniform once and thresholds it by the rate, so the affected
//! sets are nested as the rate grows.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::unit_uniform;
use crate::tensor::Tensor;

/// One input stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::Text];

    pub fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Visual => 1,
            Modality::Text => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Visual => "v",
            Modality::Text => "t",
        }
    }

    /// The other two modalities, in canonical (a, v, t) order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Audio => [Modality::Visual, Modality::Text],
            Modality::Visual => [Modality::Audio, Modality::Text],
            Modality::Text => [Modality::Audio, Modality::Visual],
        }
    }
}

/// One sample: per-modality feature sequences plus presence flags. An absent
/// modality keeps an all-zero placeholder of the correct shape.
#[derive(Clone, Debug)]
pub struct ModalBundle {
    pub features: [Tensor; 3],
    pub present: [bool; 3],
    pub label: f64,
}

impl ModalBundle {
    pub fn complete(features: [Tensor; 3], label: f64) -> Self {
        ModalBundle { features, present: [true; 3], label }
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|p| *p)
    }

    pub fn absent(&self) -> Vec<Modality> {
        Modality::ALL.iter().copied().filter(|m| !self.present[m.index()]).collect()
    }

    pub fn present_modalities(&self) -> Vec<Modality> {
        Modality::ALL.iter().copied().filter(|m| self.present[m.index()]).collect()
    }
}

/// Set of modalities that stay available under a scenario.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    available: Vec<Modality>,
}

impl Scenario {
    pub fn new(mut available: Vec<Modality>) -> Result<Self> {
        if available.is_empty() {
            return Err(Error::Contract("scenario with empty available set".into()));
        }
        available.sort_by_key(|m| m.index());
        available.dedup();
        Ok(Scenario { available })
    }

    /// The six non-full availability patterns of Table-style evaluations, in
    /// canonical order: {a}, {v}, {t}, {a,v}, {a,t}, {v,t}.
    pub fn all_six() -> Vec<Scenario> {
        use Modality::*;
        [
            vec![Audio],
            vec![Visual],
            vec![Text],
            vec![Audio, Visual],
            vec![Audio, Text],
            vec![Visual, Text],
        ]
        .into_iter()
        .map(|v| Scenario::new(v).expect("nonempty"))
        .collect()
    }

    pub fn available(&self) -> &[Modality] {
        &self.available
    }

    pub fn keeps(&self, m: Modality) -> bool {
        self.available.contains(&m)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tags: Vec<&str> = self.available.iter().map(|m| m.tag()).collect();
        write!(f, "{}", tags.join(","))
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mods = Vec::new();
        for part in s.split(',') {
            match part.trim() {
                "a" => mods.push(Modality::Audio),
                "v" => mods.push(Modality::Visual),
                "t" => mods.push(Modality::Text),
                other => {
                    return Err(Error::Config(format!(
                        "unknown modality '{other}' in scenario '{s}'"
                    )))
                }
            }
        }
        Scenario::new(mods)
    }
}

/// Scenario + rate + seed: everything needed to corrupt a dataset
/// reproducibly.
#[derive(Clone, Debug)]
pub struct MissingPlan {
    pub scenario: Scenario,
    pub rate: f64,
    pub seed: u64,
}

impl MissingPlan {
    pub fn new(scenario: Scenario, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("missing rate {rate} outside [0, 1]")));
        }
        Ok(MissingPlan { scenario, rate, seed })
    }

    /// True when sample `index` is selected for corruption.
    pub fn selects(&self, index: usize) -> bool {
        unit_uniform(self.seed, index as u64) < self.rate
    }
}

/// Applies a plan to complete bundles: selected samples keep only the
/// scenario's modalities, the rest stay complete.
pub fn apply(bundles: &[ModalBundle], plan: &MissingPlan) -> Result<Vec<ModalBundle>> {
    if plan.scenario.available().is_empty() {
        return Err(Error::Contract("plan scenario has no available modality".into()));
    }
    let out = bundles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut nb = b.clone();
            if plan.selects(i) {
                for m in Modality::ALL {
                    if !plan.scenario.keeps(m) {
                        let shape = nb.features[m.index()].shape().to_vec();
                        nb.features[m.index()] = Tensor::zeros(shape);
                        nb.present[m.index()] = false;
                    }
                }
            }
            nb
        })
        .collect();
    Ok(out)
}

/// Baseline substitution policy for absent modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Leave zero placeholders in place.
    LowerBound,
    /// Replace absent features with the training-set mean sequence.
    MeanSubstitution,
    /// Training-time augmentation flag; at substitution time behaves like
    /// zero fill (the dropout happens during baseline training).
    ModalityDropout,
    /// Zero placeholders; the skip-generation path.
    ZeroFill,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lb" | "lower-bound" => Ok(Policy::LowerBound),
            "ms" | "mean-substitution" => Ok(Policy::MeanSubstitution),
            "md" | "modality-dropout" => Ok(Policy::ModalityDropout),
            "zero" | "zero-fill" => Ok(Policy::ZeroFill),
            other => Err(Error::Config(format!("unknown substitution policy '{other}'"))),
        }
    }
}

/// Per-modality mean feature sequences over a (training) dataset.
#[derive(Clone, Debug)]
pub struct ModalityMeans {
    pub mean: [Tensor; 3],
}

impl ModalityMeans {
    pub fn compute(bundles: &[ModalBundle]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::Contract("mean substitution needs a nonempty dataset".into()));
        }
        let mut mean: Vec<Tensor> = bundles[0]
            .features
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        for b in bundles {
            for (acc, t) in mean.iter_mut().zip(&b.features) {
                for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
        }
        let n = bundles.len() as f64;
        for acc in &mut mean {
            for a in acc.data_mut() {
                *a /= n;
            }
        }
        Ok(ModalityMeans { mean: [mean[0].clone(), mean[1].clone(), mean[2].clone()] })
    }
}

/// Prepares a bundle for the backbone under the given policy.
pub fn substitute(
    bundle: &ModalBundle,
    policy: Policy,
    means: Option<&ModalityMeans>,
) -> Result<ModalBundle> {
    let mut out = bundle.clone();
    match policy {
        Policy::LowerBound | Policy::ZeroFill | Policy::ModalityDropout => {}
        Policy::MeanSubstitution => {
            let means = means.ok_or_else(|| {
                Error::Contract("mean substitution requires precomputed training means".into())
            })?;
            for m in Modality::ALL {
                if !out.present[m.index()] {
                    out.features[m.index()] = means.mean[m.index()].clone();
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bundle(fill: f64) -> ModalBundle {
        let f = |l: usize, d: usize| Tensor::from_vec(vec![l, d], vec![fill; l * d]);
        ModalBundle::complete([f(2, 2), f(2, 3), f(3, 2)], 1.0)
    }

    #[test]
    fn rate_zero_changes_nothing() {
        let data = vec![toy_bundle(1.0); 10];
        let plan = MissingPlan::new(Scenario::from_str("t").unwrap(), 0.0, 7).unwrap();
        let out = apply(&data, &plan).unwrap();
        for b in &out {
            assert!(b.is_complete());
        }
    }

    #[test]
    fn rate_one_strips_everything_outside_scenario() {
        let data = vec![toy_bundle(1.0); 10];
        let plan = MissingPlan::new(Scenario::from_str("t").unwrap(), 1.0, 7).unwrap();
        let out = apply(&data, &plan).unwrap();
        for b in &out {
            assert_eq!(b.present, [false, false, true]);
            assert!(b.features[0].data().iter().all(|v| *v == 0.0));
            assert!(b.features[1].data().iter().all(|v| *v == 0.0));
            assert!(b.features[2].data().iter().all(|v| *v == 1.0));
        }
    }

    #[test]
    fn selection_count_is_binomial_and_deterministic() {
        let data = vec![toy_bundle(1.0); 1000];
        let plan = MissingPlan::new(Scenario::from_str("a,t").unwrap(), 0.3, 42).unwrap();
        let count = |bs: &[ModalBundle]| bs.iter().filter(|b| !b.is_complete()).count();
        let out1 = apply(&data, &plan).unwrap();
        let out2 = apply(&data, &plan).unwrap();
        let c = count(&out1);
        // Central 99.9% interval of Binomial(1000, 0.3): 300 ± 3.29·sqrt(210).
        assert!((253..=347).contains(&c), "affected count {c} outside binomial band");
        assert_eq!(c, count(&out2));
        for (a, b) in out1.iter().zip(&out2) {
            assert_eq!(a.present, b.present);
        }
    }

    #[test]
    fn masked_sets_nest_across_rates() {
        let mk = |rate: f64| MissingPlan::new(Scenario::from_str("v").unwrap(), rate, 5).unwrap();
        let low = mk(0.2);
        let high = mk(0.6);
        for i in 0..500 {
            if low.selects(i) {
                assert!(high.selects(i), "sample {i} masked at 0.2 but not at 0.6");
            }
        }
    }

    #[test]
    fn presence_zero_coherence_after_apply() {
        let data = vec![toy_bundle(2.5); 64];
        let plan = MissingPlan::new(Scenario::from_str("a,v").unwrap(), 0.5, 11).unwrap();
        for b in apply(&data, &plan).unwrap() {
            for m in Modality::ALL {
                let zeroed = b.features[m.index()].data().iter().all(|v| *v == 0.0);
                assert_eq!(!b.present[m.index()], zeroed);
            }
        }
    }

    #[test]
    fn six_scenarios_enumerate_table_columns() {
        let six = Scenario::all_six();
        let shown: Vec<String> = six.iter().map(|s| s.to_string()).collect();
        assert_eq!(shown, ["a", "v", "t", "a,v", "a,t", "v,t"]);
        for s in &six {
            let round: Scenario = shown[six.iter().position(|x| x == s).unwrap()].parse().unwrap();
            assert_eq!(&round, s);
        }
    }

    #[test]
    fn mean_substitution_fills_absent_with_training_mean() {
        let train: Vec<ModalBundle> = (0..4).map(|i| toy_bundle(i as f64)).collect();
        let means = ModalityMeans::compute(&train).unwrap();
        // Mean of fills 0..=3 is 1.5 everywhere.
        assert!(means.mean[0].data().iter().all(|v| (v - 1.5).abs() < 1e-12));

        let mut masked = toy_bundle(9.0);
        masked.features[0] = Tensor::zeros(vec![2, 2]);
        masked.present[0] = false;
        let filled = substitute(&masked, Policy::MeanSubstitution, Some(&means)).unwrap();
        for (got, want) in filled.features[0].data().iter().zip(means.mean[0].data()) {
            assert!((got - want).abs() < 1e-12);
        }
        // Present modalities untouched.
        assert_eq!(filled.features[2], masked.features[2]);
    }

    #[test]
    fn mean_substitution_noop_on_complete_bundle() {
        let train = vec![toy_bundle(1.0), toy_bundle(3.0)];
        let means = ModalityMeans::compute(&train).unwrap();
        let b = toy_bundle(7.0);
        let out = substitute(&b, Policy::MeanSubstitution, Some(&means)).unwrap();
        for m in Modality::ALL {
            assert_eq!(out.features[m.index()], b.features[m.index()]);
        }
    }

    #[test]
    fn lower_bound_keeps_zero_placeholders() {
        let mut b = toy_bundle(1.0);
        b.features[0] = Tensor::zeros(vec![2, 2]);
        b.present[0] = false;
        b.features[1] = Tensor::zeros(vec![2, 3]);
        b.present[1] = false;
        let out = substitute(&b, Policy::LowerBound, None).unwrap();
        assert!(out.features[0].data().iter().all(|v| *v == 0.0));
        assert!(out.features[1].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unknown_policy_is_config_error() {
        let err = "median-fill".parse::<Policy>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
