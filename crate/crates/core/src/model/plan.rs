use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, NeuronId};
use crate::error::{Error, Result};

/// Replacement rule for one neuron's post-nonlinearity activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueEdit {
    /// Activation forced to 0 at every position.
    Zero,
    /// Activation multiplied by `factor` at every position.
    Scale { factor: f64 },
    /// At the final (answer) position only, the activation becomes
    /// `baseline + alpha * (natural - baseline)`.
    Interpolate { alpha: f64, baseline: f64 },
}

impl ValueEdit {
    /// Activation value that replaces `natural`, and d(edited)/d(natural).
    #[inline]
    pub(crate) fn apply(&self, natural: f64, is_last: bool) -> (f64, f64) {
        match *self {
            ValueEdit::Zero => (0.0, 0.0),
            ValueEdit::Scale { factor } => (natural * factor, factor),
            ValueEdit::Interpolate { alpha, baseline } if is_last => (baseline + alpha * (natural - baseline), alpha),
            ValueEdit::Interpolate { .. } => (natural, 1.0),
        }
    }

    /// Edit that pins the answer-position activation to `value`.
    pub fn inject(value: f64) -> Self {
        ValueEdit::Interpolate { alpha: 0.0, baseline: value }
    }
}

/// Declarative neuron edits applied during a forward pass.
///
/// Edge edits scale the direct residual pathway between a neuron `A` and a
/// neuron `B` one layer above it. The pathway weight is `w_AB = u_A . v_B`
/// (A's output-projection row dotted with B's input column); a gain `g` adds
/// `(g - 1) * a_A * w_AB` to B's pre-activation at each position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "PlanWire", try_from = "PlanWire")]
pub struct InterventionPlan {
    value_edits: BTreeMap<NeuronId, ValueEdit>,
    edge_edits: BTreeMap<(NeuronId, NeuronId), f64>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.value_edits.is_empty() && self.edge_edits.is_empty()
    }

    /// Fails if `neuron` already carries a value edit.
    pub fn with_value(mut self, neuron: NeuronId, edit: ValueEdit) -> Result<Self> {
        self.add_value(neuron, edit)?;
        Ok(self)
    }

    pub fn add_value(&mut self, neuron: NeuronId, edit: ValueEdit) -> Result<()> {
        if let ValueEdit::Scale { factor } = edit {
            if !factor.is_finite() || factor < 0.0 {
                return Err(Error::InvalidPlan(format!("scale factor {factor} for {neuron}")));
            }
        }
        if let ValueEdit::Interpolate { alpha, baseline } = edit {
            if !alpha.is_finite() || !baseline.is_finite() {
                return Err(Error::InvalidPlan(format!("non-finite interpolation for {neuron}")));
            }
        }
        if self.value_edits.insert(neuron, edit).is_some() {
            return Err(Error::InvalidPlan(format!("{neuron} has two value edits")));
        }
        Ok(())
    }

    /// Adds or overwrites the gain on the `lower -> upper` pathway. The pair is
    /// normalised so the lower-layer neuron comes first.
    pub fn set_edge(&mut self, a: NeuronId, b: NeuronId, gain: f64) -> Result<()> {
        if !gain.is_finite() || gain < 0.0 {
            return Err(Error::InvalidPlan(format!("edge gain {gain} for {a} -> {b}")));
        }
        let (lo, hi) = if a.layer <= b.layer { (a, b) } else { (b, a) };
        if hi.layer != lo.layer + 1 {
            return Err(Error::NonAdjacentEdge { from: lo, to: hi });
        }
        self.edge_edits.insert((lo, hi), gain);
        Ok(())
    }

    pub fn with_edge(mut self, a: NeuronId, b: NeuronId, gain: f64) -> Result<Self> {
        self.set_edge(a, b, gain)?;
        Ok(self)
    }

    pub fn value_edits(&self) -> &BTreeMap<NeuronId, ValueEdit> {
        &self.value_edits
    }

    pub fn edge_edits(&self) -> &BTreeMap<(NeuronId, NeuronId), f64> {
        &self.edge_edits
    }

    pub fn value_edit(&self, n: NeuronId) -> Option<&ValueEdit> {
        self.value_edits.get(&n)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for n in self.value_edits.keys() {
            cfg.check_neuron(*n)?;
        }
        for &(a, b) in self.edge_edits.keys() {
            cfg.check_neuron(a)?;
            cfg.check_neuron(b)?;
            if b.layer != a.layer + 1 {
                return Err(Error::NonAdjacentEdge { from: a, to: b });
            }
        }
        Ok(())
    }

    /// Merges two plans; a neuron or edge edited in both is rejected.
    pub fn merge(mut self, other: &InterventionPlan) -> Result<Self> {
        for (n, e) in &other.value_edits {
            self.add_value(*n, *e)?;
        }
        for (&(a, b), &g) in &other.edge_edits {
            if self.edge_edits.insert((a, b), g).is_some() {
                return Err(Error::InvalidPlan(format!("edge {a} -> {b} edited twice")));
            }
        }
        Ok(self)
    }

    /// Edits grouped by layer, for the forward pass.
    pub(crate) fn values_in_layer(&self, layer: usize) -> impl Iterator<Item = (usize, &ValueEdit)> {
        self.value_edits.range(NeuronId::new(layer, 0)..NeuronId::new(layer + 1, 0)).map(|(n, e)| (n.pos, e))
    }

    /// Edge edits whose upper neuron lives in `layer`, excluding gain-1 edits.
    pub(crate) fn edges_into_layer(&self, layer: usize) -> Vec<(NeuronId, NeuronId, f64)> {
        self.edge_edits
            .iter()
            .filter(|((_, b), g)| b.layer == layer && **g != 1.0)
            .map(|(&(a, b), &g)| (a, b, g))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ValueWire {
    neuron: NeuronId,
    edit: ValueEdit,
}

#[derive(Serialize, Deserialize)]
struct EdgeWire {
    from: NeuronId,
    to: NeuronId,
    gain: f64,
}

/// JSON form: lists instead of maps, since neuron ids are not string keys.
#[derive(Serialize, Deserialize)]
struct PlanWire {
    #[serde(default)]
    values: Vec<ValueWire>,
    #[serde(default)]
    edges: Vec<EdgeWire>,
}

impl From<InterventionPlan> for PlanWire {
    fn from(p: InterventionPlan) -> Self {
        PlanWire {
            values: p.value_edits.into_iter().map(|(neuron, edit)| ValueWire { neuron, edit }).collect(),
            edges: p.edge_edits.into_iter().map(|((from, to), gain)| EdgeWire { from, to, gain }).collect(),
        }
    }
}

impl TryFrom<PlanWire> for InterventionPlan {
    type Error = Error;

    fn try_from(w: PlanWire) -> Result<Self> {
        let mut plan = InterventionPlan::new();
        for v in w.values {
            plan.add_value(v.neuron, v.edit)?;
        }
        for e in w.edges {
            plan.set_edge(e.from, e.to, e.gain)?;
        }
        Ok(plan)
    }
}

/// Which MLP neurons (and whether the non-MLP parameters) may change in training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable_neurons: BTreeSet<NeuronId>,
    pub train_non_mlp: bool,
}

impl FreezeMask {
    pub fn all(cfg: &ModelConfig) -> Self {
        FreezeMask { trainable_neurons: cfg.neurons().collect(), train_non_mlp: true }
    }

    pub fn frozen() -> Self {
        FreezeMask { trainable_neurons: BTreeSet::new(), train_non_mlp: false }
    }

    pub fn neurons_only(neurons: impl IntoIterator<Item = NeuronId>) -> Self {
        FreezeMask { trainable_neurons: neurons.into_iter().collect(), train_non_mlp: false }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.trainable_neurons.iter().try_for_each(|n| cfg.check_neuron(*n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_json_round_trip() {
        let plan = InterventionPlan::new()
            .with_value(NeuronId::new(1, 3), ValueEdit::Scale { factor: 2.0 })
            .unwrap()
            .with_edge(NeuronId::new(1, 0), NeuronId::new(0, 4), 0.0)
            .unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: InterventionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn duplicate_value_edit_rejected() {
        let n = NeuronId::new(0, 1);
        let plan = InterventionPlan::new().with_value(n, ValueEdit::Zero).unwrap();
        assert!(plan.with_value(n, ValueEdit::Scale { factor: 2.0 }).is_err());
    }

    #[test]
    fn edges_must_join_adjacent_layers() {
        let mut plan = InterventionPlan::new();
        assert!(matches!(
            plan.set_edge(NeuronId::new(0, 0), NeuronId::new(2, 0), 0.0),
            Err(Error::NonAdjacentEdge { .. })
        ));
        assert!(plan.set_edge(NeuronId::new(0, 0), NeuronId::new(0, 1), 0.0).is_err());
        plan.set_edge(NeuronId::new(1, 3), NeuronId::new(0, 2), 0.0).unwrap();
        let (&(a, b), _) = plan.edge_edits().iter().next().unwrap();
        assert_eq!((a.layer, b.layer), (0, 1));
        assert!(plan.set_edge(NeuronId::new(0, 0), NeuronId::new(1, 0), -1.0).is_err());
    }

    #[test]
    fn values_grouped_by_layer() {
        let plan = InterventionPlan::new()
            .with_value(NeuronId::new(1, 5), ValueEdit::Zero)
            .unwrap()
            .with_value(NeuronId::new(0, 2), ValueEdit::Zero)
            .unwrap()
            .with_value(NeuronId::new(1, 0), ValueEdit::Zero)
            .unwrap();
        let l1: Vec<_> = plan.values_in_layer(1).map(|(p, _)| p).collect();
        assert_eq!(l1, vec![0, 5]);
    }

    #[test]
    fn interpolate_only_touches_last_position() {
        let e = ValueEdit::Interpolate { alpha: 0.5, baseline: 1.0 };
        assert_eq!(e.apply(3.0, false), (3.0, 1.0));
        assert_eq!(e.apply(3.0, true), (2.0, 0.5));
        assert_eq!(ValueEdit::inject(7.0).apply(-2.0, true).0, 7.0);
    }
}
