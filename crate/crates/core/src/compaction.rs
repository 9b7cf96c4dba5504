//! Excising all-zero ISS components to obtain a smaller dense model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iss::{group_is_zero, removed_lines, IssGroupMap, SparsityReport};
use crate::model::{LanguageModel, TensorStore, TokenWindow};
use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub original: usize,
    /// Strictly increasing surviving component indices.
    pub kept: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorPlan {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kept_rows: Vec<usize>,
    pub kept_cols: Vec<usize>,
}

impl TensorPlan {
    pub fn kept_len(&self) -> usize {
        self.kept_rows.len() * self.kept_cols.len()
    }

    fn is_identity(&self) -> bool {
        self.kept_rows.len() == self.rows && self.kept_cols.len() == self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactionPlan {
    pub layers: Vec<LayerPlan>,
    /// Every tensor touched by any group, dropped or not.
    pub tensors: Vec<TensorPlan>,
}

impl CompactionPlan {
    /// Plan dropping `dropped[layer]` components. Fails with
    /// [`Error::DegenerateLayer`] if a layer would lose every component.
    pub fn from_dropped(map: &IssGroupMap, dropped: &[Vec<usize>]) -> Result<Self> {
        if dropped.len() != map.num_layers() {
            return Err(Error::Consistency(format!("{} drop lists for {} layers", dropped.len(), map.num_layers())));
        }
        let mut layers = Vec::with_capacity(map.num_layers());
        let mut groups = Vec::new();
        for (n, (layer, drop)) in map.layers().iter().zip(dropped).enumerate() {
            let k = layer.groups.len();
            let mut is_dropped = vec![false; k];
            for &d in drop {
                *is_dropped.get_mut(d).ok_or_else(|| {
                    Error::Consistency(format!("layer {} has no component {d}", layer.name))
                })? = true;
            }
            let kept: Vec<usize> = (0..k).filter(|&i| !is_dropped[i]).collect();
            if kept.is_empty() {
                return Err(Error::DegenerateLayer { layer: n, name: layer.name.clone() });
            }
            groups.extend((0..k).filter(|&i| is_dropped[i]).map(|i| &layer.groups[i]));
            layers.push(LayerPlan { name: layer.name.clone(), original: k, kept });
        }
        let lines = removed_lines(map, groups);
        let mut touched = vec![false; map.tensors().len()];
        for g in map.groups() {
            for s in g.slices.iter().chain(&g.companions) {
                touched[s.tensor] = true;
            }
        }
        let tensors = map
            .tensors()
            .iter()
            .zip(&lines)
            .zip(touched)
            .filter(|(_, t)| *t)
            .map(|((t, (rows, cols)), _)| TensorPlan {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
                kept_rows: (0..t.rows).filter(|r| !rows.contains(r)).collect(),
                kept_cols: (0..t.cols).filter(|c| !cols.contains(c)).collect(),
            })
            .collect();
        Ok(Self { layers, tensors })
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.kept.len() == l.original) && self.tensors.iter().all(TensorPlan::is_identity)
    }

    pub fn kept_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.kept.len()).collect()
    }

    /// Parameters removed from the tensors the plan touches.
    pub fn removed_params(&self) -> usize {
        self.tensors.iter().map(|t| t.rows * t.cols - t.kept_len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Drops exactly the components `report` lists as zero, after re-checking
/// each of them against the weights.
pub fn plan_compaction<T: Real, S: TensorStore<T> + ?Sized>(
    store: &S,
    map: &IssGroupMap,
    report: &SparsityReport,
) -> Result<CompactionPlan> {
    let bound = map.bind(store)?;
    if report.layers.len() != map.num_layers()
        || report.layers.iter().zip(map.layers()).any(|(r, l)| r.total != l.groups.len())
    {
        return Err(Error::Consistency("sparsity report does not match the group map".into()));
    }
    for (n, layer) in report.layers.iter().enumerate() {
        for &k in &layer.zero_components {
            let g = map
                .group(n, k)
                .ok_or_else(|| Error::Consistency(format!("report names missing component {k} of layer {n}")))?;
            if !group_is_zero(g, &bound, report.zero_tol) {
                return Err(Error::Consistency(format!(
                    "component {k} of layer {} is reported zero but has weights above {}",
                    layer.name, report.zero_tol
                )));
            }
        }
    }
    let dropped: Vec<Vec<usize>> = report.layers.iter().map(|l| l.zero_components.clone()).collect();
    CompactionPlan::from_dropped(map, &dropped)
}

/// Copy of `model` with every planned row and column deleted.
pub fn apply_compaction<T: Real, S: TensorStore<T> + Clone>(model: &S, plan: &CompactionPlan) -> Result<S> {
    let mut out = model.clone();
    {
        let mut tensors = out.tensors_mut();
        for tp in &plan.tensors {
            let (_, m) = tensors
                .iter_mut()
                .find(|(n, _)| *n == tp.name)
                .ok_or_else(|| Error::Consistency(format!("model has no tensor {}", tp.name)))?;
            if m.shape() != (tp.rows, tp.cols) {
                return Err(Error::Consistency(format!(
                    "tensor {} is {}x{}, plan expects {}x{}",
                    tp.name,
                    m.rows(),
                    m.cols(),
                    tp.rows,
                    tp.cols
                )));
            }
            if !tp.is_identity() {
                **m = m.select(&tp.kept_rows, &tp.kept_cols)?;
            }
        }
    }
    out.resync().map_err(|e| Error::Consistency(format!("compacted model is invalid: {e}")))?;
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Max |h| difference over surviving components, layers and steps.
    pub max_hidden_diff: f64,
    pub max_logit_diff: f64,
    pub steps: usize,
}

impl EquivalenceReport {
    pub fn max_diff(&self) -> f64 {
        self.max_hidden_diff.max(self.max_logit_diff)
    }
}

/// Runs both models from zero state over each probe window and compares the
/// original's surviving hidden components and all logits with the compact
/// model's.
pub fn verify_equivalence<M: LanguageModel>(
    original: &M,
    compact: &M,
    plan: &CompactionPlan,
    probes: &[Vec<Vec<usize>>],
) -> Result<EquivalenceReport> {
    let mut rep = EquivalenceReport::default();
    for probe in probes {
        let window: &TokenWindow = probe;
        let batch = probe.first().map_or(0, Vec::len);
        let a = original.trace(window, &original.initial_state(batch))?;
        let b = compact.trace(window, &compact.initial_state(batch))?;
        for (ha, hb) in a.hidden.iter().zip(&b.hidden) {
            if ha.len() != plan.layers.len() || hb.len() != plan.layers.len() {
                return Err(Error::Consistency("plan layer count differs from the model".into()));
            }
            for ((x, y), lp) in ha.iter().zip(hb).zip(&plan.layers) {
                if y.cols() != lp.kept.len() {
                    return Err(Error::Consistency(format!("compact layer {} width differs from the plan", lp.name)));
                }
                for r in 0..x.rows() {
                    for (j, &k) in lp.kept.iter().enumerate() {
                        let d = (x.get(r, k) - y.get(r, j)).abs() as f64;
                        rep.max_hidden_diff = rep.max_hidden_diff.max(d);
                    }
                }
            }
        }
        for (za, zb) in a.logits.iter().zip(&b.logits) {
            rep.max_logit_diff = rep.max_logit_diff.max(za.max_abs_diff(zb)? as f64);
        }
        rep.steps += probe.len();
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iss::{build_lstm_iss_groups, detect_zero_groups, LstmTopology, OverlapPolicy};
    use crate::model::{LstmLm, RhnLm};
    use crate::numerics::Rng;

    fn zero_group<S: TensorStore<f32>>(m: &mut S, map: &IssGroupMap, layer: usize, k: usize) {
        let coords = map.coords(map.group(layer, k).unwrap());
        let mut bound = map.bind_mut(m).unwrap();
        for c in coords {
            bound[c.tensor].set(c.row, c.col, 0.0);
        }
    }

    fn probes(rng: &mut Rng, vocab: usize, n: usize, steps: usize) -> Vec<Vec<Vec<usize>>> {
        (0..n).map(|_| (0..steps).map(|_| (0..2).map(|_| rng.below(vocab)).collect()).collect()).collect()
    }

    #[test]
    fn no_zero_groups_gives_identity_plan() {
        let m = LstmLm::init(6, 3, &[4, 3], &mut Rng::new(1)).unwrap();
        let map = m.group_map(OverlapPolicy::Distinct).unwrap();
        let plan = plan_compaction(&m, &map, &detect_zero_groups(&m, &map, 0.0).unwrap()).unwrap();
        assert!(plan.is_identity());
        let c = apply_compaction(&m, &plan).unwrap();
        assert_eq!(c, m);
        let rep = verify_equivalence(&m, &c, &plan, &probes(&mut Rng::new(2), 6, 3, 5)).unwrap();
        assert_eq!(rep.max_diff(), 0.0);
    }

    #[test]
    fn dropping_one_component_shrinks_every_structure() {
        let mut m = LstmLm::init(6, 5, &[4], &mut Rng::new(1)).unwrap();
        let map = m.group_map(OverlapPolicy::Distinct).unwrap();
        zero_group(&mut m, &map, 0, 1);
        let report = detect_zero_groups(&m, &map, 0.0).unwrap();
        let plan = plan_compaction(&m, &map, &report).unwrap();
        assert_eq!(plan.layers[0].kept, vec![0, 2, 3]);
        let c = apply_compaction(&m, &plan).unwrap();
        assert_eq!(c.layers[0].weight.shape(), (5 + 3, 12));
        assert_eq!(c.layers[0].bias.shape(), (1, 12));
        assert_eq!(c.softmax_w.shape(), (3, 6));
        assert_eq!(c.layers[0].hidden_size(), 3);
        // one group's distinct coordinates plus its four biases
        let g = map.group(0, 1).unwrap();
        assert_eq!(m.param_count() - c.param_count(), map.group_size(g) + 4);
        let rep = verify_equivalence(&m, &c, &plan, &probes(&mut Rng::new(3), 6, 10, 20)).unwrap();
        assert_eq!(rep.max_diff(), 0.0);
    }

    #[test]
    fn accounting_uses_the_union_of_dropped_coordinates() {
        let mut m = LstmLm::init(5, 3, &[5, 4], &mut Rng::new(7)).unwrap();
        let map = m.group_map(OverlapPolicy::Distinct).unwrap();
        for (l, k) in [(0, 0), (0, 3), (1, 2)] {
            zero_group(&mut m, &map, l, k);
        }
        let report = detect_zero_groups(&m, &map, 0.0).unwrap();
        let plan = plan_compaction(&m, &map, &report).unwrap();
        let c = apply_compaction(&m, &plan).unwrap();
        // brute-force union of member coordinates of the dropped groups
        let mut union = std::collections::HashSet::new();
        for (l, k) in [(0, 0), (0, 3), (1, 2)] {
            union.extend(map.coords(map.group(l, k).unwrap()));
        }
        assert_eq!(m.param_count() - c.param_count(), union.len() + 3 * 4);
        assert_eq!(plan.removed_params(), union.len() + 3 * 4);
        let before: usize = report.tensors.iter().map(|t| t.before - t.after).sum();
        assert_eq!(before, plan.removed_params());
    }

    #[test]
    fn compact_model_plans_to_identity() {
        let mut m = LstmLm::init(6, 4, &[5, 5], &mut Rng::new(2)).unwrap();
        let map = m.group_map(OverlapPolicy::Distinct).unwrap();
        zero_group(&mut m, &map, 1, 4);
        let plan = plan_compaction(&m, &map, &detect_zero_groups(&m, &map, 0.0).unwrap()).unwrap();
        let c = apply_compaction(&m, &plan).unwrap();
        let cmap = c.group_map(OverlapPolicy::Distinct).unwrap();
        let again = plan_compaction(&c, &cmap, &detect_zero_groups(&c, &cmap, 0.0).unwrap()).unwrap();
        assert!(again.is_identity());
        assert_eq!(CompactionPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
    }

    #[test]
    fn all_zero_layer_is_degenerate() {
        let mut m = LstmLm::init(6, 4, &[2, 3], &mut Rng::new(2)).unwrap();
        let map = m.group_map(OverlapPolicy::Distinct).unwrap();
        zero_group(&mut m, &map, 0, 0);
        zero_group(&mut m, &map, 0, 1);
        let report = detect_zero_groups(&m, &map, 0.0).unwrap();
        assert!(matches!(plan_compaction(&m, &map, &report), Err(Error::DegenerateLayer { layer: 0, .. })));
    }

    #[test]
    fn stale_report_is_rejected() {
        let mut m = LstmLm::init(6, 4, &[3], &mut Rng::new(2)).unwrap();
        let map = m.group_map(OverlapPolicy::Distinct).unwrap();
        zero_group(&mut m, &map, 0, 0);
        let report = detect_zero_groups(&m, &map, 0.0).unwrap();
        m.layers[0].weight.set(0, 0, 1.0);
        assert!(matches!(plan_compaction(&m, &map, &report), Err(Error::Consistency(_))));
        let other = LstmLm::init(6, 4, &[4], &mut Rng::new(2)).unwrap();
        assert!(apply_compaction(&other, &CompactionPlan::from_dropped(&map, &[vec![0]]).unwrap()).is_err());
    }

    #[test]
    fn rhn_unit_removal_is_exact() {
        for tied in [false, true] {
            let mut m = RhnLm::init(7, 4, 4, 3, false, tied, &mut Rng::new(5)).unwrap();
            let map = m.group_map(OverlapPolicy::Distinct).unwrap();
            zero_group(&mut m, &map, 0, 2);
            let plan = plan_compaction(&m, &map, &detect_zero_groups(&m, &map, 0.0).unwrap()).unwrap();
            let c = apply_compaction(&m, &plan).unwrap();
            assert_eq!(c.rhn.width(), 3);
            if tied {
                assert_eq!(c.embedding.cols(), 3);
            }
            let rep = verify_equivalence(&m, &c, &plan, &probes(&mut Rng::new(6), 7, 10, 20)).unwrap();
            assert_eq!(rep.max_diff(), 0.0, "tied={tied}");
        }
    }

    #[test]
    fn published_layer_sizes_give_published_parameter_count() {
        let topo = LstmTopology::stacked_lm(1500, &[1500, 1500], 10000);
        let map = build_lstm_iss_groups(&topo, OverlapPolicy::Distinct).unwrap();
        let dense: usize = topo.tensors.iter().map(|t| t.rows * t.cols).sum();
        assert_eq!(dense, 66_022_000);
        let plan = CompactionPlan::from_dropped(&map, &[(373..1500).collect(), (315..1500).collect()]).unwrap();
        assert_eq!(plan.kept_sizes(), vec![373, 315]);
        let shape = |n: &str| plan.tensors.iter().find(|t| t.name == n).map(|t| (t.kept_rows.len(), t.kept_cols.len())).unwrap();
        assert_eq!(shape("lstm.0.weight"), (1500 + 373, 4 * 373));
        assert_eq!(shape("lstm.1.weight"), (373 + 315, 4 * 315));
        assert_eq!(shape("softmax.weight"), (315, 10000));
        let compact = dense - plan.removed_params();
        assert_eq!(compact, 21_824_148);
        assert_eq!((compact as f64 / 1e5).round() / 10.0, 21.8);
    }
}
