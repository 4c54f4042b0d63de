//! Distance graphs over knowledge neurons and persistence-based clustering.

pub mod filtration;
pub mod graph;
pub mod ntc;

pub use filtration::{merge_tree, persistence_filtration, Bdc, MergeTree, TreeNode};
pub use graph::{adjacent_distance, build_distance_graph, layered_shortest_paths, DistanceGraph, Provenance};
pub use ntc::{
    activate_only, capped_persistences, locate_dkns, ntc_filter, select_bdcs, tau1, DknSet, Localization, LocateParams,
    NestedPolicy, NtcParams, ScoredBdc, Stage,
};

/// Serializes infinite radii as JSON `null`.
pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }

    pub mod matrix {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
        }
    }
}
