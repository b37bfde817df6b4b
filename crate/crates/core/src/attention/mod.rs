//! Exact and cluster-approximated attention for one decode step.

mod decode;
mod exact;
mod lookup;
mod partial;

pub use decode::{decode_step_attention, AttentionMode, HeadCache, HeadStep, StageTimes, StepAttention};
pub use exact::{exact_attention, exact_weights, sparse_exact_partial, RotatedKeys};
pub use lookup::{
    aggregate_gqa, centroid_replacement_partial, centroid_scores, flat_lookup, hierarchical_lookup,
    select_clusters, ClusterScore, Lookup, Selection,
};
pub use partial::{merge_partials, AttentionPartial};
