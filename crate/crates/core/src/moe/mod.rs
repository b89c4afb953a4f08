//! Expert groups, modality-aware routers, the MoE block variants and routing statistics.

pub mod gate;
pub mod layer;
pub mod layout;
pub mod trace;
pub mod upcycle;

pub use gate::{gate_topk, GateDecision};
pub use layer::{dispatch_combine, layer_trace, load_balance_aux, load_balance_value, route, AuxScale, RouterRecord};
pub use layout::{build_expert_layout, Balance, ExpertGroup, ExpertLayout, MoeVariant, RouterKind, RouterSpec, RoutingPlan};
pub use trace::{parse_trace_csv, LayerTrace, ModalityTrace, RoutingTrace, TraceRow};
pub use upcycle::{upcycle_from_dense, upcycle_params, widen_dense_ffn};
