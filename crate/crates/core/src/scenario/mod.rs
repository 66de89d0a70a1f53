//! Interest layouts, network topologies, ground truth and data generators.

mod cr;
mod layout;
mod synthetic;
mod topology;

pub use cr::{cr_basis, cr_gen_observation, CrParams, CrScenario};
pub use layout::{BlockId, Cluster, InterestLayout};
pub use synthetic::{
    ar1_toeplitz, draw_ar_params, gen_noise, gen_observation, gen_regressor, ArDraw, ArParams,
    GroundTruth, Observation, RegressorStats,
};
pub use topology::{validate_topology, Topology, TopologyDiagnostics};

#[cfg(test)]
#[allow(unused_imports)]
pub(crate) use layout::tests::validation_layout;
