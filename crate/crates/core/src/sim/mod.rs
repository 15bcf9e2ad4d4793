//! Deterministic fault and adversary simulation.

pub mod adversary;
pub mod explore;
pub mod net;
pub mod scan;
pub mod scenario;

pub use adversary::{run_redirection_attack, AdversaryReport, FakeSynchronizer};
pub use explore::{explore, ExploreReport, Op};
pub use net::{Exchange, LinkStats, NetControl, SimLink, SimNet};
pub use scan::{scan_bytes, scan_dir, Hit, Sentinel};
pub use scenario::{
    builtin, run, run_key_rotation_race, run_scenario, BackendKind, Mitigation, Scenario, ScenarioReport,
    SimError, World, BUILTIN,
};
