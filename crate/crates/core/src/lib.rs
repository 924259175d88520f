pub mod behavior;
pub mod blocknet;
pub mod facestar;
pub mod kinematics;
pub mod lattice;
pub mod planner;
pub mod sim;
pub mod text;

pub use behavior::{ActionCosts, AgentState, BehaviorKind, WorldCommand};
pub use blocknet::{HopConvention, LatencyModel, Payload};
pub use facestar::{face_star, PathPlan, PlanError};
pub use kinematics::{is_reachable_and_collision_free, InchwormGeometry, Pose};
pub use lattice::{
    check_buildable, BlockState, Blueprint, BlueprintError, Buildability, Face, FaceDir, GridCoord, LatticeError,
    Structure,
};
pub use planner::{Division, DivisionState, PlannerError, PlannerState};
pub use sim::{run, run_traced, FeedSchedule, RunMetrics, Scenario, SimError, TraceRecord};
pub use text::{format_blueprint, parse_blueprint, ParseError};
