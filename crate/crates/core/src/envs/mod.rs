//! Demonstration environments: the swing-up pendulum and the goal-reaching arm.

pub mod arm;
pub mod dataset;
pub mod pendulum;

pub use arm::{arm_render, generate_arm_dataset, ArmTaskConfig, ObsConfig, ObsKind};
pub use dataset::{DemoMeta, Demonstration, Record};
pub use pendulum::{
    demonstrator_action, generate_pendulum_dataset, pendulum_energy, pendulum_step, DemonstratorConfig, PendulumDataConfig, PendulumMode,
    PendulumPhysics, PendulumState,
};
