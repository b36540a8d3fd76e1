//! Noise schedule, closed-form mixture denoiser and the deterministic sampler.

pub mod prior;
pub mod sampler;
pub mod schedule;

pub use prior::{
    analytic_epsilon, analytic_epsilon_with_jacobian, guided_epsilon, MixturePrior,
    NoiseJacobian, NoisePredictor, PriorComponent, PriorSpec,
};
pub use sampler::{
    ddim_step, guidance_profile, sample, DetailHook, Hooks, SamplerConfig, StepCoefficients,
    StructureHook, Trajectory,
};
pub use schedule::{forward_noise, NoiseSchedule, ScheduleKind};
