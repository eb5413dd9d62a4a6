//! Adversarial cube optimization: hull-constrained parametrization,
//! embedding augmentations, the bias + non-printability + cloaking loss,
//! and the Adam loop against a frozen detector.

mod embed;
mod losses;
mod optimize;
mod params;
mod transform;

pub use embed::{embed, embed_all};
pub use losses::{
    loss_bias, loss_cloak, loss_cloak_at, loss_nps, loss_total, sample_crop, LossBreakdown,
};
pub use optimize::{
    build_attack_graph, optimize_cube, trace_to_csv, AttackConfig, AttackRun, CubeSize, TraceRow,
};
pub use params::{
    init_params, realize_cube, CubeParams, FreeParams, Parametrization, PatchParams,
};
pub use transform::{sample_transforms, AugmentConfig, Proximity, Transform};
