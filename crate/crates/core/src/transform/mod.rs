//! Skeleton-to-grid transforms: up-sampling, graph-node index transform and
//! the progressive cascade of both.

mod binarize;
mod cascade;

pub use binarize::{
    assign, assign_bijective, assign_rowwise, assign_surjective, binarize, binarize_bijective, binarize_rowwise,
    binarize_surjective, GitMode, GreedyOrder,
};
pub use cascade::{
    git_apply, lambda_name, parse_grid_list, phi_name, psi_name, upt_apply, Cascade, Git, GridSize, Stage,
    StageConfig, Upt,
};
