//! Loss, initialization, optimizer, schedule, gradient checking and the
//! training loop.

pub mod fit;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod optim;

pub use fit::{evaluate, fit, fit_with, EpochRecord, TrainLog};
pub use gradcheck::{battery, grad_check, GradCheckConfig, GradCheckReport, KindCheck, ToyCase};
pub use init::{xavier_bound, xavier_init, xavier_init_conv};
pub use loss::{argmax_rows, softmax_xent};
pub use optim::{lr_at_epoch, nag_step, nag_update, OptimConfig, OptimState};
