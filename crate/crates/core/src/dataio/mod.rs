//! CIFAR-10/100 ingestion, normalization and checkpoint persistence.

pub mod checkpoint;
pub mod cifar;

pub use checkpoint::{checkpoint_size, load_checkpoint, save_checkpoint};
pub use cifar::{
    denormalize, load_cifar, load_cifar10, load_cifar100, normalize_dataset, parse_cifar,
    CifarKind, Dataset, NormStats, Split,
};
