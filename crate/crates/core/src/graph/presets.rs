//! The shipped architectures, each expressed as an [`ArchConfig`].

use super::{ArchConfig, ArchRow, HeadSpec, ModelGraph, NormActFlags, Operator};
use crate::error::{config_err, Result};

pub const L_MOBILENET: &str = "l-mobilenet";
pub const L_MOBILENET_NARROW: &str = "l-mobilenet-narrow";
pub const MOBILENETV2: &str = "mobilenetv2";
pub const SHUFFLENETV2: &str = "shufflenetv2";

pub const NAMES: [&str; 4] = [L_MOBILENET, L_MOBILENET_NARROW, MOBILENETV2, SHUFFLENETV2];

fn row(op: Operator, expand: usize, c: usize, n: usize, s: usize) -> ArchRow {
    ArchRow::new(op, expand, c, n, s)
}

/// Class count a preset uses when none is given.
pub fn default_classes(name: &str) -> Option<usize> {
    match name {
        L_MOBILENET | L_MOBILENET_NARROW => Some(10),
        MOBILENETV2 | SHUFFLENETV2 => Some(1000),
        _ => None,
    }
}

/// Architecture document of a named preset.
pub fn preset_config(name: &str, classes: Option<usize>) -> Result<ArchConfig> {
    use Operator::*;
    let default = default_classes(name).ok_or_else(|| {
        config_err(format!(
            "unknown preset '{name}' (known: {})",
            NAMES.join(", ")
        ))
    })?;
    let classes = classes.unwrap_or(default);
    let (rows, norm, relu) = match name {
        L_MOBILENET => (
            vec![
                row(Conv3x3, 1, 16, 1, 1),
                row(Lmb, 4, 32, 3, 2),
                row(Lmb, 4, 64, 3, 2),
                row(Lmb, 4, 128, 3, 2),
                row(Lmb, 4, 256, 2, 2),
            ],
            true,
            true,
        ),
        L_MOBILENET_NARROW => (
            vec![
                row(Conv3x3, 1, 8, 1, 1),
                row(Lmb, 4, 16, 2, 2),
                row(Lmb, 4, 32, 2, 2),
            ],
            true,
            true,
        ),
        // Downsampling only at the 64- and 160-wide stages for 32x32 inputs.
        MOBILENETV2 => (
            vec![
                row(Conv3x3, 1, 32, 1, 1),
                row(Mbv2, 1, 16, 1, 1),
                row(Mbv2, 6, 24, 2, 1),
                row(Mbv2, 6, 32, 3, 1),
                row(Mbv2, 6, 64, 4, 2),
                row(Mbv2, 6, 96, 3, 1),
                row(Mbv2, 6, 160, 3, 2),
                row(Mbv2, 6, 320, 1, 1),
                row(Conv1x1, 1, 1280, 1, 1),
            ],
            true,
            false,
        ),
        SHUFFLENETV2 => (
            vec![
                row(Conv3x3, 1, 24, 1, 1),
                row(Snv2, 1, 116, 4, 1),
                row(Snv2, 1, 232, 8, 2),
                row(Snv2, 1, 464, 4, 2),
                row(Conv1x1, 1, 1024, 1, 1),
            ],
            false,
            false,
        ),
        _ => unreachable!("checked above"),
    };
    Ok(ArchConfig {
        name: name.to_string(),
        input: [3, 32, 32],
        rows,
        head: HeadSpec {
            classes,
            norm,
            relu,
        },
        flags: NormActFlags::default(),
    })
}

pub fn preset(name: &str, classes: Option<usize>) -> Result<ModelGraph> {
    preset_config(name, classes)?.build()
}

pub fn preset_lmobilenet(classes: usize) -> Result<ModelGraph> {
    preset(L_MOBILENET, Some(classes))
}

pub fn preset_lmobilenet_narrow(classes: usize) -> Result<ModelGraph> {
    preset(L_MOBILENET_NARROW, Some(classes))
}

pub fn preset_mobilenetv2(classes: usize) -> Result<ModelGraph> {
    preset(MOBILENETV2, Some(classes))
}

pub fn preset_shufflenetv2(classes: usize) -> Result<ModelGraph> {
    preset(SHUFFLENETV2, Some(classes))
}
