//! Procedural mini-RPM instances: a 3x3 matrix with progressive rules that
//! hold along both rows and columns, 8 context panels, an 8-option pool, and
//! per-instance rule metadata. Panels are rendered as small grayscale
//! rasters.
//!
//! The renderer here is a stand-in for the external benchmark generators it
//! imitates; it aims for legible, deterministic rasters, not pixel fidelity
//! to any published dataset.
//!
//! Panel indexing follows the usual annotation: images 1-8 are the context,
//! 9-16 the options, and the answer index lives in [9, 16].

mod generate;
mod render;
mod rules;
mod serdes;

pub use generate::{generate, DistractorStyle, ForgeConfig};
pub use render::{render_panel, TemplateBank};
pub use rules::{
    grid_satisfies, meta_vocab, vocab_index, Attribute, PanelAttrs, RuleKind, RuleSpec,
    ATTRIBUTES, META_VOCAB_SIZE, RULES,
};
pub use serdes::{read_dataset, write_dataset, DatasetHeader};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("unsatisfiable rule {rule:?} on {attribute:?}: {reason}")]
    Unsatisfiable {
        attribute: Attribute,
        rule: RuleKind,
        reason: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, ForgeError>;

/// One puzzle: 16 rendered panels, their symbolic attribute values, the
/// answer index, and the active rule metadata (attribute-ordered).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PuzzleInstance {
    pub seed: u64,
    pub raster_size: u16,
    /// Panels 0..8 are the context (row-major), 8..16 the option pool.
    pub panels: Vec<PanelAttrs>,
    /// Rendered rasters, one `raster_size^2` byte buffer per panel.
    pub images: Vec<Vec<u8>>,
    /// 1-based answer index in [9, 16].
    pub answer: u8,
    pub metadata: Vec<RuleSpec>,
}

impl PuzzleInstance {
    pub fn context(&self) -> &[PanelAttrs] {
        &self.panels[..8]
    }

    pub fn options(&self) -> &[PanelAttrs] {
        &self.panels[8..16]
    }

    pub fn answer_panel(&self) -> &PanelAttrs {
        &self.panels[self.answer as usize - 1]
    }

    /// Ruleset key for evaluation breakdowns, e.g. `count:ap+shade:d3`.
    pub fn ruleset_key(&self) -> String {
        self.metadata
            .iter()
            .map(|r| format!("{}:{}", r.attribute.short(), r.rule.short()))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// True iff the option (a 1-based index in [9,16], or any panel description
/// via [`verify_panel`]) completes every active rule along both the third
/// row and the third column.
pub fn verify(instance: &PuzzleInstance, option_index: u8) -> bool {
    assert!(
        (9..=16).contains(&option_index),
        "option index {option_index} outside [9,16]"
    );
    verify_panel(instance, &instance.panels[option_index as usize - 1])
}

/// Rule check against a synthesized panel description (used when scoring
/// generated answers that exist only as rasters).
pub fn verify_panel(instance: &PuzzleInstance, candidate: &PanelAttrs) -> bool {
    let mut grid = [PanelAttrs::default(); 9];
    grid[..8].copy_from_slice(&instance.panels[..8]);
    grid[8] = *candidate;
    instance
        .metadata
        .iter()
        .all(|spec| grid_satisfies(&grid, spec))
}
