//! Column layouts of the four modality feature vectors.

/// Agent states, used by both history and interactions.
pub mod agent {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const VX: usize = 2;
    pub const VY: usize = 3;
    pub const AX: usize = 4;
    pub const AY: usize = 5;
    pub const BOX_LENGTH: usize = 6;
    pub const BOX_WIDTH: usize = 7;
    pub const SIN: usize = 8;
    pub const COS: usize = 9;
    pub const WIDTH: usize = 10;
}

/// Roadgraph segments: two endpoints, unit direction, one-hot type.
pub mod road {
    pub const X0: usize = 0;
    pub const Y0: usize = 1;
    pub const X1: usize = 2;
    pub const Y1: usize = 3;
    pub const DX: usize = 4;
    pub const DY: usize = 5;
    /// First column of the one-hot type block.
    pub const TYPE: usize = 6;
    pub const TYPES: usize = 3;
    pub const LANE: usize = 0;
    pub const EDGE: usize = 1;
    pub const STOP_LINE: usize = 2;
    pub const WIDTH: usize = TYPE + TYPES;
}

/// Traffic lights: position, one-hot state, confidence.
pub mod light {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    /// First column of the one-hot state block.
    pub const STATE: usize = 2;
    pub const STATES: usize = 3;
    pub const RED: usize = 0;
    pub const YELLOW: usize = 1;
    pub const GREEN: usize = 2;
    pub const CONFIDENCE: usize = STATE + STATES;
    pub const WIDTH: usize = CONFIDENCE + 1;
}
