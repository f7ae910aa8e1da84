//! The over-parameterized cell network and its discrete counterpart.

pub mod cell;
pub mod checkpoint;
pub mod network;
pub mod ops;

pub use cell::{cell_edges, Cell, CellPlan, CellType, MixedEdge};
pub use checkpoint::{read_tensors, write_tensors, DType};
pub use network::{BatchStats, Network, SupernetConfig};
pub use ops::{OpInstance, OperatorKind, Preprocess, SepBlock};
