use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Trainability of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Freeze {
    Learnable,
    Frozen,
    /// Element-wise: `true` marks a frozen element.
    Partial(Vec<bool>),
}

impl Freeze {
    /// Whether at least one element may change.
    pub fn any_learnable(&self) -> bool {
        match self {
            Freeze::Learnable => true,
            Freeze::Frozen => false,
            Freeze::Partial(mask) => mask.iter().any(|&f| !f),
        }
    }

    pub fn is_frozen_at(&self, i: usize) -> bool {
        match self {
            Freeze::Learnable => false,
            Freeze::Frozen => true,
            Freeze::Partial(mask) => mask[i],
        }
    }

    /// Number of learnable elements in a tensor of `len` elements.
    pub fn learnable_count(&self, len: usize) -> usize {
        match self {
            Freeze::Learnable => len,
            Freeze::Frozen => 0,
            Freeze::Partial(mask) => mask.iter().filter(|&&f| !f).count(),
        }
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub freeze: Freeze,
}
