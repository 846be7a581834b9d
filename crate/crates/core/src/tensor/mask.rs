use crate::{Error, Result};

/// Marks which time points of a padded sequence hold real data.
///
/// Valid positions always form a non-empty prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    valid: Vec<bool>,
    valid_len: usize,
}

impl ValidityMask {
    /// Mask of `length` positions with the first `valid_len` valid.
    pub fn prefix(length: usize, valid_len: usize) -> Result<Self> {
        if valid_len == 0 || valid_len > length {
            return Err(Error::Validation(format!(
                "valid length {valid_len} outside [1, {length}]"
            )));
        }
        Ok(Self {
            valid: (0..length).map(|t| t < valid_len).collect(),
            valid_len,
        })
    }

    pub fn all_valid(length: usize) -> Self {
        Self {
            valid: vec![true; length],
            valid_len: length,
        }
    }

    pub fn from_bools(valid: Vec<bool>) -> Result<Self> {
        let valid_len = valid.iter().take_while(|&&v| v).count();
        if valid_len == 0 {
            return Err(Error::Validation("mask has no valid position".into()));
        }
        if valid[valid_len..].iter().any(|&v| v) {
            return Err(Error::Validation(
                "valid positions do not form a contiguous prefix".into(),
            ));
        }
        Ok(Self { valid, valid_len })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    #[inline]
    pub fn is_valid(&self, t: usize) -> bool {
        t < self.valid_len
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }
}
