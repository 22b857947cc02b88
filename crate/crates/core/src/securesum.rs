//! Modular-arithmetic primitives for the ring secure-sum.
//!
//! Every value lives in `[0, m)` for a ring size `m >= 2`. The initiator
//! offsets its own input by a uniform mask `r`, each following node adds its
//! input, and the initiator removes `r` from the final value. Subtracting two
//! consecutive masked values recovers the input added in between, which is
//! what colluding neighbours exploit.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArithError {
    #[error("modulus must be at least 2, got {0}")]
    ModulusTooSmall(u64),
    #[error("{what} value {value} is outside [0, {modulus})")]
    OutOfRange {
        what: &'static str,
        value: u64,
        modulus: u64,
    },
}

/// Ring size for all protocol arithmetic.
///
/// Callers must keep the true aggregate strictly below the modulus;
/// otherwise the unmasked result is the aggregate reduced mod `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Modulus(u64);

impl Modulus {
    pub fn new(m: u64) -> Result<Self, ArithError> {
        if m < 2 {
            return Err(ArithError::ModulusTooSmall(m));
        }
        Ok(Modulus(m))
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }

    fn check(self, what: &'static str, value: u64) -> Result<u64, ArithError> {
        if value < self.0 {
            Ok(value)
        } else {
            Err(ArithError::OutOfRange {
                what,
                value,
                modulus: self.0,
            })
        }
    }

    /// `(a + b) mod m` for reduced operands, valid for the full `u64` range.
    #[inline]
    pub fn add(self, a: u64, b: u64) -> u64 {
        debug_assert!(a < self.0 && b < self.0);
        let (s, overflow) = a.overflowing_add(b);
        if overflow || s >= self.0 {
            s.wrapping_sub(self.0)
        } else {
            s
        }
    }

    /// `(a - b) mod m` for reduced operands.
    #[inline]
    pub fn sub(self, a: u64, b: u64) -> u64 {
        debug_assert!(a < self.0 && b < self.0);
        if a >= b {
            a - b
        } else {
            a.wrapping_sub(b).wrapping_add(self.0)
        }
    }
}

impl TryFrom<u64> for Modulus {
    type Error = ArithError;

    fn try_from(m: u64) -> Result<Self, Self::Error> {
        Modulus::new(m)
    }
}

impl From<Modulus> for u64 {
    fn from(m: Modulus) -> u64 {
        m.0
    }
}

impl fmt::Display for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

macro_rules! residue {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(u64);

        impl $name {
            pub fn new(value: u64, m: Modulus) -> Result<Self, ArithError> {
                m.check($what, value).map($name)
            }

            #[inline]
            pub fn get(self) -> u64 {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

residue!(
    /// A source's private input.
    PrivateValue,
    "private"
);
residue!(
    /// The initiator's secret offset; never leaves the initiator.
    InitialMask,
    "mask"
);
residue!(
    /// Running masked partial sum carried around the ring.
    MaskedValue,
    "masked"
);
residue!(
    /// The unmasked total.
    AggregateSum,
    "sum"
);

pub fn mask_initial(x: u64, r: u64, m: Modulus) -> Result<MaskedValue, ArithError> {
    let x = m.check("private", x)?;
    let r = m.check("mask", r)?;
    Ok(MaskedValue(m.add(r, x)))
}

pub fn chain_add(prev: u64, x: u64, m: Modulus) -> Result<MaskedValue, ArithError> {
    let prev = m.check("masked", prev)?;
    let x = m.check("private", x)?;
    Ok(MaskedValue(m.add(prev, x)))
}

/// Removes the initiator's mask from the last masked value of the ring.
pub fn unmask(last: u64, r: u64, m: Modulus) -> Result<AggregateSum, ArithError> {
    let last = m.check("masked", last)?;
    let r = m.check("mask", r)?;
    Ok(AggregateSum(m.sub(last, r)))
}

/// Difference of two consecutive masked values: the input added between them.
pub fn collusion_recover(current: u64, prev: u64, m: Modulus) -> Result<PrivateValue, ArithError> {
    let current = m.check("masked", current)?;
    let prev = m.check("masked", prev)?;
    Ok(PrivateValue(m.sub(current, prev)))
}

/// Runs the whole chain for `values` under mask `r`, returning every masked
/// value in visitation order (`R_1..R_N`).
pub fn masked_chain(values: &[u64], r: u64, m: Modulus) -> Result<Vec<MaskedValue>, ArithError> {
    let mut out = Vec::with_capacity(values.len());
    let mut iter = values.iter();
    if let Some(&first) = iter.next() {
        let mut acc = mask_initial(first, r, m)?;
        out.push(acc);
        for &x in iter {
            acc = chain_add(acc.get(), x, m)?;
            out.push(acc);
        }
    }
    Ok(out)
}
