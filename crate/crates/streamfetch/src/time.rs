//! Virtual time. All simulation-side timing is expressed in microseconds on
//! a synthetic clock so test runs never sleep; the live daemon maps wall
//! time onto the same type.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

/// A point on the virtual clock, in microseconds since an arbitrary origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn from_micros(us: u64) -> Self {
        VirtualTime(us)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    /// Microseconds elapsed since `earlier`, saturating at zero.
    pub fn since(self, earlier: VirtualTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for VirtualTime {
    type Output = VirtualTime;
    fn add(self, us: u64) -> VirtualTime {
        VirtualTime(self.0 + us)
    }
}

impl AddAssign<u64> for VirtualTime {
    fn add_assign(&mut self, us: u64) {
        self.0 += us;
    }
}

impl Sub for VirtualTime {
    type Output = u64;
    fn sub(self, rhs: VirtualTime) -> u64 {
        self.0.saturating_sub(rhs.0)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}
