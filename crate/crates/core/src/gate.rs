//! The sixteen two-input Boolean gates and their real-valued relaxations.
//!
//! A gate's index is its truth table read as a 4-bit number with the output
//! at `(a, b)` stored in bit `2a + b`. So `FALSE = 0`, `AND = 8` (only the
//! `(1,1)` bit set), `OR = 14` and `TRUE = 15`.
//!
//! The relaxation of every gate is its multilinear extension, i.e. the
//! expected output when `a` and `b` are independent Bernoulli variables. It is
//! evaluated in the expanded form `c0 + c1·a + c2·b + c3·ab` with integer
//! coefficients, which reduces to exactly `a·b` for AND and `a + b − a·b` for
//! OR.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct GateKind(u8);

const NAMES: [&str; 16] = [
    "FALSE",
    "NOR",
    "NOT_A_AND_B",
    "NOT_A",
    "A_AND_NOT_B",
    "NOT_B",
    "XOR",
    "NAND",
    "AND",
    "XNOR",
    "B",
    "NOT_A_OR_B",
    "A",
    "A_OR_NOT_B",
    "OR",
    "TRUE",
];

impl GateKind {
    pub const COUNT: usize = 16;

    pub const FALSE: GateKind = GateKind(0);
    pub const NOR: GateKind = GateKind(1);
    pub const NOT_A_AND_B: GateKind = GateKind(2);
    pub const NOT_A: GateKind = GateKind(3);
    pub const A_AND_NOT_B: GateKind = GateKind(4);
    pub const NOT_B: GateKind = GateKind(5);
    pub const XOR: GateKind = GateKind(6);
    pub const NAND: GateKind = GateKind(7);
    pub const AND: GateKind = GateKind(8);
    pub const XNOR: GateKind = GateKind(9);
    pub const B: GateKind = GateKind(10);
    pub const NOT_A_OR_B: GateKind = GateKind(11);
    /// Pass-through of the first input.
    pub const A: GateKind = GateKind(12);
    pub const A_OR_NOT_B: GateKind = GateKind(13);
    pub const OR: GateKind = GateKind(14);
    pub const TRUE: GateKind = GateKind(15);

    pub const ALL: [GateKind; 16] = {
        let mut all = [GateKind(0); 16];
        let mut i = 0;
        while i < 16 {
            all[i] = GateKind(i as u8);
            i += 1;
        }
        all
    };

    pub const fn from_index(index: u8) -> Option<GateKind> {
        if index < 16 {
            Some(GateKind(index))
        } else {
            None
        }
    }

    #[inline]
    pub const fn index(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize]
    }

    /// Truth table as `[t00, t01, t10, t11]`.
    pub const fn truth_table(self) -> [bool; 4] {
        [
            self.0 & 1 != 0,
            self.0 & 2 != 0,
            self.0 & 4 != 0,
            self.0 & 8 != 0,
        ]
    }

    #[inline]
    pub const fn eval(self, a: bool, b: bool) -> bool {
        let corner = ((a as u8) << 1) | (b as u8);
        (self.0 >> corner) & 1 == 1
    }

    /// Coefficients `(c0, c1, c2, c3)` of the relaxation `c0 + c1·a + c2·b + c3·ab`.
    #[inline]
    pub fn coefficients(self) -> (f64, f64, f64, f64) {
        let [t00, t01, t10, t11] = self.truth_table().map(|t| t as i8);
        (
            t00 as f64,
            (t10 - t00) as f64,
            (t01 - t00) as f64,
            (t11 - t10 - t01 + t00) as f64,
        )
    }

    /// Real-valued relaxation on `[0,1]²`.
    #[inline]
    pub fn relaxed(self, a: f64, b: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        let (c0, c1, c2, c3) = self.coefficients();
        (c0 + c1 * a + c2 * b + c3 * (a * b)).clamp(0.0, 1.0)
    }

    /// `(∂g/∂a, ∂g/∂b)` of the relaxation.
    #[inline]
    pub fn relaxed_partials(self, a: f64, b: f64) -> (f64, f64) {
        let (_, c1, c2, c3) = self.coefficients();
        (c1 + c3 * b, c2 + c3 * a)
    }

    /// Bitwise evaluation over 64 independent lanes. Lanes beyond the valid
    /// range may come out set for gates that negate; callers mask them.
    #[inline]
    pub const fn eval_word(self, a: u64, b: u64) -> u64 {
        match self.0 {
            0 => 0,
            1 => !(a | b),
            2 => !a & b,
            3 => !a,
            4 => a & !b,
            5 => !b,
            6 => a ^ b,
            7 => !(a & b),
            8 => a & b,
            9 => !(a ^ b),
            10 => b,
            11 => !a | b,
            12 => a,
            13 => a | !b,
            14 => a | b,
            _ => !0,
        }
    }
}

impl fmt::Debug for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.name(), self.0)
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for GateKind {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        GateKind::from_index(value).ok_or_else(|| format!("gate index {value} out of range"))
    }
}

impl From<GateKind> for u8 {
    fn from(g: GateKind) -> u8 {
        g.0
    }
}
