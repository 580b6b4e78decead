//! Truncated Fock-space layout for the three modes: data qubit D, coupler C,
//! emitter E. Basis index = (i_D * levels_C + i_C) * levels_E + i_E, so the
//! emitter index varies fastest.

use crate::cxmat::CMat;
use crate::error::{Error, Result};
use num_complex::Complex64 as C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HilbertSpec {
    pub levels_d: usize,
    pub levels_c: usize,
    pub levels_e: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    D,
    C,
    E,
}

impl Default for HilbertSpec {
    fn default() -> Self {
        HilbertSpec { levels_d: 3, levels_c: 3, levels_e: 3 }
    }
}

impl HilbertSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("levels_d", self.levels_d), ("levels_c", self.levels_c), ("levels_e", self.levels_e)] {
            if l < 2 {
                return Err(Error::InvalidParam(format!("{name} must be >= 2, got {l}")));
            }
        }
        if self.dim() > 125 {
            return Err(Error::InvalidParam(format!(
                "total dimension {} exceeds the desk-scale cap of 125",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.levels_d * self.levels_c * self.levels_e
    }

    pub fn index(&self, i_d: usize, i_c: usize, i_e: usize) -> usize {
        debug_assert!(i_d < self.levels_d && i_c < self.levels_c && i_e < self.levels_e);
        (i_d * self.levels_c + i_c) * self.levels_e + i_e
    }

    pub fn levels_of(&self, idx: usize) -> (usize, usize, usize) {
        let i_e = idx % self.levels_e;
        let rest = idx / self.levels_e;
        (rest / self.levels_c, rest % self.levels_c, i_e)
    }

    fn mode_len(&self, mode: Mode) -> usize {
        match mode {
            Mode::D => self.levels_d,
            Mode::C => self.levels_c,
            Mode::E => self.levels_e,
        }
    }

    /// Dense lowering operator of one mode on the full product space.
    pub fn lowering(&self, mode: Mode) -> CMat {
        let dim = self.dim();
        let mut a = CMat::zeros(dim, dim);
        for col in 0..dim {
            let (d, c, e) = self.levels_of(col);
            let (lev, rebuilt): (usize, Box<dyn Fn(usize) -> usize>) = match mode {
                Mode::D => (d, Box::new(move |x| (x * self.levels_c + c) * self.levels_e + e)),
                Mode::C => (c, Box::new(move |x| (d * self.levels_c + x) * self.levels_e + e)),
                Mode::E => (e, Box::new(move |x| (d * self.levels_c + c) * self.levels_e + x)),
            };
            if lev > 0 {
                a[(rebuilt(lev - 1), col)] = C64::new((lev as f64).sqrt(), 0.0);
            }
        }
        let _ = self.mode_len(mode);
        a
    }

    /// Dense number operator of one mode on the full product space.
    pub fn number(&self, mode: Mode) -> CMat {
        let dim = self.dim();
        let mut n = CMat::zeros(dim, dim);
        for i in 0..dim {
            let (d, c, e) = self.levels_of(i);
            let lev = match mode {
                Mode::D => d,
                Mode::C => c,
                Mode::E => e,
            };
            n[(i, i)] = C64::new(lev as f64, 0.0);
        }
        n
    }
}
