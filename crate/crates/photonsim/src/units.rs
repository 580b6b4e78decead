//! Unit conversions. Internally everything is angular (rad/s) and seconds;
//! these helpers convert to and from the cyclic units used in configs and
//! output files.

pub use std::f64::consts::TAU;

/// Cyclic GHz to angular rad/s.
pub fn ghz(f: f64) -> f64 {
    TAU * f * 1e9
}

/// Cyclic MHz to angular rad/s.
pub fn mhz(f: f64) -> f64 {
    TAU * f * 1e6
}

/// Cyclic kHz to angular rad/s.
pub fn khz(f: f64) -> f64 {
    TAU * f * 1e3
}

/// Angular rad/s to cyclic GHz.
pub fn to_ghz(w: f64) -> f64 {
    w / (TAU * 1e9)
}

/// Angular rad/s to cyclic MHz.
pub fn to_mhz(w: f64) -> f64 {
    w / (TAU * 1e6)
}

/// Angular rad/s to cyclic kHz.
pub fn to_khz(w: f64) -> f64 {
    w / (TAU * 1e3)
}

pub fn us(t: f64) -> f64 {
    t * 1e-6
}

pub fn ns(t: f64) -> f64 {
    t * 1e-9
}

pub fn to_ns(t: f64) -> f64 {
    t * 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        assert!((to_ghz(ghz(4.771)) - 4.771).abs() < 1e-12);
        assert!((to_mhz(mhz(-224.0)) + 224.0).abs() < 1e-12);
        assert!((to_khz(khz(5.63)) - 5.63).abs() < 1e-12);
        assert!((to_ns(ns(50.5)) - 50.5).abs() < 1e-12);
        assert!((us(28.3) - 2.83e-5).abs() < 1e-18);
    }

    #[test]
    fn ghz_is_angular() {
        assert!((ghz(1.0) - TAU * 1e9).abs() < 1.0);
    }
}
