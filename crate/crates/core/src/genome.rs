//! The immutable constant set shared by every node of a VMC network.

use core::fmt;

/// Constant VMC parameters.
///
/// The `omega_*` weights shape successin production at free leaves, the
/// `rho_*` weights scale successin as it is relayed through a connected leaf
/// node. Subscripts: `c` constant, `phi` uprightness, `lambda` light.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Genome {
    pub omega_c: f64,
    pub omega_phi: f64,
    pub omega_lambda: f64,
    pub rho_c: f64,
    pub rho_phi: f64,
    pub rho_lambda: f64,
    /// Vessel memory, in `[0, 1)`.
    pub alpha: f64,
    /// Successin amplification exponent, `>= 1`.
    pub beta: f64,
}

impl Genome {
    /// Parameter set used for the braided module experiments.
    pub const BRAID: Genome = Genome {
        omega_c: 0.0,
        omega_phi: 0.5,
        omega_lambda: 0.5,
        rho_c: 0.9,
        rho_phi: 0.1,
        rho_lambda: 0.0,
        alpha: 0.9,
        beta: 2.0,
    };

    pub fn validate(&self) -> Result<(), GenomeError> {
        let unit = [
            ("omega_c", self.omega_c),
            ("omega_phi", self.omega_phi),
            ("omega_lambda", self.omega_lambda),
            ("rho_c", self.rho_c),
            ("rho_phi", self.rho_phi),
            ("rho_lambda", self.rho_lambda),
        ];
        for (name, value) in unit {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(GenomeError { field: name, value });
            }
        }
        if !self.alpha.is_finite() || !(0.0..1.0).contains(&self.alpha) {
            return Err(GenomeError { field: "alpha", value: self.alpha });
        }
        if !self.beta.is_finite() || self.beta < 1.0 {
            return Err(GenomeError { field: "beta", value: self.beta });
        }
        Ok(())
    }
}

impl Default for Genome {
    fn default() -> Self {
        Genome::BRAID
    }
}

/// A genome field outside its admissible range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenomeError {
    pub field: &'static str,
    pub value: f64,
}

impl fmt::Display for GenomeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "genome field `{}` out of range: {}", self.field, self.value)
    }
}

impl core::error::Error for GenomeError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn braid_set_is_valid() {
        Genome::BRAID.validate().unwrap();
        assert_eq!(Genome::default(), Genome::BRAID);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        let mut g = Genome::BRAID;
        g.alpha = 1.0;
        assert_eq!(g.validate().unwrap_err().field, "alpha");

        let mut g = Genome::BRAID;
        g.beta = 0.5;
        assert_eq!(g.validate().unwrap_err().field, "beta");

        let mut g = Genome::BRAID;
        g.rho_phi = f64::NAN;
        assert_eq!(g.validate().unwrap_err().field, "rho_phi");

        let mut g = Genome::BRAID;
        g.omega_c = -0.1;
        assert_eq!(g.validate().unwrap_err().field, "omega_c");
    }
}
