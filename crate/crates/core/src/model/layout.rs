use super::corr::n_raw;
use super::ModelError;

/// Positions of each parameter block in the flat unconstrained vector.
///
/// Order: `beta_y`, `beta_w`, `log_sd_y`, `log_sd_w`, `corr_chol_raw`,
/// then `z_re` row-major by subject (`q_y + q_w` entries per subject).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p_y: usize,
    pub p_w: usize,
    pub q_y: usize,
    pub q_w: usize,
    pub n_subjects: usize,
}

impl Layout {
    /// Random effects per subject.
    pub fn k(&self) -> usize {
        self.q_y + self.q_w
    }

    pub fn n_corr(&self) -> usize {
        n_raw(self.k())
    }

    pub fn beta_y(&self) -> std::ops::Range<usize> {
        0..self.p_y
    }

    pub fn beta_w(&self) -> std::ops::Range<usize> {
        let s = self.p_y;
        s..s + self.p_w
    }

    pub fn log_sd_y(&self) -> std::ops::Range<usize> {
        let s = self.p_y + self.p_w;
        s..s + self.q_y
    }

    pub fn log_sd_w(&self) -> std::ops::Range<usize> {
        let s = self.log_sd_y().end;
        s..s + self.q_w
    }

    /// Both SD blocks together (location first).
    pub fn log_sd(&self) -> std::ops::Range<usize> {
        self.log_sd_y().start..self.log_sd_w().end
    }

    pub fn corr(&self) -> std::ops::Range<usize> {
        let s = self.log_sd_w().end;
        s..s + self.n_corr()
    }

    pub fn z(&self) -> std::ops::Range<usize> {
        let s = self.corr().end;
        s..s + self.n_subjects * self.k()
    }

    pub fn z_subject(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.corr().end + i * self.k();
        s..s + self.k()
    }

    pub fn dim(&self) -> usize {
        self.z().end
    }
}

/// Unconstrained sampling coordinates tagged with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.dim()],
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != layout.dim() {
            return Err(ModelError::Dimension {
                what: "parameter vector",
                expected: layout.dim(),
                actual: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn beta_y(&self) -> &[f64] {
        &self.values[self.layout.beta_y()]
    }

    pub fn beta_y_mut(&mut self) -> &mut [f64] {
        let r = self.layout.beta_y();
        &mut self.values[r]
    }

    pub fn beta_w(&self) -> &[f64] {
        &self.values[self.layout.beta_w()]
    }

    pub fn beta_w_mut(&mut self) -> &mut [f64] {
        let r = self.layout.beta_w();
        &mut self.values[r]
    }

    pub fn log_sd_y(&self) -> &[f64] {
        &self.values[self.layout.log_sd_y()]
    }

    pub fn log_sd_w(&self) -> &[f64] {
        &self.values[self.layout.log_sd_w()]
    }

    pub fn log_sd_mut(&mut self) -> &mut [f64] {
        let r = self.layout.log_sd();
        &mut self.values[r]
    }

    pub fn corr_chol_raw(&self) -> &[f64] {
        &self.values[self.layout.corr()]
    }

    pub fn corr_chol_raw_mut(&mut self) -> &mut [f64] {
        let r = self.layout.corr();
        &mut self.values[r]
    }

    pub fn z_re(&self) -> &[f64] {
        &self.values[self.layout.z()]
    }

    pub fn z_re_mut(&mut self) -> &mut [f64] {
        let r = self.layout.z();
        &mut self.values[r]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_tile_the_vector() {
        let l = Layout {
            p_y: 3,
            p_w: 3,
            q_y: 2,
            q_w: 1,
            n_subjects: 4,
        };
        assert_eq!(l.beta_y(), 0..3);
        assert_eq!(l.beta_w(), 3..6);
        assert_eq!(l.log_sd_y(), 6..8);
        assert_eq!(l.log_sd_w(), 8..9);
        assert_eq!(l.corr(), 9..12);
        assert_eq!(l.z(), 12..24);
        assert_eq!(l.z_subject(2), 18..21);
        assert_eq!(l.dim(), 24);
    }

    #[test]
    fn no_random_effects_has_no_corr_or_z() {
        let l = Layout {
            p_y: 2,
            p_w: 1,
            q_y: 0,
            q_w: 0,
            n_subjects: 10,
        };
        assert_eq!(l.dim(), 3);
        assert!(l.corr().is_empty() && l.z().is_empty());
    }
}
