use thiserror::Error;

/// Label value for points without ground truth. Excluded from loss and metrics.
pub const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("{attribute} has {got} entries but the cloud has {expected} points")]
    LengthMismatch {
        attribute: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("color of point {index} is outside [0, 1]")]
    ColorRange { index: usize },
    #[error("label {label} of point {index} is not below the class count {classes}")]
    LabelRange { index: usize, label: u32, classes: usize },
}

/// Positions plus optional per-point signals, all of equal length.
///
/// Values are validated on construction and never mutated afterwards;
/// the `with_*` methods return new clouds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    labels: Option<Vec<u32>>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        if let Some(index) = positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(CloudError::NonFinite { index });
        }
        Ok(Self {
            positions,
            ..Default::default()
        })
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self, CloudError> {
        self.check_len("colors", colors.len())?;
        if let Some(index) = colors
            .iter()
            .position(|c| !c.iter().all(|v| (0.0..=1.0).contains(v)))
        {
            return Err(CloudError::ColorRange { index });
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self, CloudError> {
        self.check_len("labels", labels.len())?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_intensity(mut self, intensity: Vec<f64>) -> Result<Self, CloudError> {
        self.check_len("intensity", intensity.len())?;
        self.intensity = Some(intensity);
        Ok(self)
    }

    pub fn without_colors(mut self) -> Self {
        self.colors = None;
        self
    }

    fn check_len(&self, attribute: &'static str, got: usize) -> Result<(), CloudError> {
        if got != self.positions.len() {
            return Err(CloudError::LengthMismatch {
                attribute,
                expected: self.positions.len(),
                got,
            });
        }
        Ok(())
    }

    /// Checks that every label is either below `classes` or [`UNLABELED`].
    pub fn validate_labels(&self, classes: usize) -> Result<(), CloudError> {
        if let Some(labels) = &self.labels {
            for (index, &label) in labels.iter().enumerate() {
                if label != UNLABELED && label as usize >= classes {
                    return Err(CloudError::LabelRange {
                        index,
                        label,
                        classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    /// New cloud made of the given points, in the given order, with all attributes carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Same attributes with positions replaced point for point.
    pub fn with_positions(&self, positions: Vec<[f64; 3]>) -> Result<PointCloud, CloudError> {
        self.check_len("positions", positions.len())?;
        let fresh = PointCloud::new(positions)?;
        Ok(PointCloud {
            positions: fresh.positions,
            ..self.clone()
        })
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.positions {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.positions.len().max(1) as f64;
        c.map(|v| v / n)
    }
}
