//! Shannon and Simpson diversity indices over class distributions.
//!
//! Both indices use the conventions of ecology dataset audits: Shannon
//! entropy in nats with evenness H / ln S, and the inverse Simpson index
//! with evenness D / S. Evenness is 1 exactly when the distribution is
//! uniform over its S classes.

use serde::{Deserialize, Serialize};

use crate::dataset::{class_distribution, ClassDistribution, Manifest};
use crate::error::Result;

/// Evenness of a Shannon entropy value: E = H / ln S, undefined for S = 1.
pub fn shannon_evenness(h: f64, s: usize) -> Option<f64> {
    if s <= 1 {
        None
    } else {
        Some(h / (s as f64).ln())
    }
}

/// Evenness of an inverse Simpson index: E = D / S.
pub fn simpson_evenness(d: f64, s: usize) -> f64 {
    d / s as f64
}

/// Shannon entropy H (natural log, 0 ln 0 = 0) and evenness E = H / ln S.
/// E is undefined (`None`) for a single-class distribution.
pub fn shannon(dist: &ClassDistribution) -> (f64, Option<f64>) {
    let h: f64 = dist
        .probabilities()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let s = dist.n_classes();
    if s == 1 {
        (0.0, None)
    } else {
        (h, shannon_evenness(h, s))
    }
}

/// Inverse Simpson index D = 1 / sum p_i^2 and evenness E = D / S.
pub fn simpson(dist: &ClassDistribution) -> (f64, f64) {
    let sum_sq: f64 = dist.probabilities().iter().map(|&p| p * p).sum();
    let d = 1.0 / sum_sq;
    (d, simpson_evenness(d, dist.n_classes()))
}

/// Complete diversity audit of one class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub shannon_h: f64,
    /// `None` when S = 1 (ln S = 0 makes evenness undefined).
    pub shannon_e: Option<f64>,
    pub simpson_d: f64,
    pub simpson_e: f64,
    #[serde(rename = "S")]
    pub s: usize,
    pub distribution: ClassDistribution,
}

impl DiversityReport {
    pub fn from_distribution(distribution: ClassDistribution) -> Self {
        let (shannon_h, shannon_e) = shannon(&distribution);
        let (simpson_d, simpson_e) = simpson(&distribution);
        DiversityReport {
            shannon_h,
            shannon_e,
            simpson_d,
            simpson_e,
            s: distribution.n_classes(),
            distribution,
        }
    }
}

impl std::fmt::Display for DiversityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ps: Vec<String> = self
            .distribution
            .probabilities()
            .iter()
            .map(|p| format!("{p:.3}"))
            .collect();
        writeln!(f, "distribution   [{}] over S = {}", ps.join(", "), self.s)?;
        match self.shannon_e {
            Some(e) => writeln!(f, "shannon        H = {:.4}  E = {:.4}", self.shannon_h, e)?,
            None => writeln!(f, "shannon        H = {:.4}  E undefined", self.shannon_h)?,
        }
        write!(
            f,
            "simpson        D = {:.4}  E = {:.4}",
            self.simpson_d, self.simpson_e
        )
    }
}

/// Audit a manifest's age-group balance.
pub fn diversity_report(manifest: &Manifest) -> Result<DiversityReport> {
    Ok(DiversityReport::from_distribution(class_distribution(
        manifest,
    )?))
}
