//! Generation-aware anchor regularization with a two-stage gate.
//!
//! The coarse stage pulls geometry and color toward the recorded anchors; the
//! fine stage pulls only the semantic features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layout, GaussianCloud};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Coarse,
    Fine,
}

/// Stage indicator with a one-way Coarse → Fine transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageGate {
    stage: Stage,
}

impl StageGate {
    pub fn new(stage: Stage) -> Self {
        Self { stage }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// `(θ_c, θ_f)`.
    pub fn theta(&self) -> (f64, f64) {
        match self.stage {
            Stage::Coarse => (1.0, 0.0),
            Stage::Fine => (0.0, 1.0),
        }
    }

    /// Switch to the fine stage. Returns `false` if already there.
    pub fn advance(&mut self) -> bool {
        let moved = self.stage == Stage::Coarse;
        self.stage = Stage::Fine;
        moved
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorConfig {
    pub lambda_base: f64,
    /// Per-round growth factor, > 1.
    pub growth: f64,
    pub cap: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            lambda_base: 0.1,
            growth: 1.5,
            cap: 1.0,
        }
    }
}

impl AnchorConfig {
    /// Strength for a Gaussian that has survived `age` densification rounds.
    pub fn strength(&self, age: u32) -> f64 {
        (self.lambda_base * self.growth.powi(age.min(i32::MAX as u32) as i32)).min(self.cap)
    }
}

/// Snapshot every Gaussian's live state as its anchor.
pub fn anchor_record(cloud: &mut GaussianCloud) {
    for g in &mut cloud.gaussians {
        g.anchor = Some(g.params.clone());
    }
}

/// Coordinate groups penalized in each stage, as row ranges.
pub fn gated_groups(stage: Stage, feature_dim: usize) -> Vec<std::ops::Range<usize>> {
    match stage {
        Stage::Coarse => vec![
            layout::POSITION,
            layout::LOG_SCALE,
            layout::ROTATION,
            layout::OPACITY..layout::OPACITY + 1,
            layout::COLOR,
        ],
        Stage::Fine => vec![layout::feature(feature_dim)],
    }
}

/// Anchor loss and its gradient in row layout (`len × stride`). Each property
/// contributes the mean of its squared coordinate deviations, weighted by the
/// Gaussian's age-dependent strength.
pub fn anchor_loss(cloud: &GaussianCloud, stage: Stage, cfg: &AnchorConfig) -> Result<(f64, Vec<f64>)> {
    let stride = cloud.stride();
    let groups = gated_groups(stage, cloud.feature_dim);
    let mut grad = vec![0.0; cloud.len() * stride];
    let mut live = vec![0.0; stride];
    let mut anchor = vec![0.0; stride];
    let mut loss = 0.0;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let a = g.anchor.as_ref().ok_or(Error::MissingAnchor { index: i })?;
        let age = cloud.round.saturating_sub(g.generation);
        let lambda = cfg.strength(age);
        g.params.write_row(&mut live);
        a.write_row(&mut anchor);
        let row = &mut grad[i * stride..(i + 1) * stride];
        for r in &groups {
            if r.is_empty() {
                continue;
            }
            let inv = 1.0 / r.len() as f64;
            for k in r.clone() {
                let d = live[k] - anchor[k];
                loss += lambda * d * d * inv;
                row[k] = 2.0 * lambda * d * inv;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gaussian, GaussianParams};

    fn one(feature_dim: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new(feature_dim);
        c.push(Gaussian::new(GaussianParams::new([0.0, 0.0, 2.0], 0.1, 0.5, [0.2, 0.3, 0.4], feature_dim)))
            .unwrap();
        c
    }

    #[test]
    fn strength_schedule() {
        let cfg = AnchorConfig::default();
        assert!((cfg.strength(0) - 0.1).abs() < 1e-15);
        assert!((cfg.strength(2) - 0.225).abs() < 1e-15);
        assert_eq!(cfg.strength(50), 1.0);
        for a in 0..20 {
            assert!(cfg.strength(a + 1) >= cfg.strength(a));
        }
    }

    #[test]
    fn missing_anchor_is_an_error() {
        let c = one(2);
        assert!(matches!(
            anchor_loss(&c, Stage::Coarse, &AnchorConfig::default()),
            Err(Error::MissingAnchor { index: 0 })
        ));
    }

    #[test]
    fn displaced_position_closed_form() {
        let mut c = one(4);
        anchor_record(&mut c);
        let d = 0.3;
        c.gaussians[0].params.position[0] += d;
        let cfg = AnchorConfig {
            lambda_base: 0.7,
            growth: 1.5,
            cap: 10.0,
        };
        let (l, _) = anchor_loss(&c, Stage::Coarse, &cfg).unwrap();
        assert!((l - 0.7 * d * d / 3.0).abs() < 1e-15);
        let (l, g) = anchor_loss(&c, Stage::Fine, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fine_stage_feature_closed_form() {
        let mut c = one(4);
        anchor_record(&mut c);
        let e = [0.1, -0.2, 0.3, 0.0];
        for k in 0..4 {
            c.gaussians[0].params.feature[k] += e[k];
        }
        c.gaussians[0].params.color[1] += 0.5;
        let cfg = AnchorConfig::default();
        let (l, _) = anchor_loss(&c, Stage::Fine, &cfg).unwrap();
        let mean: f64 = e.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((l - 0.1 * mean).abs() < 1e-15);
    }

    #[test]
    fn record_is_idempotent_and_keeps_generation() {
        let mut c = one(2);
        c.round = 3;
        c.gaussians[0].generation = 2;
        anchor_record(&mut c);
        c.gaussians[0].params.opacity_logit = 1.3;
        anchor_record(&mut c);
        let snap = c.clone();
        anchor_record(&mut c);
        assert_eq!(c, snap);
        assert_eq!(c.gaussians[0].anchor.as_ref().unwrap().opacity_logit, 1.3);
        assert_eq!(c.gaussians[0].generation, 2);
        assert_eq!(anchor_loss(&c, Stage::Coarse, &AnchorConfig::default()).unwrap().0, 0.0);
    }

    #[test]
    fn gate_moves_once() {
        let mut g = StageGate::default();
        assert_eq!(g.theta(), (1.0, 0.0));
        assert!(g.advance());
        assert!(!g.advance());
        assert_eq!(g.theta(), (0.0, 1.0));
    }
}
