//! Training objectives.
//!
//! * task / fine-tuning loss: mean next-token cross-entropy;
//! * distillation loss: softened KL divergence against a detached teacher;
//! * server losses: `L_f = CE(llm) + λ·KD(llm ← slm)` and
//!   `L_g = CE(slm) + λ·KD(slm ← llm)`.
//!
//! Each model only ever sees the other's logits as a constant, so one
//! backward pass over `L_f + L_g` yields `∇_ω L_f` and `∇_θ L_g` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, KlDirection, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub lambda: f64,
    pub temperature: f64,
    #[serde(default)]
    pub direction: KlDirection,
}

impl Default for DistillWeights {
    fn default() -> Self {
        DistillWeights {
            lambda: 1.0,
            temperature: 1.0,
            direction: KlDirection::TeacherStudent,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// `(row, class)` pairs for next-token prediction: row `t` predicts `tokens[t + 1]`.
pub fn next_token_pairs(tokens: &[usize]) -> Vec<(usize, usize)> {
    tokens.windows(2).enumerate().map(|(t, w)| (t, w[1])).collect()
}

fn check_rows(g: &Graph<'_>, logits: NodeId, targets: &[usize]) -> Result<()> {
    let shape = g.shape(logits);
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Input(format!(
            "logits {shape:?} do not line up with {} targets",
            targets.len()
        )));
    }
    if targets.len() < 2 {
        return Err(Error::Input("next-token loss needs at least 2 tokens".into()));
    }
    Ok(())
}

/// Summed next-token cross-entropy times `scale`.
pub fn scaled_token_loss(g: &mut Graph<'_>, logits: NodeId, targets: &[usize], scale: f64) -> Result<NodeId> {
    check_rows(g, logits, targets)?;
    g.cross_entropy(logits, &next_token_pairs(targets), scale)
}

/// Mean next-token cross-entropy. `targets` is the input sequence itself;
/// row `t` of `logits` is scored against `targets[t + 1]`.
pub fn task_loss(g: &mut Graph<'_>, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let n = targets.len().saturating_sub(1).max(1);
    scaled_token_loss(g, logits, targets, 1.0 / n as f64)
}

/// Supervised fine-tuning loss on the auxiliary data; same form as [`task_loss`].
pub fn ft_loss(g: &mut Graph<'_>, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    task_loss(g, logits, targets)
}

/// `τ² · mean_rows KL` between softened distributions. The teacher's
/// current values are copied in as constants; no gradient reaches it.
pub fn kd_loss(g: &mut Graph<'_>, student: NodeId, teacher: NodeId, w: &DistillWeights) -> Result<NodeId> {
    w.validate()?;
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::Input(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            g.shape(student),
            g.shape(teacher)
        )));
    }
    let teacher_values = g.value(teacher).to_vec();
    g.kl_div(student, &teacher_values, w.temperature, w.direction)
}

/// Graph handles for the two server objectives and their components.
#[derive(Debug, Clone, Copy)]
pub struct ServerLosses {
    pub l_f: NodeId,
    pub l_g: NodeId,
    pub ft_f: NodeId,
    pub ft_g: NodeId,
    pub kd_f: NodeId,
    pub kd_g: NodeId,
}

impl ServerLosses {
    /// `L_f + L_g`, whose gradient splits cleanly between the two adapters.
    pub fn total(&self, g: &mut Graph<'_>) -> Result<NodeId> {
        g.add(self.l_f, self.l_g)
    }
}

/// Mutual-transfer objectives for one sequence of auxiliary data.
/// `weight` scales every term (used for token-weighted batching).
pub fn server_losses_weighted(
    g: &mut Graph<'_>,
    llm_logits: NodeId,
    slm_logits: NodeId,
    targets: &[usize],
    w: &DistillWeights,
    weight: f64,
) -> Result<ServerLosses> {
    w.validate()?;
    check_rows(g, llm_logits, targets)?;
    check_rows(g, slm_logits, targets)?;
    let n = (targets.len() - 1) as f64;
    let ft_f = scaled_token_loss(g, llm_logits, targets, weight / n)?;
    let ft_g = scaled_token_loss(g, slm_logits, targets, weight / n)?;
    let kd_f = kd_loss(g, llm_logits, slm_logits, w)?;
    let kd_g = kd_loss(g, slm_logits, llm_logits, w)?;
    let kd_f = g.scale(kd_f, weight);
    let kd_g = g.scale(kd_g, weight);
    let wf = g.scale(kd_f, w.lambda);
    let wg = g.scale(kd_g, w.lambda);
    let l_f = g.add(ft_f, wf)?;
    let l_g = g.add(ft_g, wg)?;
    Ok(ServerLosses {
        l_f,
        l_g,
        ft_f,
        ft_g,
        kd_f,
        kd_g,
    })
}

pub fn server_losses(
    g: &mut Graph<'_>,
    llm_logits: NodeId,
    slm_logits: NodeId,
    targets: &[usize],
    w: &DistillWeights,
) -> Result<ServerLosses> {
    server_losses_weighted(g, llm_logits, slm_logits, targets, w, 1.0)
}
