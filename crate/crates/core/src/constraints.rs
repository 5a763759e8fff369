//! Differentiable constraint losses L(X, Ỹ, Z) behind one pluggable spec.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LMParams, SoftSequence};
use crate::tape::Tape;
use crate::vocab::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Cross entropy of generating Z after X and the soft sequence.
    AbductiveFuture,
    /// Per-row relaxed divergence from the one-hot targets Z.
    CounterfactualKl,
    /// Always zero; test fixture.
    ZeroProbe,
    /// Sum of squared distances to a fixed center; test fixture.
    QuadraticProbe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    /// Temperature of the relaxed one-hot divergence (counterfactual only).
    pub tau_kl: f64,
    /// When set, the abductive loss averages the cross entropy over every
    /// prefix Ỹ_{1:m}, m = 1..N, instead of scoring the full sequence only.
    pub prefix_mode: bool,
    /// Center of the quadratic probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_center: Option<Array2<f64>>,
}

impl ConstraintSpec {
    pub fn abductive(prefix_mode: bool) -> ConstraintSpec {
        ConstraintSpec {
            kind: ConstraintKind::AbductiveFuture,
            tau_kl: 1.0,
            prefix_mode,
            quad_center: None,
        }
    }

    pub fn counterfactual(tau_kl: f64) -> ConstraintSpec {
        ConstraintSpec {
            kind: ConstraintKind::CounterfactualKl,
            tau_kl,
            prefix_mode: false,
            quad_center: None,
        }
    }

    pub fn zero_probe() -> ConstraintSpec {
        ConstraintSpec {
            kind: ConstraintKind::ZeroProbe,
            tau_kl: 1.0,
            prefix_mode: false,
            quad_center: None,
        }
    }

    pub fn quadratic_probe(center: Array2<f64>) -> ConstraintSpec {
        ConstraintSpec {
            kind: ConstraintKind::QuadraticProbe,
            tau_kl: 1.0,
            prefix_mode: false,
            quad_center: Some(center),
        }
    }

    /// A copy whose internal temperatures live in a logit space scaled by
    /// `s` (the caller scales the pass-in temperature itself).
    pub fn soft_scaled(&self, s: f64) -> ConstraintSpec {
        let mut spec = self.clone();
        spec.tau_kl *= s;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ConstraintKind::CounterfactualKl && self.tau_kl <= 0.0 {
            return Err(Error::ConfigError("tau_kl must be > 0".into()));
        }
        if self.kind == ConstraintKind::QuadraticProbe && self.quad_center.is_none() {
            return Err(Error::ConfigError("quadratic probe needs a center".into()));
        }
        Ok(())
    }

    /// Loss value and its gradient with respect to the soft logits.
    pub fn eval(
        &self,
        lm: &LMParams,
        x: &TokenSeq,
        ytilde: &SoftSequence,
        z: &TokenSeq,
        tau_in: f64,
    ) -> Result<(f64, Array2<f64>)> {
        let (loss, grad) = match self.kind {
            ConstraintKind::AbductiveFuture => {
                abductive_loss(lm, x, ytilde, z, tau_in, self.prefix_mode)?
            }
            ConstraintKind::CounterfactualKl => counterfactual_loss(ytilde, z, self.tau_kl)?,
            ConstraintKind::ZeroProbe => (0.0, Array2::zeros(ytilde.logits.dim())),
            ConstraintKind::QuadraticProbe => {
                let c = self
                    .quad_center
                    .as_ref()
                    .ok_or_else(|| Error::ConfigError("quadratic probe needs a center".into()))?;
                let diff = &ytilde.logits - c;
                ((&diff * &diff).sum(), diff.mapv(|v| 2.0 * v))
            }
        };
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{:?}", self.kind)));
        }
        Ok((loss, grad))
    }
}

/// −Σ_n log P_LM(z_n | X, Ỹ, Z_{1:n−1}), differentiated through the LM's
/// soft-embedding input. With `prefix_mode` the loss is averaged over every
/// prefix Ỹ_{1:m} instead of scoring the full sequence only.
pub fn abductive_loss(
    lm: &LMParams,
    x: &TokenSeq,
    ytilde: &SoftSequence,
    z: &TokenSeq,
    tau_in: f64,
    prefix_mode: bool,
) -> Result<(f64, Array2<f64>)> {
    if x.is_empty() || z.is_empty() {
        return Err(Error::Invalid("abductive loss needs nonempty X and Z".into()));
    }
    let n = ytilde.n_tokens();
    lm.check_len(x.len() + n + z.len())?;

    let mut tape = Tape::new();
    let leaves = lm.register(&mut tape);
    let yvar = tape.leaf(ytilde.logits.clone());
    let scaled = tape.scale(yvar, 1.0 / tau_in);
    let probs = tape.softmax_rows(scaled);
    let soft_emb = tape.matmul(probs, leaves.emb);
    let xe = tape.gather_rows(leaves.emb, &x.ids);
    let ze = tape.gather_rows(leaves.emb, &z.ids);

    let prefixes: Vec<usize> = if prefix_mode {
        (1..=n).collect()
    } else {
        vec![n]
    };
    let mut loss_nodes = Vec::with_capacity(prefixes.len());
    for m in prefixes {
        let soft_m = tape.slice_rows(soft_emb, 0, m);
        let cat = tape.concat_rows(xe, soft_m);
        let cat = tape.concat_rows(cat, ze);
        let len = x.len() + m + z.len();
        let pos = tape.slice_rows(leaves.pos, 0, len);
        let inp = tape.add(cat, pos);
        let logits = lm.tape_logits(&mut tape, &leaves, inp, len);
        let zrows = tape.slice_rows(logits, x.len() + m - 1, z.len());
        loss_nodes.push(tape.cross_entropy_sum(zrows, &z.ids));
    }
    let mut total = loss_nodes[0];
    for &node in &loss_nodes[1..] {
        total = tape.add(total, node);
    }
    if loss_nodes.len() > 1 {
        total = tape.scale(total, 1.0 / loss_nodes.len() as f64);
    }
    let loss = tape.scalar(total);
    let grads = tape.backward(total);
    Ok((loss, tape.grad_of(&grads, yvar)))
}

/// −Σ_n log softmax(ỹ_n/τ)[z_n] with the closed-form gradient
/// (softmax(ỹ_n/τ) − onehot(z_n)) / τ per row.
pub fn counterfactual_loss(
    ytilde: &SoftSequence,
    z: &TokenSeq,
    tau_kl: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = ytilde.n_tokens();
    if z.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: z.len(),
        });
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(ytilde.logits.dim());
    for (r, &target) in z.ids.iter().enumerate() {
        if target >= ytilde.vocab_size() {
            return Err(Error::Invalid(format!(
                "target id {target} outside vocab of {}",
                ytilde.vocab_size()
            )));
        }
        let row = ytilde.logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row
            .iter()
            .map(|v| ((v - max) / tau_kl).exp())
            .sum::<f64>()
            .ln()
            + max / tau_kl;
        loss -= row[target] / tau_kl - lse;
        for (c, &v) in row.iter().enumerate() {
            let p = ((v - max) / tau_kl).exp()
                / row.iter().map(|w| ((w - max) / tau_kl).exp()).sum::<f64>();
            grad[[r, c]] = (p - if c == target { 1.0 } else { 0.0 }) / tau_kl;
        }
    }
    Ok((loss, grad))
}

/// Pads (with `pad_id`) or truncates Z to exactly `n` tokens for free-length
/// counterfactual runs.
pub fn fit_length(z: &TokenSeq, n: usize, pad_id: usize) -> TokenSeq {
    let mut ids = z.ids.clone();
    ids.truncate(n);
    while ids.len() < n {
        ids.push(pad_id);
    }
    TokenSeq::new(ids)
}
