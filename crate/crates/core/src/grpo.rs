//! Group-relative policy optimization over streaming rollouts: sample a
//! group of trajectories per script, normalize rewards within the group,
//! ascend the clipped ratio objective with KL regularization toward a frozen
//! reference.
//!
//! The trainable surface is the decoder's steering table, so sequence
//! log-probabilities are exact closed forms of the stored per-token base
//! logits and all policy math runs in f64 with analytic gradients.

use rayon::prelude::*;

use crate::rcsm_cache::CacheConfig;
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig};
use crate::stream_core::{splitmix64, StreamScript};
use crate::toy_decoder::{DecoderParams, SteerBias};
use crate::wts_engine::{
    required_capacity, run_session, EngineConfig, EngineError, PolicyTokenRecord, Trajectory,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    /// Trajectories sampled per streaming instance (G).
    pub group_size: usize,
    /// Ratio clip range epsilon.
    pub clip_eps: f64,
    /// KL regularization strength beta.
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Guard added to the group reward std in advantage normalization.
    pub adv_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.4,
            iterations: 500,
            adv_epsilon: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config(
                "group_size must be >= 2; group statistics are undefined otherwise".to_string(),
            ));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::Config(format!(
                "clip_eps must be in (0,1), got {}",
                self.clip_eps
            )));
        }
        if self.kl_beta < 0.0 {
            return Err(GrpoError::Config(
                "kl_beta must be non-negative".to_string(),
            ));
        }
        if self.learning_rate < 0.0 {
            return Err(GrpoError::Config(
                "learning_rate must be non-negative".to_string(),
            ));
        }
        if self.adv_epsilon <= 0.0 || self.adv_epsilon.is_nan() {
            return Err(GrpoError::Config(
                "adv_epsilon must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("grpo config: {0}")]
    Config(String),
    #[error("parameter: {0}")]
    Param(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Log-probability of the sampled token under a steering table, full softmax
/// over the temperature-scaled biased logits.
pub fn token_logprob(record: &PolicyTokenRecord, bias: &SteerBias, temperature: f64) -> f64 {
    let row = bias.row(record.phase, record.evidence);
    let inv_t = 1.0 / temperature;
    let mut max = f64::NEG_INFINITY;
    for (i, &b) in record.base_logits.iter().enumerate() {
        let z = (b as f64 + row[i]) * inv_t;
        if z > max {
            max = z;
        }
    }
    let mut denom = 0.0;
    let mut z_y = 0.0;
    for (i, &b) in record.base_logits.iter().enumerate() {
        let z = (b as f64 + row[i]) * inv_t;
        denom += (z - max).exp();
        if i == record.token_id as usize {
            z_y = z;
        }
    }
    z_y - max - denom.ln()
}

/// Sum of token log-probabilities over a trajectory's sampled tokens.
pub fn sequence_logprob(records: &[PolicyTokenRecord], bias: &SteerBias, temperature: f64) -> f64 {
    records
        .iter()
        .map(|r| token_logprob(r, bias, temperature))
        .sum()
}

/// One group of rollouts from a single streaming instance, with everything
/// needed to re-score them under any policy.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub token_records: Vec<Vec<PolicyTokenRecord>>,
    /// Sequence log-probabilities under the sampling (old) policy.
    pub logprob_old: Vec<f64>,
    /// Sequence log-probabilities under the frozen reference policy.
    pub logprob_ref: Vec<f64>,
    /// Per-token reference log-probabilities, for the KL estimator.
    pub ref_token_logps: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl GroupRollout {
    pub fn group_size(&self) -> usize {
        self.trajectories.len()
    }

    /// Sequence log-probabilities under an arbitrary current policy.
    pub fn logprob_current(&self, policy: &SteerBias) -> Vec<f64> {
        self.token_records
            .iter()
            .map(|records| sequence_logprob(records, policy, self.temperature))
            .collect()
    }
}

/// Runs G independent sessions of `script` under the frozen policy inside
/// `params` (independent rng substreams of `seed`), scoring rewards and
/// recording per-token data for policy re-evaluation.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    params: &DecoderParams,
    reference: &SteerBias,
    script: &StreamScript,
    group_size: usize,
    cache_cfg: &CacheConfig,
    engine_cfg: &EngineConfig,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<GroupRollout, GrpoError> {
    if group_size < 2 {
        return Err(GrpoError::Config("group_size must be >= 2".to_string()));
    }
    let mut base_cfg = engine_cfg.clone();
    base_cfg.record_policy_tokens = true;

    let mut trajectories = (0..group_size)
        .into_par_iter()
        .map(|g| {
            let mut cfg = base_cfg.clone();
            cfg.rng_seed = splitmix64(seed ^ ((g as u64) << 32) ^ 0x5eed);
            run_session(params, script, cache_cfg, cfg)
        })
        .collect::<Result<Vec<_>, EngineError>>()?;

    let mut rewards = Vec::with_capacity(group_size);
    let mut breakdowns = Vec::with_capacity(group_size);
    let mut token_records = Vec::with_capacity(group_size);
    let mut logprob_old = Vec::with_capacity(group_size);
    let mut logprob_ref = Vec::with_capacity(group_size);
    let mut ref_token_logps = Vec::with_capacity(group_size);

    for traj in &mut trajectories {
        let records: Vec<PolicyTokenRecord> = traj
            .steps
            .iter_mut()
            .flat_map(|s| s.policy_tokens.drain(..))
            .collect();
        let breakdown = total_reward(traj, &script.ground_truth, reward_cfg);
        rewards.push(breakdown.total);
        breakdowns.push(breakdown);
        logprob_old.push(sequence_logprob(
            &records,
            &params.steer_bias,
            engine_cfg.temperature,
        ));
        let per_ref: Vec<f64> = records
            .iter()
            .map(|r| token_logprob(r, reference, engine_cfg.temperature))
            .collect();
        logprob_ref.push(per_ref.iter().sum());
        ref_token_logps.push(per_ref);
        token_records.push(records);
    }

    Ok(GroupRollout {
        trajectories,
        rewards,
        breakdowns,
        token_records,
        logprob_old,
        logprob_ref,
        ref_token_logps,
        temperature: engine_cfg.temperature,
    })
}

/// Group-normalized advantages: `(r - mean) / (population std + eps)`, all
/// zeros when the group is reward-degenerate.
pub fn advantages(rewards: &[f64], adv_epsilon: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards
        .iter()
        .map(|r| (r - mean) / (std + adv_epsilon))
        .collect()
}

/// The per-trajectory clipped surrogate term.
pub fn clipped_objective(rho: f64, advantage: f64, clip_eps: f64) -> Result<f64, GrpoError> {
    if rho <= 0.0 || !rho.is_finite() {
        return Err(GrpoError::Param(format!(
            "ratio must be positive and finite, got {rho}"
        )));
    }
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    Ok((rho * advantage).min(clipped * advantage))
}

/// Per-token KL estimator `r - 1 - log r` with `r = pi_ref / pi_theta` at
/// the sampled token, averaged over the tokens. Non-negative per sample.
pub fn kl_penalty(logprob_current: &[f64], logprob_ref: &[f64]) -> f64 {
    assert_eq!(logprob_current.len(), logprob_ref.len());
    if logprob_current.is_empty() {
        return 0.0;
    }
    let sum: f64 = logprob_current
        .iter()
        .zip(logprob_ref)
        .map(|(&cur, &reference)| {
            let d = reference - cur;
            d.exp() - 1.0 - d
        })
        .sum();
    sum / logprob_current.len() as f64
}

/// Objective value and diagnostics at a given current policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveReport {
    pub objective: f64,
    pub surrogate: f64,
    pub mean_kl: f64,
    /// Fraction of trajectories whose ratio the clip actually bound.
    pub clip_fraction: f64,
    pub mean_reward: f64,
}

#[allow(clippy::needless_range_loop)] // i indexes four parallel per-trajectory arrays
fn compute(
    policy: &SteerBias,
    group: &GroupRollout,
    cfg: &GrpoConfig,
    want_gradient: bool,
) -> Result<(ObjectiveReport, Option<Vec<f64>>), GrpoError> {
    let g = group.group_size();
    if g < 2 {
        return Err(GrpoError::Config(
            "group must hold at least 2 trajectories".to_string(),
        ));
    }
    let adv = advantages(&group.rewards, cfg.adv_epsilon);
    let inv_t = 1.0 / group.temperature;
    let vocab = policy.vocab();

    let mut surrogate = 0.0;
    let mut mean_kl = 0.0;
    let mut clipped_count = 0usize;
    let mut grad = want_gradient.then(|| vec![0.0f64; policy.param_count()]);

    for i in 0..g {
        let records = &group.token_records[i];
        let cur_logps: Vec<f64> = records
            .iter()
            .map(|r| token_logprob(r, policy, group.temperature))
            .collect();
        let s_cur: f64 = cur_logps.iter().sum();
        let rho = (s_cur - group.logprob_old[i]).exp();
        let unclipped = rho * adv[i];
        let term = clipped_objective(rho, adv[i], cfg.clip_eps)?;
        if term < unclipped {
            clipped_count += 1;
        }
        surrogate += term / g as f64;

        let kl_i = kl_penalty(&cur_logps, &group.ref_token_logps[i]);
        mean_kl += kl_i / g as f64;

        if let Some(grad) = grad.as_mut() {
            // Gradient flows through the surrogate only where the unclipped
            // branch is active.
            let flows = if adv[i] >= 0.0 {
                rho <= 1.0 + cfg.clip_eps
            } else {
                rho >= 1.0 - cfg.clip_eps
            };
            let surr_coeff = if flows { adv[i] * rho / g as f64 } else { 0.0 };
            let n_i = records.len().max(1) as f64;

            for (t, record) in records.iter().enumerate() {
                let d = group.ref_token_logps[i][t] - cur_logps[t];
                let r = d.exp();
                // d(k3)/d(logp_cur) = 1 - r; the KL term enters negatively.
                let kl_coeff = -cfg.kl_beta / g as f64 * (1.0 - r) / n_i;
                let coeff = surr_coeff + kl_coeff;
                if coeff == 0.0 {
                    continue;
                }

                // Softmax of the temperature-scaled biased logits.
                let row_start = (record.phase as usize * 2 + record.evidence as usize) * vocab;
                let row = policy.row(record.phase, record.evidence);
                let mut max = f64::NEG_INFINITY;
                for (v, &b) in record.base_logits.iter().enumerate() {
                    let z = (b as f64 + row[v]) * inv_t;
                    if z > max {
                        max = z;
                    }
                }
                let mut denom = 0.0;
                for (v, &b) in record.base_logits.iter().enumerate() {
                    denom += ((b as f64 + row[v]) * inv_t - max).exp();
                }
                for (v, &b) in record.base_logits.iter().enumerate() {
                    let p = ((b as f64 + row[v]) * inv_t - max).exp() / denom;
                    let indicator = (v == record.token_id as usize) as u8 as f64;
                    grad[row_start + v] += coeff * (indicator - p) * inv_t;
                }
            }
        }
    }

    let objective = surrogate - cfg.kl_beta * mean_kl;
    if !objective.is_finite() {
        return Err(GrpoError::NonFinite(format!("objective ({objective})")));
    }
    if let Some(grad) = grad.as_ref() {
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(GrpoError::NonFinite("gradient".to_string()));
        }
    }
    let mean_reward = group.rewards.iter().sum::<f64>() / g as f64;
    Ok((
        ObjectiveReport {
            objective,
            surrogate,
            mean_kl,
            clip_fraction: clipped_count as f64 / g as f64,
            mean_reward,
        },
        grad,
    ))
}

/// The objective at `policy` without touching it; the black box finite
/// differences are taken of.
pub fn score_objective(
    policy: &SteerBias,
    group: &GroupRollout,
    cfg: &GrpoConfig,
) -> Result<ObjectiveReport, GrpoError> {
    Ok(compute(policy, group, cfg, false)?.0)
}

/// Analytic gradient of the objective with respect to every steering
/// parameter, flattened in table order.
pub fn objective_gradient(
    policy: &SteerBias,
    group: &GroupRollout,
    cfg: &GrpoConfig,
) -> Result<(ObjectiveReport, Vec<f64>), GrpoError> {
    let (report, grad) = compute(policy, group, cfg, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// One ascent step on the steering table.
pub fn grpo_step(
    policy: &SteerBias,
    group: &GroupRollout,
    cfg: &GrpoConfig,
) -> Result<(SteerBias, ObjectiveReport), GrpoError> {
    cfg.validate()?;
    let (report, grad) = objective_gradient(policy, group, cfg)?;
    let mut updated = policy.clone();
    for (value, g) in updated.values_mut().iter_mut().zip(&grad) {
        *value += cfg.learning_rate * g;
    }
    if updated.values().iter().any(|x| !x.is_finite()) {
        return Err(GrpoError::NonFinite("updated policy".to_string()));
    }
    Ok((updated, report))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub objective: f64,
}

/// What a training run returns: the trained policy, the frozen reference it
/// was regularized toward, and the per-iteration reward curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: SteerBias,
    pub reference: SteerBias,
    pub curve: Vec<IterationStats>,
}

/// Iterates sample-then-step over the script pool, refreshing the sampling
/// policy every iteration and keeping the reference frozen at
/// initialization. Cache capacity is auto-sized per script.
pub fn train(
    pool: &[StreamScript],
    base: &DecoderParams,
    grpo_cfg: &GrpoConfig,
    engine_cfg: &EngineConfig,
    cache_template: &CacheConfig,
    reward_cfg: &RewardConfig,
    seed: u64,
) -> Result<TrainOutcome, GrpoError> {
    grpo_cfg.validate()?;
    if pool.is_empty() {
        return Err(GrpoError::Config("script pool is empty".to_string()));
    }
    let reference = base.steer_bias.clone();
    let mut params = base.clone();
    let mut policy = reference.clone();
    let mut curve = Vec::with_capacity(grpo_cfg.iterations);

    for iteration in 0..grpo_cfg.iterations {
        let script = &pool[iteration % pool.len()];
        let mut cache_cfg = cache_template.clone();
        cache_cfg.capacity_slots = required_capacity(script, &cache_cfg, engine_cfg);
        params.steer_bias = policy.clone();
        let group = sample_group(
            &params,
            &reference,
            script,
            grpo_cfg.group_size,
            &cache_cfg,
            engine_cfg,
            reward_cfg,
            splitmix64(seed ^ (iteration as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)),
        )?;
        let (next, report) = grpo_step(&policy, &group, grpo_cfg)?;
        policy = next;
        curve.push(IterationStats {
            iteration,
            mean_reward: report.mean_reward,
            mean_kl: report.mean_kl,
            clip_fraction: report.clip_fraction,
            objective: report.objective,
        });
    }
    Ok(TrainOutcome {
        policy,
        reference,
        curve,
    })
}

/// Trailing moving average, defined from index `window - 1` on.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    if values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_match_hand_arithmetic() {
        let adv = advantages(&[3.0, 1.0, 3.0, 1.0], 1e-8);
        for (a, expected) in adv.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - expected).abs() < 1e-6, "{a} vs {expected}");
        }
    }

    #[test]
    fn degenerate_group_gets_zero_advantages() {
        assert_eq!(advantages(&[2.0, 2.0, 2.0], 1e-8), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn advantages_are_shift_invariant_and_centered() {
        let rewards = [0.3, 2.7, 1.1, 0.9, 3.0, 0.0, 1.4, 2.2];
        let adv = advantages(&rewards, 1e-8);
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        assert!(mean.abs() < 1e-12);
        // Population std of the normalized vector is 1 up to the epsilon
        // guard: exactly std / (std + eps).
        let var: f64 = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / adv.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 17.5).collect();
        let adv_shifted = advantages(&shifted, 1e-8);
        for (a, b) in adv.iter().zip(&adv_shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.2).unwrap(), 1.2);
        assert_eq!(clipped_objective(1.0, -2.5, 0.2).unwrap(), -2.5);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2).unwrap(), -0.8);
        assert!(clipped_objective(0.0, 1.0, 0.2).is_err());
        assert!(clipped_objective(-1.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn clip_saturates_outside_the_band() {
        // Positive advantage: constant on [1+eps, inf).
        let hi = clipped_objective(1.2, 1.0, 0.2).unwrap();
        for rho in [1.3, 2.0, 10.0] {
            assert_eq!(clipped_objective(rho, 1.0, 0.2).unwrap(), hi);
        }
        // Negative advantage: constant on (0, 1-eps].
        let lo = clipped_objective(0.8, -1.0, 0.2).unwrap();
        for rho in [0.5, 0.1, 0.01] {
            assert_eq!(clipped_objective(rho, -1.0, 0.2).unwrap(), lo);
        }
    }

    #[test]
    fn kl_estimator_basics() {
        assert_eq!(kl_penalty(&[-1.0, -2.0], &[-1.0, -2.0]), 0.0);
        // Current assigns half the reference probability at one token:
        // r = 2, k3 = 2 - 1 - ln 2.
        let k = kl_penalty(&[(0.5f64).ln()], &[(1.0f64).ln()]);
        assert!((k - (2.0 - 1.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(kl_penalty(&[], &[]), 0.0);
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
