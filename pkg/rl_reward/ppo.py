import logging

import numpy as np


logger = logging.getLogger(__name__)


class PpoError(Exception):
    pass


def log_softmax(logits):
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def clip_active(ratio, advantages, clip_range):
    """Samples whose clipped branch is the minimum; the objective is flat in the logits there."""
    return ((advantages > 0) & (ratio > 1 + clip_range)) | ((advantages < 0) & (ratio < 1 - clip_range))


def clipped_surrogate(logits, actions, old_logprobs, advantages, clip_range):
    """Mean of min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) over one problem's samples."""
    ratio = np.exp(log_softmax(logits)[actions] - old_logprobs)
    clipped = np.clip(ratio, 1 - clip_range, 1 + clip_range)
    return float(np.mean(np.minimum(ratio * advantages, clipped * advantages)))


def surrogate_gradient(logits, actions, old_logprobs, advantages, clip_range):
    """Analytic gradient of clipped_surrogate with respect to the logits."""
    log_probs = log_softmax(logits)
    ratio = np.exp(log_probs[actions] - old_logprobs)
    coef = np.where(clip_active(ratio, advantages, clip_range), 0.0, advantages * ratio) / len(actions)
    grad = -np.exp(log_probs) * coef.sum()
    np.add.at(grad, actions, coef)
    return grad


def ppo_step(policy, batch, config, reference=None):
    """
    Clipped PPO update of a ToyPolicy on single-step episodes.

    Advantages are reward minus the pre-update value estimate of the
    problem; with one step per episode the return is the reward itself, so
    the discount never applies. Each problem ascends the mean of its own
    samples' surrogate minus value_coef * (r - V)^2. When reference logits
    are given and beta > 0, a proximal step of strength
    learning_rate * beta pulls the logits back toward them afterwards.
    Returns the updated copy and the step metrics.
    """
    if not batch:
        raise PpoError('ppo_step needs a non-empty batch')
    policy = policy.copy()
    old_log_probs = policy.log_probs()
    n_problems = policy.logits.shape[0]

    problems = np.array([t.problem for t in batch])
    actions = np.array([t.action for t in batch])
    old_logprobs = np.array([t.old_logprob for t in batch], dtype=float)
    rewards = np.array([t.reward for t in batch], dtype=float)
    advantages = rewards - policy.values[problems]
    weight = 1.0 / np.bincount(problems, minlength=n_problems)[problems]

    clipped = 0
    for epoch in range(config.ppo_epochs):
        log_probs = policy.log_probs()
        ratio = np.exp(log_probs[problems, actions] - old_logprobs)
        active = clip_active(ratio, advantages, config.clip_range)
        coef = np.where(active, 0.0, advantages * ratio) * weight

        grad = -np.exp(log_probs) * np.bincount(problems, weights=coef, minlength=n_problems)[:, None]
        np.add.at(grad, (problems, actions), coef)
        value_grad = 2 * config.value_coef * np.bincount(
            problems, weights=(rewards - policy.values[problems]) * weight, minlength=n_problems,
        )
        if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(value_grad))):
            raise PpoError(
                f'non-finite gradient in epoch {epoch}: rewards in [{rewards.min()}, {rewards.max()}], '
                f'ratios in [{ratio.min()}, {ratio.max()}]'
            )
        policy.logits += config.learning_rate * grad
        policy.values += config.learning_rate * value_grad
        clipped += int(active.sum())

    if reference is not None and config.beta > 0:
        strength = config.learning_rate * config.beta
        policy.logits = (policy.logits + strength * reference) / (1 + strength)

    rows = np.unique(problems)
    new_log_probs = policy.log_probs()
    kl = np.sum(np.exp(new_log_probs[rows]) * (new_log_probs[rows] - old_log_probs[rows]), axis=1)
    metrics = {
        'mean_reward': float(rewards.mean()),
        'clip_fraction': clipped / (len(batch) * config.ppo_epochs),
        'kl': float(np.maximum(kl, 0.0).mean()),
    }
    logger.debug('ppo_step over %d samples: %s', len(batch), metrics)
    return policy, metrics


def total_variation(policy, other):
    """Largest per-problem total-variation distance between two policies."""
    return float(0.5 * np.abs(policy.probs() - other.probs()).sum(axis=1).max())

