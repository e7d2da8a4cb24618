import numpy as np

from .models import REWARD_CORRECT, REWARD_INCORRECT, REWARD_NULL, RewardBreakdown


KL_EPSILON = 1e-12


def rule_reward(sample, verdict):
    """1 for a verified answer, 0.1 for a structured wrong one, 0 without think-then-answer structure."""
    if not sample.is_structured:
        if verdict is not None:
            raise ValueError('null-structured output is not verified; got a verdict')
        return REWARD_NULL
    if verdict is None:
        raise ValueError('structured output needs a verdict')
    return REWARD_CORRECT if verdict else REWARD_INCORRECT


def kl_divergence(p, q):
    """
    KL(p || q) for categorical distributions on the same support.

    0 * ln 0 counts as 0; q is floored at KL_EPSILON inside the log, so a
    term with q = 0 < p contributes p * ln(p / 1e-12) instead of infinity.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f'distributions need the same one-dimensional support, got {p.shape} and {q.shape}')
    for name, dist in (('p', p), ('q', q)):
        if np.any(dist < 0) or not np.isclose(dist.sum(), 1.0, rtol=0, atol=1e-9):
            raise ValueError(f'{name} is not a probability distribution')
    mask = p > 0
    value = float(np.sum(p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], KL_EPSILON)))))
    return max(value, 0.0)


def total_reward(r_rule, policy_dist, ref_dist, beta):
    if beta < 0:
        raise ValueError('beta must be >= 0')
    kl_term = kl_divergence(policy_dist, ref_dist)
    return RewardBreakdown(r_rule=r_rule, kl_term=kl_term, beta=beta, total=r_rule - beta * kl_term)
