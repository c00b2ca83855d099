"""Group-relative policy gradients.

Advantages are rewards centered on their group mean; the loss is the
negated advantage-weighted masked log-likelihood, with no KL term and
no clipping.  Two aggregation modes are supported:

* ``sequence_mean``  — each trajectory's log-likelihood is normalized
  by its own model-token count, then averaged over the group;
* ``token_weighted`` — one normalization by the group's total model
  token count, so long trajectories carry proportionally more weight.

When every trajectory has the same number of model tokens the two
coincide exactly.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as kernels
from .trajectory import ORIGIN_MODEL, Group, Trajectory

__all__ = [
    "LOSS_MODES",
    "EmptyGroup",
    "EmptyMask",
    "group_advantages",
    "mask_model_tokens",
    "loss_and_gradient",
]

LOSS_MODES = ("token_weighted", "sequence_mean")


class EmptyGroup(ValueError):
    """Raised when advantages are requested for zero rewards."""


class EmptyMask(ValueError):
    """Raised when a trajectory contributes no model tokens to the loss."""


def group_advantages(rewards, normalize_std: bool = False) -> np.ndarray:
    """A_i = r_i − mean(r), optionally divided by the group std.

    The std variant is the classic formulation; mean-only is the
    default.  Either way the advantages sum to zero, and a zero-variance
    group yields identically zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1:
        raise ValueError("rewards must be a flat sequence")
    if r.shape[0] == 0:
        raise EmptyGroup("cannot compute advantages for an empty group")
    if np.all(r == r[0]):
        # exact check: the mean of identical non-representable values can
        # differ in the last ulp, and std normalization would blow that
        # rounding noise up to advantages of magnitude one
        return np.zeros_like(r)
    adv = r - r.mean()
    if normalize_std:
        std = r.std()
        if std > 0.0:
            adv = adv / std
    return adv


def mask_model_tokens(trace: Trajectory) -> np.ndarray:
    """Boolean mask over the token stream, true exactly at model tokens."""
    return np.array([o == ORIGIN_MODEL for o in trace.token_origins], dtype=bool)


def loss_and_gradient(
    group: Group,
    policy,
    mode: str = "token_weighted",
    normalize_std: bool = False,
) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient w.r.t. the flat parameter table.

    ``policy`` is a TabularPolicy or anything exposing ``as_policy()``
    that yields one (published snapshots do).  Log-probabilities are
    evaluated at each trajectory's own sampling temperature, keeping the
    estimator on-policy even if the controller has since moved the
    trainer's temperature.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode: {mode!r}")
    if hasattr(policy, "as_policy"):
        policy = policy.as_policy()

    adv = group_advantages(group.rewards, normalize_std=normalize_std)
    k = group.size

    per_traj = []
    for traj in group.trajectories:
        tokens = np.asarray(traj.tokens, dtype=np.int64)
        m = mask_model_tokens(traj)
        n_model = int(m.sum())
        if n_model == 0:
            raise EmptyMask(f"trajectory for task {traj.task_id!r} has no model tokens")
        states = policy.context_states(tokens)[m]
        actions = tokens[m]
        inv_temp = 1.0 / traj.temperature
        ll = kernels.masked_logprob_sum(policy.table, states, actions, inv_temp)
        per_traj.append((states, actions, inv_temp, ll, n_model))

    total_model = sum(p[4] for p in per_traj)
    loss = 0.0
    grad = np.zeros_like(policy.table)
    for a_i, (states, actions, inv_temp, ll, n_model) in zip(adv, per_traj):
        if mode == "sequence_mean":
            coeff = -a_i / (k * n_model)
        else:
            coeff = -a_i / total_model
        loss += coeff * ll
        if a_i != 0.0:
            kernels.add_scaled_logprob_grad(
                policy.table, states, actions, inv_temp, coeff, grad
            )
    return float(loss), grad.reshape(-1)
