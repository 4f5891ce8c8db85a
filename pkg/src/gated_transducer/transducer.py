"""Alignment-lattice transducer loss with an exhaustive enumeration oracle.

The loss is the negative log probability that the model emits the target
sequence, summed over every monotone alignment path. A path interleaves
exactly T blank moves (one per frame) with U label moves, giving
C(T+U, U) paths in total; label moves that happen after the final frame
has been consumed draw their emission from the last frame's distribution.
The production implementation is a log-space forward-backward DP whose
gradient is assembled in closed form from transition occupancies, so the
recursion itself is never differentiated through.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, _result

__all__ = [
    "BLANK",
    "LatticeTooLargeError",
    "transducer_loss",
    "forward_backward_totals",
    "enumerate_alignment_probability",
    "enumerate_alignment_paths",
]

BLANK = 0

_NEG_INF = float("-inf")

# Beyond this the C(T+U, U) path enumeration stops being a practical oracle.
_MAX_ENUM_MOVES = 12


class LatticeTooLargeError(ValueError):
    """The lattice is too large for exhaustive path enumeration."""


def _log_add(a, b):
    if a == _NEG_INF:
        return b
    if b == _NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def _validate_lattice(log_probs, targets, frames):
    values = np.asarray(log_probs, dtype=np.float64)
    targets = [int(t) for t in targets]
    if values.ndim == 3:
        frame_count = values.shape[0]
    elif values.ndim == 2:
        if frames is None:
            raise DimensionError("transducer: flat log_probs need an explicit frame count")
        frame_count = int(frames)
        if frame_count < 1 or values.shape[0] % frame_count != 0:
            raise DimensionError(
                f"transducer: {values.shape[0]} rows do not split into {frame_count} frames"
            )
        values = values.reshape(frame_count, values.shape[0] // frame_count, values.shape[1])
    else:
        raise DimensionError(f"transducer: log_probs must be 2-D or 3-D, got {values.shape}")
    t_frames, u_plus_one, vocab = values.shape
    u_labels = u_plus_one - 1
    if t_frames < 1 or vocab < 2:
        raise DimensionError(f"transducer: degenerate lattice shape {values.shape}")
    if len(targets) != u_labels:
        raise DimensionError(
            f"transducer: {len(targets)} targets but lattice has {u_labels} label rows"
        )
    for t in targets:
        if t == BLANK:
            raise ContractError("transducer: target token equals the blank index")
        if not 1 <= t < vocab:
            raise ContractError(f"transducer: target {t} outside [1, {vocab})")
    slack = np.abs(_np_logsumexp(values, axis=2))
    if slack.max() > 1e-6:
        raise ContractError(
            f"transducer: log_probs rows not normalized (max |logsumexp| = {slack.max():.3e})"
        )
    return values, targets


def _np_logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def _forward(lp, targets):
    t_frames, _, _ = lp.shape
    u_labels = len(targets)
    alpha = np.full((t_frames + 1, u_labels + 1), _NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(t_frames + 1):
        for u in range(u_labels + 1):
            if t == 0 and u == 0:
                continue
            acc = _NEG_INF
            if t > 0:
                acc = alpha[t - 1, u] + lp[t - 1, u, BLANK]
            if u > 0:
                emit_t = min(t, t_frames - 1)
                acc = _log_add(acc, alpha[t, u - 1] + lp[emit_t, u - 1, targets[u - 1]])
            alpha[t, u] = acc
    return alpha


def _backward_dp(lp, targets):
    t_frames, _, _ = lp.shape
    u_labels = len(targets)
    beta = np.full((t_frames + 1, u_labels + 1), _NEG_INF)
    beta[t_frames, u_labels] = 0.0
    for t in range(t_frames, -1, -1):
        for u in range(u_labels, -1, -1):
            if t == t_frames and u == u_labels:
                continue
            acc = _NEG_INF
            if t < t_frames:
                acc = lp[t, u, BLANK] + beta[t + 1, u]
            if u < u_labels:
                emit_t = min(t, t_frames - 1)
                acc = _log_add(acc, lp[emit_t, u, targets[u]] + beta[t, u + 1])
            beta[t, u] = acc
    return beta


def _occupancy_grad(lp, targets, alpha, beta, log_total):
    """d(log_total)/d(log_probs): expected emission counts under the posterior."""
    t_frames, _, _ = lp.shape
    u_labels = len(targets)
    grad = np.zeros_like(lp)
    # Blank from (t, u) consumes frame t.
    grad[:, :, BLANK] += np.exp(
        alpha[:t_frames, :] + lp[:, :, BLANK] + beta[1:, :] - log_total
    )
    # Label u from (t, u) emits from frame min(t, T-1).
    rows = np.minimum(np.arange(t_frames + 1), t_frames - 1)
    for u in range(u_labels):
        y = targets[u]
        occ = np.exp(alpha[:, u] + lp[rows, u, y] + beta[:, u + 1] - log_total)
        np.add.at(grad[:, u, y], rows, occ)
    return grad


def transducer_loss(log_probs, targets, frames=None):
    """Negative log probability of the target sequence, as a scalar tensor.

    ``log_probs`` holds per-node output log distributions, either shaped
    (T, U+1, V) or flat ((T*(U+1)), V) with ``frames`` giving T. Blank is
    fixed at index 0 and targets must avoid it. Gradients flow to
    ``log_probs`` when it requires them.
    """
    if not isinstance(log_probs, Tensor):
        log_probs = Tensor(log_probs)
    lp, targets = _validate_lattice(log_probs.values, targets, frames)
    alpha = _forward(lp, targets)
    log_total = alpha[lp.shape[0], len(targets)]
    in_shape = log_probs.shape

    def back(g):
        beta = _backward_dp(lp, targets)
        occupancy = _occupancy_grad(lp, targets, alpha, beta, log_total)
        return ((-float(g)) * occupancy.reshape(in_shape),)

    return _result("transducer_loss", np.float64(-log_total), (log_probs,), back)


def forward_backward_totals(log_probs, targets, frames=None):
    """(forward total, backward total) log-probabilities; they must agree."""
    lp, targets = _validate_lattice(
        log_probs.values if isinstance(log_probs, Tensor) else log_probs, targets, frames
    )
    alpha = _forward(lp, targets)
    beta = _backward_dp(lp, targets)
    return float(alpha[lp.shape[0], len(targets)]), float(beta[0, 0])


def enumerate_alignment_paths(log_probs, targets, frames=None):
    """Log-probability of every monotone alignment path, by brute force."""
    lp, targets = _validate_lattice(
        log_probs.values if isinstance(log_probs, Tensor) else log_probs, targets, frames
    )
    t_frames = lp.shape[0]
    u_labels = len(targets)
    if t_frames + u_labels > _MAX_ENUM_MOVES:
        raise LatticeTooLargeError(
            f"T+U = {t_frames + u_labels} exceeds the enumeration bound {_MAX_ENUM_MOVES}"
        )
    paths = []
    stack = [(0, 0, 0.0)]
    while stack:
        t, u, acc = stack.pop()
        if t == t_frames and u == u_labels:
            paths.append(acc)
            continue
        if t < t_frames:
            stack.append((t + 1, u, acc + lp[t, u, BLANK]))
        if u < u_labels:
            emit_t = min(t, t_frames - 1)
            stack.append((t, u + 1, acc + lp[emit_t, u, targets[u]]))
    return paths


def enumerate_alignment_probability(log_probs, targets, frames=None):
    """Total log-probability over all alignment paths (the oracle)."""
    paths = enumerate_alignment_paths(log_probs, targets, frames)
    return float(np.logaddexp.reduce(np.asarray(paths, dtype=np.float64)))
