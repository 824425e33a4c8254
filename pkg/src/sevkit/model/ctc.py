"""CTC loss: log-space forward recursion over blank-augmented alignments,
with an analytic gradient with respect to the frame logits.

Blank index is 0 throughout; real tokens are positive integers.  The loss
of a (frames, target) pair is the negative log of the total probability
of every monotone blank-augmented path that collapses to the target.
"""

from __future__ import annotations

import numpy as np

BLANK = 0
NEG_INF = -np.inf


class CTCAlignmentError(ValueError):
    """Target cannot be aligned to the available frames."""


def min_alignment_frames(target) -> int:
    """Smallest T that can emit the target: U plus one blank per repeat."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extended_target(target) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def _check_target(target, num_symbols: int, num_frames: int):
    target = list(target)
    if any(tok == BLANK for tok in target):
        raise CTCAlignmentError("target must not contain the blank token")
    if any(not (0 < tok < num_symbols) for tok in target):
        raise CTCAlignmentError(f"target token outside vocabulary of size {num_symbols - 1}")
    need = min_alignment_frames(target)
    if num_frames < need:
        raise CTCAlignmentError(
            f"target of length {len(target)} needs at least {need} frames, got {num_frames}"
        )
    return target


def _logsumexp2(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + np.log(np.exp(a - m) + np.exp(b - m))


def _forward(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    num_frames = log_probs.shape[0]
    s = ext.size
    alpha = np.full((num_frames, s), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if s > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    allowed = np.zeros(s, dtype=bool)
    allowed[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    step = np.full(s, NEG_INF)
    skip = np.full(s, NEG_INF)
    emit = log_probs[:, ext]
    for t in range(1, num_frames):
        prev = alpha[t - 1]
        step[1:] = prev[:-1]
        merged = np.logaddexp(prev, step)
        skip[2:] = prev[:-2]
        merged = np.where(allowed, np.logaddexp(merged, skip), merged)
        alpha[t] = merged + emit[t]
    return alpha


def _backward(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    num_frames = log_probs.shape[0]
    s = ext.size
    beta = np.full((num_frames, s), NEG_INF)
    beta[-1, -1] = log_probs[-1, ext[-1]]
    if s > 1:
        beta[-1, -2] = log_probs[-1, ext[-2]]
    allowed = np.zeros(s, dtype=bool)
    allowed[:-2] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    step = np.full(s, NEG_INF)
    skip = np.full(s, NEG_INF)
    emit = log_probs[:, ext]
    for t in range(num_frames - 2, -1, -1):
        nxt = beta[t + 1]
        step[:-1] = nxt[1:]
        merged = np.logaddexp(nxt, step)
        skip[:-2] = nxt[2:]
        merged = np.where(allowed, np.logaddexp(merged, skip), merged)
        beta[t] = merged + emit[t]
    return beta


def ctc_loss(frame_probs: np.ndarray, target) -> float:
    """Negative log-probability of the target under row-stochastic frame
    distributions, summed over all valid alignments (forward recursion in
    log space).
    """
    frame_probs = np.asarray(frame_probs, dtype=np.float64)
    num_frames, num_symbols = frame_probs.shape
    target = _check_target(target, num_symbols, num_frames)
    with np.errstate(divide="ignore"):
        log_probs = np.log(frame_probs)
    ext = _extended_target(target)
    alpha = _forward(log_probs, ext)
    total = alpha[-1, -1] if ext.size == 1 else _logsumexp2(alpha[-1, -1], alpha[-1, -2])
    return float(-total)


def ctc_loss_from_logits(logits: np.ndarray, target) -> float:
    """Forward-only loss for unnormalized frame scores."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = _check_target(target, logits.shape[1], logits.shape[0])
    ext = _extended_target(target)
    alpha = _forward(log_probs, ext)
    total = alpha[-1, -1] if ext.size == 1 else _logsumexp2(alpha[-1, -1], alpha[-1, -2])
    return float(-total)


def ctc_loss_and_grad_from_logits(logits: np.ndarray, target):
    """Loss and d(loss)/d(logits) for unnormalized frame scores.

    The gradient is softmax(logits) minus the alignment posterior mass
    assigned to each symbol at each frame.
    """
    logits = np.asarray(logits, dtype=np.float64)
    num_frames, num_symbols = logits.shape
    target = _check_target(target, num_symbols, num_frames)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))

    ext = _extended_target(target)
    alpha = _forward(log_probs, ext)
    beta = _backward(log_probs, ext)
    total = alpha[-1, -1] if ext.size == 1 else _logsumexp2(alpha[-1, -1], alpha[-1, -2])

    # occupancy of state s at frame t; alpha and beta both include the
    # emission at t, so subtract it once
    occupancy = alpha + beta - log_probs[:, ext]
    grad = probs.copy()
    for s, symbol in enumerate(ext):
        grad[:, symbol] -= np.exp(occupancy[:, s] - total)
    return float(-total), grad


def greedy_decode(frame_probs: np.ndarray):
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks."""
    path = np.argmax(np.asarray(frame_probs), axis=1)
    out = []
    prev = None
    for symbol in path:
        if symbol != prev and symbol != BLANK:
            out.append(int(symbol))
        prev = symbol
    return tuple(out)
