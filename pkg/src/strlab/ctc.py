"""CTC alignment: log-space forward-backward loss, greedy decoding, and an
exhaustive path-enumeration oracle for tiny instances.

Frame posteriors are log-probabilities of shape (T, N, C+1) with class 0
reserved for blank. The loss is the batch mean of -log p(target | frames).
"""
from __future__ import annotations

import numpy as np

from .errors import BlankInTarget, ShapeMismatch, TargetTooLong, TooLarge, VocabMismatch
from .tensor import Tensor, make_op

BLANK = 0
NEG_INF = -np.inf


def _log_sum_exp(*vals):
    m = max(vals)
    if m == NEG_INF:
        return NEG_INF
    return m + np.log(sum(np.exp(v - m) for v in vals))


def _extended(labels):
    ext = [BLANK]
    for l in labels:
        ext.append(l)
        ext.append(BLANK)
    return ext


def _forward_backward(lp, labels):
    """Alpha/beta recursions for one item; lp is (T, C+1) log-probs.

    Both alpha and beta include the emission at their own frame, so
    p(target) = sum_s exp(alpha[t, s] + beta[t, s] - lp[t, ext[s]]) at any t.
    """
    t_len = lp.shape[0]
    ext = _extended(labels)
    s_len = len(ext)

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, BLANK]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        for s in range(s_len):
            best = alpha[t - 1, s]
            if s >= 1:
                best = _log_sum_exp(best, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2]:
                best = _log_sum_exp(best, alpha[t - 1, s - 2])
            alpha[t, s] = best + lp[t, ext[s]]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = lp[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = lp[t_len - 1, ext[s_len - 2]]
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            best = beta[t + 1, s]
            if s + 1 < s_len:
                best = _log_sum_exp(best, beta[t + 1, s + 1])
            if s + 2 < s_len and ext[s] != BLANK and ext[s] != ext[s + 2]:
                best = _log_sum_exp(best, beta[t + 1, s + 2])
            beta[t, s] = best + lp[t, ext[s]]

    log_p = _log_sum_exp(alpha[t_len - 1, s_len - 1], alpha[t_len - 1, s_len - 2] if s_len > 1 else NEG_INF)
    return ext, alpha, beta, log_p


def min_frames(ids) -> int:
    """Fewest posterior frames that can emit the label sequence: one per
    label plus a forced blank between adjacent repeats."""
    ids = list(ids)
    return len(ids) + sum(1 for a, b in zip(ids, ids[1:]) if a == b)


def _check_targets(t_len, n_classes, targets):
    for seq in targets:
        ids = seq.ids if hasattr(seq, "ids") else list(seq)
        if any(i == BLANK for i in ids):
            raise BlankInTarget("target contains the reserved blank index 0")
        if any(not (1 <= i < n_classes) for i in ids):
            raise VocabMismatch(f"target id out of range [1, {n_classes - 1}]")
        needed = min_frames(ids)
        if needed > t_len:
            raise TargetTooLong(f"target needs at least {needed} frames, posterior has T={t_len}")


def ctc_loss(log_probs: Tensor, targets) -> Tensor:
    """Mean over the batch of -log p(target | log_probs), differentiable
    w.r.t. log_probs.

    ``targets`` is a sequence of LabelSeq (or plain id lists), one per batch
    item, ids in [1, C].
    """
    if log_probs.data.ndim != 3:
        raise ShapeMismatch(f"ctc_loss: expected (T, N, C+1), got {log_probs.shape}")
    t_len, n, n_classes = log_probs.shape
    if len(targets) != n:
        raise ShapeMismatch(f"ctc_loss: {n} batch items but {len(targets)} targets")
    _check_targets(t_len, n_classes, targets)

    lp = log_probs.data.astype(np.float64, copy=False)
    grad = np.zeros_like(lp)
    total = 0.0
    for k in range(n):
        seq = targets[k]
        ids = list(seq.ids if hasattr(seq, "ids") else seq)
        ext, alpha, beta, log_p = _forward_backward(lp[:, k, :], ids)
        total += -log_p
        # d(-log P)/d lp[t, c] = -(posterior mass of states emitting c at t)
        for t in range(t_len):
            for s, lab in enumerate(ext):
                contrib = alpha[t, s] + beta[t, s] - lp[t, k, lab] - log_p
                if contrib > NEG_INF:
                    grad[t, k, lab] -= np.exp(contrib)
    loss = total / n
    grad /= n

    def bwd(g):
        return (g * grad.astype(log_probs.dtype, copy=False),)

    return make_op(np.asarray(loss), (log_probs,), bwd, "ctc_loss")


def collapse(path, blank: int = BLANK):
    """Remove adjacent repeats, then blanks (the CTC many-to-one map)."""
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def greedy_decode(log_probs: Tensor, vocab) -> list:
    """Frame-wise argmax, collapse repeats, drop blanks, map to text."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if data.ndim != 3:
        raise ShapeMismatch(f"greedy_decode: expected (T, N, C+1), got {data.shape}")
    if data.shape[2] != len(vocab) + 1:
        raise VocabMismatch(f"posterior has {data.shape[2] - 1} classes, vocabulary has {len(vocab)}")
    paths = data.argmax(axis=2)  # (T, N)
    return [vocab.decode(collapse(paths[:, k])) for k in range(data.shape[1])]


def brute_force_likelihood(log_probs, target) -> float:
    """Exact -log p(target) by enumerating every length-T frame path that
    collapses to the target. Test oracle; guarded to tiny instances."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if data.ndim == 3:
        if data.shape[1] != 1:
            raise ShapeMismatch("oracle takes a single item, got batched posterior")
        data = data[:, 0, :]
    t_len, n_classes = data.shape
    if t_len > 8 or n_classes - 1 > 4:
        raise TooLarge(f"oracle limited to T<=8, C<=4, got T={t_len}, C={n_classes - 1}")
    ids = list(target.ids if hasattr(target, "ids") else target)
    if any(i == BLANK for i in ids):
        raise BlankInTarget("target contains the reserved blank index 0")

    log_p = NEG_INF
    path = [0] * t_len

    def rec(t, acc):
        nonlocal log_p
        if t == t_len:
            if collapse(path) == ids:
                log_p = _log_sum_exp(log_p, acc)
            return
        for c in range(n_classes):
            path[t] = c
            rec(t + 1, acc + data[t, c])

    rec(0, 0.0)
    return float(-log_p)
