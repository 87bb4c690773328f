"""CTC alignment machinery over per-frame posterior grids.

A posterior grid is a Tensor of shape [T', |V|+1]: one distribution per
downsampled frame, blank fixed as the LAST column. The negative
log-likelihood runs the forward algorithm in log space (float64
internally) and exposes a hand-written gradient w.r.t. the grid, so it
composes with the autodiff tape through the upstream softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class InfeasibleAlignmentError(ValueError):
    """The label sequence admits no CTC path of the given length."""


BLANK = -1  # blank marker in label-sequence form (grids keep blank as the last column)


@dataclass(frozen=True)
class SegmentSet:
    """Ordered half-open frame intervals partitioning [0, total_frames)."""

    intervals: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.intervals:
            raise ValueError("SegmentSet needs at least one interval")
        if self.intervals[0][0] != 0:
            raise ValueError("first segment must start at frame 0")
        for (s, e), (s2, _) in zip(self.intervals, self.intervals[1:]):
            if e != s2:
                raise ValueError(f"gap or overlap at frame {e}")
        for s, e in self.intervals:
            if e <= s:
                raise ValueError(f"empty segment [{s}, {e})")

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    @property
    def total_frames(self) -> int:
        return self.intervals[-1][1]


def min_path_length(labels) -> int:
    """Shortest frame count admitting a valid path: repeats need a blank."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0
    return int(labels.size + (labels[1:] == labels[:-1]).sum())


def _extended_labels(labels: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * labels.size + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def ctc_nll(posteriors: Tensor, labels) -> Tensor:
    """-ln of the total probability of all paths collapsing to ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    t_frames, width = posteriors.shape
    blank = width - 1
    if labels.size == 0:
        raise ValueError("ctc_nll: empty label sequence")
    if ((labels < 0) | (labels >= blank)).any():
        raise ValueError(f"ctc_nll: labels must lie in [0, {blank})")
    need = min_path_length(labels)
    if t_frames < need:
        raise InfeasibleAlignmentError(
            f"{t_frames} frames cannot align {labels.size} labels (need >= {need})"
        )

    ext = _extended_labels(labels, blank)
    n_states = ext.size
    with np.errstate(divide="ignore"):
        logp = np.log(posteriors.data.astype(np.float64))
    lab = logp[:, ext]  # [T, S] emission log-probs per extended state

    # forward pass
    alpha = np.full((t_frames, n_states), -np.inf)
    alpha[0, 0] = lab[0, 0]
    alpha[0, 1] = lab[0, 1]
    skip_ok = np.zeros(n_states, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    for t in range(1, t_frames):
        stay = alpha[t - 1]
        prev = np.concatenate([[-np.inf], alpha[t - 1, :-1]])
        acc = np.logaddexp(stay, prev)
        skip = np.concatenate([[-np.inf, -np.inf], alpha[t - 1, :-2]])
        acc = np.where(skip_ok, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lab[t]
    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])

    # backward pass; beta excludes the emission at its own frame
    beta = np.full((t_frames, n_states), -np.inf)
    beta[-1, -1] = 0.0
    beta[-1, -2] = 0.0
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1] + lab[t + 1]
        stay = nxt
        succ = np.concatenate([nxt[1:], [-np.inf]])
        acc = np.logaddexp(stay, succ)
        skip_to = np.concatenate([skip_ok[2:], [False, False]])
        skip = np.concatenate([nxt[2:], [-np.inf, -np.inf]])
        acc = np.where(skip_to, np.logaddexp(acc, skip), acc)
        beta[t] = acc

    occupancy = alpha + beta  # log path mass through each (frame, state)

    def vjp(g):
        grad = np.zeros_like(posteriors.data, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            contrib = np.exp(occupancy - log_z - lab)
        contrib[~np.isfinite(contrib)] = 0.0
        for s in range(n_states):
            grad[:, ext[s]] -= contrib[:, s]
        return (float(g) * grad.astype(posteriors.data.dtype),)

    value = np.asarray(-log_z, dtype=posteriors.data.dtype)
    return ad.record_op(value, (posteriors,), vjp)


def collapse_path(path) -> list[int]:
    """Apply the many-to-one path mapping: merge consecutive repeats, drop blanks."""
    out: list[int] = []
    prev = None
    for label in path:
        if label != prev:
            if label != BLANK:
                out.append(int(label))
            prev = label
    return out


def greedy_path(posteriors) -> np.ndarray:
    """Per-frame argmax labels; blank mapped to the BLANK sentinel.

    Ties break toward the lowest index, so a non-blank label beats an
    equally probable blank (blank sits in the last column).
    """
    grid = posteriors.data if isinstance(posteriors, Tensor) else np.asarray(posteriors)
    blank = grid.shape[1] - 1
    path = grid.argmax(axis=1)
    return np.where(path == blank, BLANK, path)


def detect_boundaries(path) -> SegmentSet:
    """Segment a label path: a boundary sits between frames t and t+1 when
    frame t is non-blank and frame t+1 carries a different label. Leading
    and trailing blanks fold into the first and last segments."""
    path = np.asarray(path)
    if path.size < 1:
        raise ValueError("detect_boundaries: empty path")
    cuts = [0]
    for t in range(path.size - 1):
        if path[t] != BLANK and path[t + 1] != path[t]:
            cuts.append(t + 1)
    cuts.append(path.size)
    return SegmentSet(tuple(zip(cuts[:-1], cuts[1:])))


def blank_penalty(posteriors: Tensor, mode: str = "argmax_blank_frames") -> Tensor:
    """Accumulated blank posterior mass, per the blank-limited loss.

    ``argmax_blank_frames`` sums p(blank) over frames whose argmax label is
    blank (the argmax selection is held constant for gradients);
    ``all_frames`` sums p(blank) over every frame.
    """
    blank = posteriors.shape[1] - 1
    if mode == "argmax_blank_frames":
        sel = (posteriors.data.argmax(axis=1) == blank).astype(posteriors.data.dtype)
    elif mode == "all_frames":
        sel = np.ones(posteriors.shape[0], dtype=posteriors.data.dtype)
    else:
        raise ValueError(f"unknown blank_penalty_mode {mode!r}")
    return ad.reduce_sum(ad.mul(ad.col(posteriors, blank), Tensor(sel, dtype=posteriors.data.dtype)))


def blank_limited_ctc_loss(
    posteriors: Tensor,
    labels,
    lam: float,
    mode: str = "argmax_blank_frames",
) -> Tensor:
    """ctc_nll plus ``lam`` times the blank penalty."""
    if lam < 0:
        raise ValueError(f"blank penalty weight must be >= 0, got {lam}")
    nll = ctc_nll(posteriors, labels)
    if lam == 0.0:
        return nll
    return ad.add(nll, ad.scale(blank_penalty(posteriors, mode), lam))


def shrink_quality(segment_counts, transcript_lengths) -> dict[int, float]:
    """Fraction of utterances whose |#segments - transcript length| <= 2, 4, 6."""
    counts = np.asarray(segment_counts, dtype=np.int64)
    lengths = np.asarray(transcript_lengths, dtype=np.int64)
    if counts.size == 0 or counts.size != lengths.size:
        raise ValueError("shrink_quality: need one segment count per transcript")
    diff = np.abs(counts - lengths)
    return {n: float((diff <= n).mean() * 100.0) for n in (2, 4, 6)}
