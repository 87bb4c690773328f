"""Collapsing per-frame encoder states into per-segment states.

Each segment becomes one vector: a softmax over the frames' non-blank
confidence mu * (1 - p_blank) weights the frames, so frames the alignment
head considers informative dominate. mu=0 degenerates to a plain average
and mu -> infinity to picking the single most confident frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ctc
from .autodiff import Tensor
from .ctc import SegmentSet

MODES = ("weighted", "average", "drop_blank", "argmax_frame")


@dataclass(frozen=True)
class ShrinkConfig:
    temperature: float = 1.0
    mode: str = "weighted"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"shrink mode must be one of {MODES}, got {self.mode!r}")
        if not (np.isfinite(self.temperature) and self.temperature >= 0):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")


def _check_inputs(states: Tensor, blank_probs: Tensor, segments: SegmentSet):
    t_frames = states.shape[0]
    if blank_probs.shape != (t_frames,):
        raise ad.ShapeError(f"blank_probs shape {blank_probs.shape} != ({t_frames},)")
    if segments.total_frames != t_frames:
        raise ValueError(f"segments cover {segments.total_frames} frames, states have {t_frames}")
    if ((blank_probs.data < 0) | (blank_probs.data > 1)).any():
        raise ValueError("blank probabilities must lie in [0, 1]")


def weighted_shrink(
    states: Tensor,
    blank_probs: Tensor,
    segments: SegmentSet,
    cfg: ShrinkConfig = ShrinkConfig(),
) -> Tensor:
    """One output row per segment; gradients flow into states and blank_probs."""
    _check_inputs(states, blank_probs, segments)
    if cfg.mode == "drop_blank":
        raise ValueError("drop_blank mode needs the greedy path; call drop_blank_shrink")
    mu = 0.0 if cfg.mode == "average" else cfg.temperature
    out_rows = []
    for start, stop in segments:
        seg = ad.rows(states, start, stop)
        if cfg.mode == "argmax_frame":
            # hard selection: earliest frame with minimal blank probability
            pick = int(np.argmin(blank_probs.data[start:stop]))
            w = np.zeros((1, stop - start), dtype=states.data.dtype)
            w[0, pick] = 1.0
            out_rows.append(ad.matmul(Tensor(w, dtype=states.data.dtype), seg))
            continue
        conf = ad.scale(ad.sub(Tensor(1.0, dtype=states.data.dtype), ad.rows(blank_probs, start, stop)), mu)
        w = ad.reshape(ad.softmax(conf, axis=-1), (1, stop - start))
        out_rows.append(ad.matmul(w, seg))
    return ad.concat_rows(out_rows)


def drop_blank_shrink(states: Tensor, path, segments: SegmentSet) -> Tensor:
    """Prior-work baseline: average only non-blank frames per segment,
    falling back to a plain average when a segment is entirely blank."""
    path = np.asarray(path)
    if segments.total_frames != states.shape[0] or path.size != states.shape[0]:
        raise ValueError("states, path, and segments must agree on frame count")
    out_rows = []
    for start, stop in segments:
        keep = path[start:stop] != ctc.BLANK
        if not keep.any():
            keep = np.ones(stop - start, dtype=bool)
        w = (keep / keep.sum()).astype(states.data.dtype).reshape(1, -1)
        out_rows.append(ad.matmul(Tensor(w, dtype=states.data.dtype), ad.rows(states, start, stop)))
    return ad.concat_rows(out_rows)


def shrink_states(
    states: Tensor,
    blank_probs: Tensor,
    path,
    segments: SegmentSet,
    cfg: ShrinkConfig,
) -> Tensor:
    """Dispatch on the configured mode (drop_blank needs the greedy path)."""
    if cfg.mode == "drop_blank":
        return drop_blank_shrink(states, path, segments)
    return weighted_shrink(states, blank_probs, segments, cfg)
