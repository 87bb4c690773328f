"""Incremental wait-k-stride-n inference.

A session consumes audio frames, finalizes encoder outputs once their
look-ahead window is satisfied (finalized values are bit-identical to an
offline pass, so any chunking of the input yields the same run), detects
segment boundaries online, and alternates reading n new source units with
beam-reranked writes of n tokens.

Listening times d(y_i) are stamped with the minimal audio prefix that
completed the stride's required unit, which makes them invariant to how
the caller chunks the audio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import ctc as ctc_mod
from . import metrics
from . import model as model_mod
from . import shrink as shrink_mod
from .autodiff import Tensor
from .data import EOS
from .model import EncoderOutput, Model, build_cross_attention_mask

READ, WRITE, FINISH = "read", "write", "finish"


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    score: float  # cumulative log-probability
    ended: bool = False


@dataclass
class SessionResult:
    tokens: list[int]
    record: metrics.LatencyRecord
    trace: list[tuple[float, str, str]]
    n_units: int
    segment_count: Optional[int]  # segments detected by the CTC head, if any


def _log_softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - math.log(np.exp(shifted).sum())


class StreamSession:
    """One simultaneous translation; strictly single-threaded."""

    def __init__(self, model: Model, wait_k=None, stride_n=None, beam_size: int = 5,
                 allow_schedule_override: bool = False, tgt_vocab=None):
        cfg = model.cfg
        self.model = model
        self.wait_k = cfg.wait_k if wait_k is None else wait_k
        self.stride_n = cfg.stride_n if stride_n is None else stride_n
        if (self.wait_k, self.stride_n) != (cfg.wait_k, cfg.stride_n) and not allow_schedule_override:
            raise ValueError(
                f"inference schedule ({self.wait_k},{self.stride_n}) differs from the "
                f"training schedule ({cfg.wait_k},{cfg.stride_n}); pass allow_schedule_override=True"
            )
        self.beam_size = beam_size
        self.tgt_vocab = tgt_vocab
        self.unit_kind = "segment" if (cfg.use_ctc and cfg.use_shrink) else "frame"
        self._buf = np.zeros((0, cfg.d_feat), dtype=np.float32)
        self._n_final = 0
        self._labels = np.zeros(0, dtype=np.int64)
        self._segments: list[tuple[int, int]] = []
        self._unit_ready_ms: list[float] = []
        self._committed: list[int] = []
        self._visibility: list[int] = []
        self._listen_ms: list[float] = []
        self._trace: list[tuple[float, str, str]] = []
        self._ended = False
        self._finished = False
        self._eos = False
        self._last_stamp: Optional[float] = None
        self._enc_cache: tuple[int, np.ndarray, Optional[np.ndarray]] | None = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def committed(self) -> list[int]:
        return list(self._committed)

    @property
    def listen_ms(self) -> list[float]:
        return list(self._listen_ms)

    @property
    def units_completed(self) -> int:
        return len(self._unit_ready_ms)

    @property
    def ended(self) -> bool:
        return self._ended

    @property
    def phase(self) -> str:
        if self._finished:
            return "finished"
        if self._ended or self.units_completed >= self._next_budget():
            return "writing"
        return "reading"

    def _next_budget(self):
        n = self.stride_n
        return n * (len(self._committed) // n) + self.wait_k

    def _fed_ms(self) -> float:
        return self._buf.shape[0] * self.model.cfg.frame_ms

    def _total_frames_out(self) -> int:
        return model_mod.output_length(self.model.cfg, self._buf.shape[0])

    def _total_ms(self) -> float:
        return self._total_frames_out() * self.model.cfg.output_frame_ms

    # -- encoding ------------------------------------------------------------

    def _encode_buffer(self) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Offline encode of everything buffered; cached per buffer length."""
        n = self._buf.shape[0]
        if self._enc_cache is not None and self._enc_cache[0] == n:
            return self._enc_cache[1], self._enc_cache[2]
        with ad.no_grad():
            states, posteriors = self.model.acoustic_encode(self._buf)
        post = posteriors.data if posteriors is not None else None
        self._enc_cache = (n, states.data, post)
        return states.data, post

    def _advance_finalized(self, n_final: int) -> list[tuple[int, int]]:
        """Labels/boundaries for newly finalized frames; returns new segments."""
        cfg = self.model.cfg
        new_segments = []
        if self.unit_kind == "frame":
            for _ in range(self._n_final, n_final):
                self._unit_ready_ms.append(self._fed_ms())
                idx = len(self._unit_ready_ms) - 1
                self._trace.append((self._fed_ms(), "READ", f"frame={idx}"))
            self._n_final = n_final
            return []
        _, post = self._encode_buffer()
        labels = ctc_mod.greedy_path(post[:n_final])
        old = self._labels
        self._labels = labels
        # a boundary between t and t+1 becomes knowable when label t+1 finalizes
        start_scan = max(len(old) - 1, 0)
        for t in range(start_scan, n_final - 1):
            if labels[t] != ctc_mod.BLANK and labels[t + 1] != labels[t]:
                seg_start = self._segments[-1][1] if self._segments else 0
                segment = (seg_start, t + 1)
                self._segments.append(segment)
                self._unit_ready_ms.append(self._fed_ms())
                new_segments.append(segment)
                self._trace.append(
                    (self._fed_ms(), "READ", f"segment={len(self._segments) - 1}")
                )
        self._n_final = n_final
        return new_segments

    def push_frames(self, frames: np.ndarray) -> list[tuple[int, int]]:
        """Feed audio; returns segments that completed. Frame-at-a-time
        bookkeeping keeps completion stamps chunking-invariant."""
        if self._ended:
            raise RuntimeError("push_frames after end-of-stream")
        frames = np.asarray(frames, dtype=np.float32).reshape(-1, self.model.cfg.d_feat)
        new_segments = []
        for row in frames:
            self._buf = np.concatenate([self._buf, row[None, :]], axis=0)
            n_final = model_mod.finalized_frames(self.model.cfg, self._buf.shape[0])
            if n_final > self._n_final:
                new_segments.extend(self._advance_finalized(n_final))
        return new_segments

    def end_stream(self) -> None:
        """No more audio: finalize every frame and close the last segment."""
        if self._ended:
            raise RuntimeError("end_stream called twice")
        self._ended = True
        cfg = self.model.cfg
        if self._buf.shape[0] < cfg.downsample:
            raise ValueError(
                f"stream ended with {self._buf.shape[0]} frames; the encoder needs "
                f"at least {cfg.downsample}"
            )
        t_out = self._total_frames_out()
        total = self._total_ms()
        if self.unit_kind == "frame":
            while self._n_final < t_out:
                self._n_final += 1
                self._unit_ready_ms.append(total)
                self._trace.append((total, "READ", f"frame={self._n_final - 1}"))
            return
        _, post = self._encode_buffer()
        labels = ctc_mod.greedy_path(post)
        start_scan = max(self._n_final - 1, 0)
        for t in range(start_scan, t_out - 1):
            if labels[t] != ctc_mod.BLANK and labels[t + 1] != labels[t]:
                seg_start = self._segments[-1][1] if self._segments else 0
                self._segments.append((seg_start, t + 1))
                self._unit_ready_ms.append(total)
                self._trace.append((total, "READ", f"segment={len(self._segments) - 1}"))
        self._labels = labels
        self._n_final = t_out
        tail_start = self._segments[-1][1] if self._segments else 0
        # the open tail always closes at end-of-stream; an all-blank stream
        # yields this single segment so the decoder has at least one unit
        self._segments.append((tail_start, t_out))
        self._unit_ready_ms.append(total)
        self._trace.append((total, "READ", f"segment={len(self._segments) - 1}"))

    # -- decoding --------------------------------------------------------------

    def _visible_source(self, n_units: int) -> EncoderOutput:
        states, post = self._encode_buffer()
        cfg = self.model.cfg
        with ad.no_grad():
            if self.unit_kind == "frame":
                units = Tensor(states[:n_units])
                return EncoderOutput(units, None, None, None, units)
            segs = self._segments[:n_units]
            end = segs[-1][1]
            seg_set = ctc_mod.SegmentSet(tuple(segs))
            blank_probs = Tensor(post[:end, cfg.blank_index])
            shrunk = shrink_mod.shrink_states(
                Tensor(states[:end]), blank_probs, self._labels[:end], seg_set,
                shrink_mod.ShrinkConfig(cfg.shrink_temperature, cfg.shrink_mode),
            )
            units = self.model.semantic_encode(shrunk)
        return EncoderOutput(Tensor(states[:end]), None, None, seg_set, units)

    def _score_continuations(self, source: EncoderOutput, prefix_tokens: list[int],
                             vis_rows: list[int]) -> np.ndarray:
        ids = np.array([EOS] + prefix_tokens, dtype=np.int64)
        n_src = source.n_units
        mask = np.zeros((len(ids), n_src), dtype=bool)
        for j, v in enumerate(vis_rows):
            mask[j, : min(v, n_src)] = True
        with ad.no_grad():
            logits = self.model.decode_logits(ids, source, mask)
        return _log_softmax_row(logits.data[-1].astype(np.float64))

    def _beam_stride(self, source: EncoderOutput, visible: int, stride_len: int) -> list[BeamHypothesis]:
        beams = [BeamHypothesis((), 0.0)]
        for _ in range(stride_len):
            candidates = []
            for hyp in beams:
                if hyp.ended:
                    candidates.append(hyp)
                    continue
                prefix = self._committed + list(hyp.tokens)
                vis_rows = self._visibility + [visible] * (len(hyp.tokens) + 1)
                logp = self._score_continuations(source, prefix, vis_rows)
                order = np.argsort(-logp, kind="stable")[: self.beam_size]
                for tok in order:
                    candidates.append(
                        BeamHypothesis(hyp.tokens + (int(tok),), hyp.score + float(logp[tok]),
                                       ended=int(tok) == EOS)
                    )
            candidates.sort(key=lambda h: (-h.score, h.tokens))
            beams = candidates[: self.beam_size]
            if all(h.ended for h in beams):
                break
        return beams

    def _write_stride(self) -> list[int]:
        """Beam search over the next stride; commits the best continuation."""
        if self._ended:
            visible = self.units_completed
            stamp = self._total_ms()
            cap = 2 * self.units_completed + 10
            stride_len = min(self.stride_n, max(cap - len(self._committed), 0))
            if stride_len == 0:
                self._eos = True
                return []
        else:
            budget = self._next_budget()
            visible = int(budget)
            stamp = self._unit_ready_ms[visible - 1]
            stride_len = self.stride_n
        self._last_stamp = stamp
        source = self._visible_source(visible)
        best = self._beam_stride(source, visible, stride_len)[0]
        committed = []
        for tok in best.tokens:
            if tok == EOS:
                self._eos = True
                break
            committed.append(tok)
            self._committed.append(tok)
            self._visibility.append(visible)
            self._listen_ms.append(stamp)
        if committed:
            text = " ".join(self._token_text(t) for t in committed)
            self._trace.append((stamp, "WRITE", text))
        return committed

    def _token_text(self, tok: int) -> str:
        if self.tgt_vocab is not None:
            return self.tgt_vocab.tokens[tok]
        return str(tok)

    def _finish(self) -> tuple[str, None]:
        self._finished = True
        if self._ended:
            stamp = self._total_ms()
        else:
            stamp = self._last_stamp if self._last_stamp is not None else self._fed_ms()
        self._trace.append((stamp, "FINISH", ""))
        return FINISH, None

    def step(self) -> tuple[str, Optional[list[int]]]:
        """Advance the policy one action: read, write, or finish."""
        if self._finished:
            raise RuntimeError("step on a finished session")
        if not self._ended:
            if self._eos:
                return self._finish()
            if self.units_completed >= self._next_budget():
                tokens = self._write_stride()
                if tokens:
                    return WRITE, tokens
                return self._finish()
            return READ, None
        if self._eos or len(self._committed) >= 2 * self.units_completed + 10:
            return self._finish()
        tokens = self._write_stride()
        if tokens:
            return WRITE, tokens
        return self._finish()

    def finalize(self, reference_length: Optional[int] = None) -> SessionResult:
        """Assemble the hypothesis, latency record, and trace."""
        if not self._finished:
            raise RuntimeError("finalize before the session finished")
        cfg = self.model.cfg
        total = self._total_ms()
        meta = (0.0, "META",
                f"frames={self._total_frames_out()} frame_ms={cfg.output_frame_ms} "
                f"total_ms={total:g} offset_ms={model_mod.effective_lookahead_ms(cfg)}")
        record = metrics.LatencyRecord(
            token_listen_ms=tuple(self._listen_ms),
            total_ms=total,
            source_frames=self._total_frames_out(),
            frame_ms=cfg.output_frame_ms,
            reference_length=reference_length if reference_length else max(len(self._committed), 1),
            lookahead_offset_ms=model_mod.effective_lookahead_ms(cfg),
        )
        seg_count = len(self._segments) if (cfg.use_ctc and self.unit_kind == "segment") else None
        return SessionResult(
            tokens=list(self._committed),
            record=record,
            trace=[meta] + self._trace,
            n_units=self.units_completed,
            segment_count=seg_count,
        )


def translate_stream(model: Model, features: np.ndarray, *, wait_k=None, stride_n=None,
                     beam_size: int = 5, chunk_frames: Optional[int] = None,
                     reference_length: Optional[int] = None, tgt_vocab=None,
                     allow_schedule_override: bool = False) -> SessionResult:
    """Drive one utterance through a session, pushing fixed-size chunks."""
    session = StreamSession(model, wait_k=wait_k, stride_n=stride_n, beam_size=beam_size,
                            allow_schedule_override=allow_schedule_override, tgt_vocab=tgt_vocab)
    feats = np.asarray(features, dtype=np.float32)
    chunk = chunk_frames or model.cfg.downsample
    pos = 0
    while True:
        action, _ = session.step()
        if action == READ:
            if pos < feats.shape[0]:
                session.push_frames(feats[pos: pos + chunk])
                pos += chunk
            else:
                session.end_stream()
        elif action == FINISH:
            break
    if pos < feats.shape[0]:
        # an early end-of-sequence stopped the writes; feed the rest so the
        # source-duration accounting matches a single-push run
        session.push_frames(feats[pos:])
    if not session.ended:
        session.end_stream()
    return session.finalize(reference_length)
