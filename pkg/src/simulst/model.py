"""The full network: gradually-downsampling acoustic encoder with a CTC
head, weighted shrinking into segment states, a semantic encoder, and a
prefix-to-prefix decoder whose cross-attention follows the
wait-k-stride-n schedule.

Everything operates on one utterance at a time (desk scale); batches are
loops with padding sliced off before any computation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import ctc as ctc_mod
from . import shrink as shrink_mod
from .autodiff import Tensor
from .data import EOS, PAD, Batch
from .shrink import ShrinkConfig

log = logging.getLogger(__name__)

WAIT_INF = math.inf


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 16
    n_blocks: int = 3
    convs_per_block: int = 3
    conv_kernel: int = 3
    conv_lookahead: tuple[int, ...] = (0, 0, 1)  # per conv inside each block
    transformer_layers_per_block: int = 2
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    semantic_layers: int = 6
    decoder_layers: int = 4
    src_vocab_size: int = 23
    tgt_vocab_size: int = 23
    shrink_temperature: float = 1.0
    shrink_mode: str = "weighted"
    blank_penalty_weight: float = 0.5
    blank_penalty_mode: str = "argmax_blank_frames"
    ctc_loss_weight: float = 1.0
    wait_k: float = 3
    stride_n: int = 2
    unidirectional: bool = True
    dropout: float = 0.1
    use_ctc: bool = True
    use_shrink: bool = True
    gradual_downsample: bool = True
    frame_ms: int = 10

    def __post_init__(self):
        if self.convs_per_block < 2:
            raise ValueError("need at least 2 convs per block (the second carries stride 2)")
        if len(self.conv_lookahead) != self.convs_per_block:
            raise ValueError("conv_lookahead needs one entry per conv in a block")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.wait_k != WAIT_INF and (self.wait_k < 1 or self.wait_k != int(self.wait_k)):
            raise ValueError(f"wait_k must be a positive integer or inf, got {self.wait_k}")
        if self.stride_n < 1:
            raise ValueError(f"stride_n must be >= 1, got {self.stride_n}")

    @property
    def downsample(self) -> int:
        return 2 ** self.n_blocks

    @property
    def output_frame_ms(self) -> int:
        """Milliseconds of audio per post-encoder frame (T_s)."""
        return self.frame_ms * self.downsample

    @property
    def blank_index(self) -> int:
        return self.src_vocab_size

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _conv_layout(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(block, index-in-block, stride) for every conv in execution order."""
    layout = []
    for b in range(cfg.n_blocks):
        for i in range(cfg.convs_per_block):
            layout.append((b, i, 2 if i == 1 else 1))
    return layout


def effective_lookahead_frames(cfg: ModelConfig) -> int:
    """Total right-context of the conv stack, in input frames."""
    total = 0
    cumulative_stride = 1
    for _, i, stride in _conv_layout(cfg):
        total += cfg.conv_lookahead[i] * cumulative_stride
        cumulative_stride *= stride
    return total


def effective_lookahead_ms(cfg: ModelConfig) -> int:
    return effective_lookahead_frames(cfg) * cfg.frame_ms


def finalized_frames(cfg: ModelConfig, buffered: int) -> int:
    """How many encoder output frames are final given ``buffered`` input
    frames: frame t needs inputs up to t*downsample + lookahead."""
    horizon = effective_lookahead_frames(cfg)
    if buffered <= horizon:
        return 0
    return (buffered - 1 - horizon) // cfg.downsample + 1


def output_length(cfg: ModelConfig, t_input: int) -> int:
    out = t_input
    for _ in range(cfg.n_blocks):
        out = -(-out // 2)
    return out


def build_cross_attention_mask(wait_k, stride_n: int, n_targets: int, n_source: int) -> np.ndarray:
    """Boolean [n_targets, n_source]: target position t (1-indexed) may
    attend the first stride_n*floor((t-1)/stride_n) + wait_k source units."""
    if n_source < 1:
        raise ValueError("mask needs at least one source unit")
    if stride_n < 1 or (wait_k != WAIT_INF and wait_k < 1):
        raise ValueError(f"invalid schedule wait_k={wait_k}, stride_n={stride_n}")
    t = np.arange(1, n_targets + 1)
    budget = stride_n * ((t - 1) // stride_n) + wait_k
    counts = np.minimum(budget, n_source).astype(np.int64)
    return np.arange(n_source)[None, :] < counts[:, None]


def sinusoidal_positions(n: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(n)[:, None].astype(np.float64)
    dim = np.arange((d + 1) // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out.astype(dtype)


@dataclass
class EncoderOutput:
    """Everything the decoder and the policy need about one source prefix."""

    states: Tensor  # [T', d_model] acoustic states
    posteriors: Optional[Tensor]  # [T', |V|+1] CTC grid, blank last
    path: Optional[np.ndarray]  # greedy labels, BLANK sentinel for blank
    segments: Optional[ctc_mod.SegmentSet]
    units: Tensor  # [S, d_model] decoder-facing source states

    @property
    def n_units(self) -> int:
        return self.units.shape[0]


class Model:
    """Parameter container plus forward passes; training mutates params only
    through the optimizer."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self._build(rng)

    # -- parameter construction -------------------------------------------

    def _linear(self, name: str, fan_in: int, fan_out: int, rng) -> None:
        self.params[f"{name}.w"] = ad.uniform_init((fan_in, fan_out), fan_in, rng)
        self.params[f"{name}.b"] = ad.zeros_param(fan_out)

    def _norm(self, name: str) -> None:
        self.params[f"{name}.g"] = Tensor(np.ones(self.cfg.d_model), requires_grad=True)
        self.params[f"{name}.b"] = ad.zeros_param(self.cfg.d_model)

    def _tf_block(self, prefix: str, rng, cross: bool = False) -> None:
        d = self.cfg.d_model
        self._norm(f"{prefix}.ln1")
        for p in ("q", "k", "v", "o"):
            self._linear(f"{prefix}.attn.{p}", d, d, rng)
        if cross:
            self._norm(f"{prefix}.lnx")
            for p in ("q", "k", "v", "o"):
                self._linear(f"{prefix}.xattn.{p}", d, d, rng)
        self._norm(f"{prefix}.ln2")
        self._linear(f"{prefix}.ffn.1", d, self.cfg.ffn_dim, rng)
        self._linear(f"{prefix}.ffn.2", self.cfg.ffn_dim, d, rng)

    def _build(self, rng) -> None:
        cfg = self.cfg
        c_in = cfg.d_feat
        for b, i, _ in _conv_layout(cfg):
            k = cfg.conv_kernel
            self.params[f"acoustic.conv{b}.{i}.w"] = ad.uniform_init(
                (k, c_in, cfg.d_model), k * c_in, rng
            )
            self.params[f"acoustic.conv{b}.{i}.b"] = ad.zeros_param(cfg.d_model)
            c_in = cfg.d_model
        for b in range(cfg.n_blocks):
            for l in range(cfg.transformer_layers_per_block):
                self._tf_block(f"acoustic.block{b}.tf{l}", rng)
        self._linear("ctc.hidden", cfg.d_model, cfg.d_model, rng)
        self._linear("ctc.out", cfg.d_model, cfg.src_vocab_size + 1, rng)
        for l in range(cfg.semantic_layers):
            self._tf_block(f"semantic.tf{l}", rng)
        self.params["decoder.embed"] = ad.uniform_init(
            (cfg.tgt_vocab_size, cfg.d_model), cfg.d_model, rng
        )
        for l in range(cfg.decoder_layers):
            self._tf_block(f"decoder.tf{l}", rng, cross=True)
        self._norm("decoder.ln_out")
        self._linear("decoder.out", cfg.d_model, cfg.tgt_vocab_size, rng)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encoder_parameters(self) -> dict[str, Tensor]:
        """Acoustic encoder + CTC head, the subset the pre-training stage updates."""
        return {k: v for k, v in self.params.items() if k.startswith(("acoustic.", "ctc."))}

    # -- forward pieces ----------------------------------------------------

    def _affine(self, name: str, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _multihead(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        n_heads = self.cfg.n_heads
        d_head = self.cfg.d_model // n_heads
        q = self._affine(f"{prefix}.q", q_in)
        k = self._affine(f"{prefix}.k", kv_in)
        v = self._affine(f"{prefix}.v", kv_in)
        heads = []
        for h in range(n_heads):
            lo, hi = h * d_head, (h + 1) * d_head
            heads.append(
                ad.masked_attention(ad.cols(q, lo, hi), ad.cols(k, lo, hi), ad.cols(v, lo, hi), mask)
            )
        return self._affine(f"{prefix}.o", ad.concat_cols(heads))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self._affine(f"{prefix}.2", ad.relu(self._affine(f"{prefix}.1", x)))

    def _norm_of(self, name: str, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _tf_forward(self, prefix: str, x: Tensor, self_mask: np.ndarray, rng,
                    cross_kv: Tensor | None = None, cross_mask: np.ndarray | None = None) -> Tensor:
        p = self.cfg.dropout
        normed = self._norm_of(f"{prefix}.ln1", x)
        h = self._multihead(f"{prefix}.attn", normed, normed, self_mask)
        x = ad.add(x, ad.dropout(h, p, rng))
        if cross_kv is not None:
            h = self._multihead(f"{prefix}.xattn", self._norm_of(f"{prefix}.lnx", x), cross_kv, cross_mask)
            x = ad.add(x, ad.dropout(h, p, rng))
        h = self._ffn(f"{prefix}.ffn", self._norm_of(f"{prefix}.ln2", x))
        return ad.add(x, ad.dropout(h, p, rng))

    def _self_mask(self, n: int) -> np.ndarray:
        if self.cfg.unidirectional:
            return np.tril(np.ones((n, n), dtype=bool))
        return np.ones((n, n), dtype=bool)

    def acoustic_encode(self, features: np.ndarray, rng=None) -> tuple[Tensor, Optional[Tensor]]:
        """Conv-Transformer stack plus the CTC grid (None when CTC is off)."""
        cfg = self.cfg
        if features.shape[0] < cfg.downsample:
            raise ValueError(
                f"input of {features.shape[0]} frames is shorter than the "
                f"downsampling factor {cfg.downsample}"
            )
        x = Tensor(np.asarray(features, dtype=ad.default_dtype()))

        def convs_of_block(b: int, x: Tensor) -> Tensor:
            for i in range(cfg.convs_per_block):
                kernel = self.params[f"acoustic.conv{b}.{i}.w"]
                stride = 2 if i == 1 else 1
                x = ad.conv1d_lookahead(x, kernel, stride, cfg.conv_lookahead[i])
                x = ad.relu(ad.add(x, self.params[f"acoustic.conv{b}.{i}.b"]))
            return x

        def transformers_of_block(b: int, x: Tensor) -> Tensor:
            mask = self._self_mask(x.shape[0])
            for l in range(cfg.transformer_layers_per_block):
                x = self._tf_forward(f"acoustic.block{b}.tf{l}", x, mask, rng)
            return x

        if cfg.gradual_downsample:
            for b in range(cfg.n_blocks):
                x = convs_of_block(b, x)
                x = transformers_of_block(b, x)
        else:
            # ablation: all downsampling convs first, Transformer layers after
            for b in range(cfg.n_blocks):
                x = convs_of_block(b, x)
            for b in range(cfg.n_blocks):
                x = transformers_of_block(b, x)

        posteriors = None
        if cfg.use_ctc:
            hidden = ad.relu(self._affine("ctc.hidden", x))
            posteriors = ad.softmax(self._affine("ctc.out", hidden), axis=-1)
        return x, posteriors

    def semantic_encode(self, shrunk: Tensor, rng=None) -> Tensor:
        pos = sinusoidal_positions(shrunk.shape[0], self.cfg.d_model, shrunk.data.dtype)
        x = ad.add(shrunk, Tensor(pos, dtype=shrunk.data.dtype))
        mask = self._self_mask(x.shape[0])
        for l in range(self.cfg.semantic_layers):
            x = self._tf_forward(f"semantic.tf{l}", x, mask, rng)
        return x

    def encode_source(self, features: np.ndarray, rng=None) -> EncoderOutput:
        """Acoustic encoding, boundary detection, shrinking, semantic encoding."""
        cfg = self.cfg
        states, posteriors = self.acoustic_encode(features, rng)
        path = segments = None
        units = states
        if cfg.use_ctc:
            path = ctc_mod.greedy_path(posteriors)
            segments = ctc_mod.detect_boundaries(path)
            if cfg.use_shrink:
                blank_probs = ad.col(posteriors, cfg.blank_index)
                shrunk = shrink_mod.shrink_states(
                    states, blank_probs, path, segments,
                    ShrinkConfig(cfg.shrink_temperature, cfg.shrink_mode),
                )
                units = self.semantic_encode(shrunk, rng)
        return EncoderOutput(states, posteriors, path, segments, units)

    def decode_logits(self, prefix_ids: np.ndarray, source: EncoderOutput,
                      cross_mask: np.ndarray, rng=None) -> Tensor:
        """Teacher-forced decoder logits for inputs [EOS, y_1, ..]."""
        cfg = self.cfg
        emb = ad.scale(ad.embedding(self.params["decoder.embed"], prefix_ids), math.sqrt(cfg.d_model))
        pos = sinusoidal_positions(len(prefix_ids), cfg.d_model, emb.data.dtype)
        x = ad.dropout(ad.add(emb, Tensor(pos, dtype=emb.data.dtype)), cfg.dropout, rng)
        causal = np.tril(np.ones((len(prefix_ids), len(prefix_ids)), dtype=bool))
        for l in range(cfg.decoder_layers):
            x = self._tf_forward(f"decoder.tf{l}", x, causal, rng,
                                 cross_kv=source.units, cross_mask=cross_mask)
        return self._affine("decoder.out", self._norm_of("decoder.ln_out", x))

    # -- training objective -------------------------------------------------

    def forward_train(self, batch: Batch, rng=None, compute_st: bool = True,
                      wait_k=None) -> tuple[Optional[Tensor], Optional[Tensor], dict]:
        """Mean token NLL under the wait-k-stride-n mask plus the CTC term.

        Utterances whose transcript cannot align to the downsampled length
        (or that are shorter than the downsampling factor) are skipped with
        a warning and counted in the diagnostics. ``compute_st=False``
        restricts the pass to the CTC objective (pre-training). ``wait_k``
        overrides the configured schedule for this pass only.
        """
        cfg = self.cfg
        k = cfg.wait_k if wait_k is None else wait_k
        st_terms: list[Tensor] = []
        ctc_terms: list[Tensor] = []
        n_tokens = 0
        correct = 0
        blank_frames = 0
        total_frames = 0
        skipped = 0
        seg_counts: list[int] = []
        for i in range(len(batch)):
            feats = batch.features[i, : batch.frame_lengths[i]]
            transcript = batch.source[i, : batch.source_lengths[i]]
            translation = batch.target[i, : batch.target_lengths[i]]
            if feats.shape[0] < cfg.downsample:
                skipped += 1
                log.warning("skipping %s: %d frames < downsampling factor", batch.ids[i], feats.shape[0])
                continue
            if compute_st:
                enc = self.encode_source(feats, rng)
            else:
                states, posteriors = self.acoustic_encode(feats, rng)
                path = ctc_mod.greedy_path(posteriors)
                enc = EncoderOutput(states, posteriors, path, ctc_mod.detect_boundaries(path), states)
            if cfg.use_ctc:
                try:
                    ctc_terms.append(
                        ctc_mod.blank_limited_ctc_loss(
                            enc.posteriors, transcript,
                            lam=cfg.blank_penalty_weight, mode=cfg.blank_penalty_mode,
                        )
                    )
                except ctc_mod.InfeasibleAlignmentError:
                    skipped += 1
                    log.warning("skipping %s: transcript too long for %d encoder frames",
                                batch.ids[i], enc.states.shape[0])
                    continue
                blank_frames += int((enc.path == ctc_mod.BLANK).sum())
                total_frames += enc.path.size
                seg_counts.append(len(enc.segments))
            if not compute_st:
                continue
            prefix = np.concatenate([[EOS], translation])
            target_out = np.concatenate([translation, [EOS]])
            mask = build_cross_attention_mask(k, cfg.stride_n, len(target_out), enc.n_units)
            logits = self.decode_logits(prefix, enc, mask, rng)
            st_terms.append(ad.scale(ad.cross_entropy(logits, target_out, PAD), float(len(target_out))))
            n_tokens += len(target_out)
            correct += int((logits.data.argmax(axis=1) == target_out).sum())
        loss_st = None
        if st_terms:
            loss_st = st_terms[0]
            for term in st_terms[1:]:
                loss_st = ad.add(loss_st, term)
            loss_st = ad.scale(loss_st, 1.0 / n_tokens)
        loss_ctc = None
        if ctc_terms:
            loss_ctc = ctc_terms[0]
            for term in ctc_terms[1:]:
                loss_ctc = ad.add(loss_ctc, term)
            loss_ctc = ad.scale(loss_ctc, 1.0 / len(ctc_terms))
        diagnostics = {
            "tokens": n_tokens,
            "token_correct": correct,
            "token_accuracy": correct / max(n_tokens, 1),
            "blank_fraction": blank_frames / max(total_frames, 1),
            "skipped": skipped,
            "segment_counts": seg_counts,
        }
        return loss_st, loss_ctc, diagnostics

    def total_loss(self, loss_st: Tensor, loss_ctc: Optional[Tensor]) -> Tensor:
        if loss_ctc is None or self.cfg.ctc_loss_weight == 0.0:
            return loss_st
        return ad.add(loss_st, ad.scale(loss_ctc, self.cfg.ctc_loss_weight))
