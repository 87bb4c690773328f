"""Two-stage training (CTC pre-training, then joint fine-tuning),
checkpointing with bit-exact resume, checkpoint averaging, and the
evaluation loop driving the streaming engine.

Checkpoint file: magic "RTCK0001", u64 little-endian JSON header length,
a JSON header (config, fingerprint, optimizer scalars, RNG state, tensor
manifest), then the raw little-endian tensor payload.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import ctc as ctc_mod
from . import metrics as metrics_mod
from . import streaming
from .autodiff import OptimizerState
from .data import Corpus, make_batches
from .model import Model, ModelConfig, WAIT_INF

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RTCK0001"


class NumericError(RuntimeError):
    """Training hit a non-finite loss."""


class FingerprintMismatch(ValueError):
    """A checkpoint was produced under a different model configuration."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt: OptimizerState
    epoch: int
    fingerprint: str
    cfg: ModelConfig
    rng_state: dict
    stage: str  # init | pretrain | finetune


def config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["conv_lookahead"] = list(cfg.conv_lookahead)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["conv_lookahead"] = tuple(d["conv_lookahead"])
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = []
    payload = bytearray()
    for kind, table in (("param", ckpt.params), ("m", ckpt.opt.m), ("v", ckpt.opt.v)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            tensors.append({
                "name": name, "kind": kind, "shape": list(arr.shape),
                "dtype": str(arr.dtype), "offset": len(payload), "nbytes": le.nbytes,
            })
            payload.extend(le.tobytes())
    header = {
        "fingerprint": ckpt.fingerprint,
        "cfg": config_to_dict(ckpt.cfg),
        "epoch": ckpt.epoch,
        "stage": ckpt.stage,
        "rng_state": ckpt.rng_state,
        "opt": {k: getattr(ckpt.opt, k) for k in ("beta1", "beta2", "eps", "base_lr", "warmup", "step")},
        "tensors": tensors,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    body = raw[16 + hlen:]
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for entry in header["tensors"]:
        arr = np.frombuffer(
            body, dtype=np.dtype(entry["dtype"]).newbyteorder("<"),
            count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
            offset=entry["offset"],
        ).reshape(entry["shape"]).astype(entry["dtype"])
        tables[entry["kind"]][entry["name"]] = arr
    opt = OptimizerState(**header["opt"], m=tables["m"], v=tables["v"])
    return Checkpoint(
        params=tables["param"],
        opt=opt,
        epoch=header["epoch"],
        fingerprint=header["fingerprint"],
        cfg=config_from_dict(header["cfg"]),
        rng_state=header["rng_state"],
        stage=header["stage"],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = Model(ckpt.cfg, seed=0)
    load_params(model, ckpt.params)
    return model


def load_params(model: Model, params: dict[str, np.ndarray]) -> None:
    own = model.parameters()
    if set(own) != set(params):
        missing = set(own) ^ set(params)
        raise FingerprintMismatch(f"parameter names disagree: {sorted(missing)[:4]}...")
    for name, arr in params.items():
        if own[name].data.shape != arr.shape:
            raise FingerprintMismatch(f"shape mismatch for {name}")
        own[name].data = arr.astype(own[name].data.dtype).copy()
        own[name].zero_grad()


def snapshot(model: Model, opt: OptimizerState, epoch: int, rng: np.random.Generator,
             stage: str) -> Checkpoint:
    return Checkpoint(
        params={k: v.data.copy() for k, v in model.parameters().items()},
        opt=OptimizerState(
            beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, base_lr=opt.base_lr,
            warmup=opt.warmup, step=opt.step,
            m={k: v.copy() for k, v in opt.m.items()},
            v={k: v.copy() for k, v in opt.v.items()},
        ),
        epoch=epoch,
        fingerprint=model.cfg.fingerprint(),
        cfg=model.cfg,
        rng_state=rng.bit_generator.state,
        stage=stage,
    )


def average_checkpoints(paths, m: Optional[int] = None) -> Checkpoint:
    """Arithmetic mean of the last ``m`` checkpoints' parameters; optimizer
    state and bookkeeping come from the last one."""
    paths = list(paths)
    if m is not None:
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        paths = paths[-m:]
    if not paths:
        raise ValueError("no checkpoints to average")
    ckpts = [load_checkpoint(p) for p in paths]
    first = ckpts[0]
    for other in ckpts[1:]:
        if other.fingerprint != first.fingerprint:
            raise FingerprintMismatch(
                f"cannot average checkpoints with fingerprints "
                f"{first.fingerprint} and {other.fingerprint}"
            )
        for name, arr in other.params.items():
            if arr.shape != first.params[name].shape:
                raise FingerprintMismatch(f"shape mismatch for {name}")
    last = ckpts[-1]
    averaged = {
        name: np.mean([c.params[name].astype(np.float64) for c in ckpts], axis=0).astype(
            first.params[name].dtype
        )
        for name in first.params
    }
    return dataclasses.replace(last, params=averaged)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    base_lr: float = 2e-3
    warmup: int = 400
    max_frames: int = 2000
    seed: int = 1
    log_path: Optional[str] = None


def _train(corpus: Corpus, cfg: ModelConfig, epochs: int, stage: str,
           settings: TrainSettings, start: Optional[Checkpoint]) -> Checkpoint:
    model = Model(cfg, seed=settings.seed)
    if start is not None:
        if start.fingerprint != cfg.fingerprint():
            raise FingerprintMismatch(
                f"checkpoint fingerprint {start.fingerprint} != config {cfg.fingerprint()}"
            )
        load_params(model, start.params)
    if start is not None and start.stage == stage:
        # resuming the same stage: restore optimizer and data-order RNG
        opt = start.opt
        rng = np.random.default_rng()
        rng.bit_generator.state = start.rng_state
        epoch0 = start.epoch
    else:
        opt = OptimizerState(base_lr=settings.base_lr, warmup=settings.warmup)
        rng = np.random.default_rng(settings.seed)
        epoch0 = 0

    if stage == "pretrain":
        params = model.encoder_parameters()
        if not cfg.use_ctc:
            raise ValueError("CTC pre-training requires use_ctc=true")
    else:
        params = model.parameters()

    log_fh = open(settings.log_path, "a", encoding="utf-8") if settings.log_path else None
    try:
        batches = make_batches(corpus, settings.max_frames)
        for epoch in range(epoch0, epoch0 + epochs):
            order = rng.permutation(len(batches))
            for bi in order:
                batch = batches[bi]
                ad.reset_tape()
                loss_st, loss_ctc, diag = model.forward_train(
                    batch, rng=rng, compute_st=(stage != "pretrain")
                )
                if stage == "pretrain":
                    total = loss_ctc
                    st_val = float("nan")
                else:
                    if loss_st is None:
                        continue  # batch had no usable utterance
                    total = model.total_loss(loss_st, loss_ctc)
                    st_val = loss_st.item()
                if total is None:
                    continue  # batch had no CTC-feasible utterance
                total_val = total.item()
                if not np.isfinite(total_val):
                    raise NumericError(f"non-finite loss at step {opt.step + 1}")
                ad.backward(total)
                lr = ad.inverse_sqrt_lr(opt.step + 1, opt.base_lr, opt.warmup)
                ad.adam_step(params, opt, lr)
                if log_fh:
                    ctc_val = loss_ctc.item() if loss_ctc is not None else float("nan")
                    log_fh.write(f"{opt.step}\t{lr:.6g}\t{st_val:.6g}\t{ctc_val:.6g}\t"
                                 f"{diag['blank_fraction']:.4f}\n")
            log.info("%s epoch %d done (step %d)", stage, epoch + 1, opt.step)
    finally:
        if log_fh:
            log_fh.close()
    ad.reset_tape()
    return snapshot(model, opt, epoch0 + epochs, rng, stage)


def pretrain_ctc(corpus: Corpus, cfg: ModelConfig, epochs: int,
                 settings: TrainSettings = TrainSettings(),
                 start: Optional[Checkpoint] = None) -> Checkpoint:
    """Optimize the blank-limited CTC loss only; semantic encoder and
    decoder stay at their random initialization."""
    if epochs == 0 and start is None:
        model = Model(cfg, seed=settings.seed)
        opt = OptimizerState(base_lr=settings.base_lr, warmup=settings.warmup)
        return snapshot(model, opt, 0, np.random.default_rng(settings.seed), "pretrain")
    return _train(corpus, cfg, epochs, "pretrain", settings, start)


def finetune(corpus: Corpus, start: Checkpoint, cfg: ModelConfig, epochs: int,
             settings: TrainSettings = TrainSettings()) -> Checkpoint:
    """Joint objective: token NLL plus the weighted CTC term, end to end."""
    return _train(corpus, cfg, epochs, "finetune", settings, start)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def token_accuracy(model: Model, corpus: Corpus, wait_k=WAIT_INF, max_frames: int = 4000) -> float:
    """Teacher-forced next-token accuracy under the given wait-k mask."""
    correct = 0
    total = 0
    for batch in make_batches(corpus, max_frames):
        ad.reset_tape()
        with ad.no_grad():
            _, _, diag = model.forward_train(batch, rng=None, wait_k=wait_k)
        correct += diag["token_correct"]
        total += diag["tokens"]
    return correct / max(total, 1)


def evaluate(corpus: Corpus, model: Model, *, wait_k=None, stride_n=None, beam_size: int = 5,
             chunk_frames: Optional[int] = None, trace_sink: Optional[list] = None) -> dict:
    """Run the streaming engine per utterance; aggregate BLEU, AP, AL, and
    the shrink-quality histogram."""
    hyps, refs = [], []
    ap_vals, al_vals = [], []
    seg_counts, transcript_lens = [], []
    rows = []
    skipped = 0
    override = wait_k is not None or stride_n is not None
    for utt in corpus:
        if utt.n_frames < model.cfg.downsample:
            skipped += 1
            continue
        res = streaming.translate_stream(
            model, utt.features, wait_k=wait_k, stride_n=stride_n, beam_size=beam_size,
            chunk_frames=chunk_frames, reference_length=len(utt.target),
            tgt_vocab=corpus.tgt_vocab, allow_schedule_override=override,
        )
        hyp_tokens = corpus.tgt_vocab.decode(res.tokens)
        ref_tokens = corpus.tgt_vocab.decode(utt.target)
        hyps.append(hyp_tokens)
        refs.append(ref_tokens)
        ap = al = float("nan")
        if res.tokens:
            ap = metrics_mod.average_proportion(res.record)
            al = metrics_mod.average_lagging(res.record)
            ap_vals.append(ap)
            al_vals.append(al)
        if res.segment_count is not None:
            seg_counts.append(res.segment_count)
            transcript_lens.append(len(utt.source))
        if trace_sink is not None:
            trace_sink.append((utt.id, res.trace))
        rows.append({"id": utt.id, "hypothesis": " ".join(hyp_tokens),
                     "reference": " ".join(ref_tokens), "ap": ap, "al": al})
    report = {
        "bleu": metrics_mod.corpus_bleu(hyps, refs) if hyps else float("nan"),
        "mean_ap": float(np.mean(ap_vals)) if ap_vals else float("nan"),
        "mean_al": float(np.mean(al_vals)) if al_vals else float("nan"),
        "shrink_quality": ctc_mod.shrink_quality(seg_counts, transcript_lens) if seg_counts else None,
        "skipped": skipped,
        "rows": rows,
    }
    return report
