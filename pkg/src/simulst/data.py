"""Corpus handling: vocab, feature file I/O, manifests, batching, and the
synthetic speech-translation task generator used for end-to-end checks.

On-disk formats:
    features   binary "RTFX": magic, u32 frame count, u32 feature dim,
               then frame*dim little-endian float32
    manifest   UTF-8 TSV: id, feature path, transcript, translation
    vocab      one token per line; id = line number + number of reserved ids
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, EOS, UNK = 0, 1, 2
RESERVED = ("<pad>", "</s>", "<unk>")
MAGIC = b"RTFX"


class FormatError(ValueError):
    """A feature file violates the RTFX layout."""


class ManifestError(ValueError):
    """A manifest line cannot be parsed."""


class Vocab:
    """Token/id bijection with pad, end-of-sentence, and unk reserved."""

    def __init__(self, tokens):
        self.tokens = list(RESERVED) + list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, words) -> np.ndarray:
        return np.array([self.index.get(w, UNK) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens[len(RESERVED):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, d_feat] float32
    source: np.ndarray  # transcript token ids
    target: np.ndarray  # translation token ids
    frames_per_token: list[int] | None = None  # synthetic alignment, when known

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance]
    src_vocab: Vocab
    tgt_vocab: Vocab
    unk_count: int = 0

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]


def split_validation(corpus: Corpus) -> tuple[Corpus, Corpus]:
    """Deterministic ~5% validation split keyed on the utterance id hash."""
    train, val = [], []
    for utt in corpus:
        digest = hashlib.sha1(utt.id.encode("utf-8")).digest()
        (val if digest[0] % 20 == 0 else train).append(utt)
    return (
        replace(corpus, utterances=train),
        replace(corpus, utterances=val),
    )


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be [frames, dim], got shape {features.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (got {raw[:4]!r})")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    t_frames, d_feat = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * t_frames * d_feat
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload ends at byte {len(raw)}, header promises {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    return data.reshape(t_frames, d_feat).astype(np.float32)


def cmvn(features: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalization."""
    mu = features.mean(axis=0, keepdims=True)
    sd = features.std(axis=0, keepdims=True)
    return ((features - mu) / np.maximum(sd, 1e-8)).astype(np.float32)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def load_manifest(path, src_vocab: Vocab, tgt_vocab: Vocab, normalize: bool = False) -> Corpus:
    """Read a TSV manifest; unknown tokens map to unk and are tallied."""
    path = Path(path)
    utterances = []
    unk_count = 0
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cells)}")
        utt_id, feat_path, transcript, translation = cells
        feat_file = Path(feat_path)
        if not feat_file.is_absolute():
            feat_file = path.parent / feat_file
        features = read_features(feat_file)
        if normalize:
            features = cmvn(features)
        src_words = transcript.split()
        tgt_words = translation.split()
        source = src_vocab.encode(src_words)
        target = tgt_vocab.encode(tgt_words)
        unk_count += int((source == UNK).sum() + (target == UNK).sum())
        utterances.append(Utterance(utt_id, features, source, target))
    corpus = Corpus(utterances, src_vocab, tgt_vocab, unk_count=unk_count)
    if unk_count:
        log.warning("%s: %d tokens fell back to <unk>", path, unk_count)
    return corpus


def save_manifest(corpus: Corpus, out_dir) -> Path:
    """Materialize a corpus as manifest + RTFX feature files under out_dir."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus:
        feat_path = feat_dir / f"{utt.id}.rtfx"
        write_features(feat_path, utt.features)
        transcript = " ".join(corpus.src_vocab.decode(utt.source))
        translation = " ".join(corpus.tgt_vocab.decode(utt.target))
        lines.append(f"{utt.id}\tfeats/{utt.id}.rtfx\t{transcript}\t{translation}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    corpus.src_vocab.save(out_dir / "vocab.src")
    corpus.tgt_vocab.save(out_dir / "vocab.tgt")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """A learnable toy task: each source token emits a few noisy copies of a
    fixed embedding; the translation relabels tokens through a bijection and
    may locally reorder them inside aligned blocks."""

    vocab_size: int = 20
    frames_per_token: tuple[int, int] = (2, 5)
    feature_dim: int = 16
    noise_std: float = 0.1
    reorder_window: int = 0  # 0/1: monotone; w>=2: content-keyed reorder per block
    swap_probability: float = 1.0
    length_range: tuple[int, int] = (3, 8)
    seed: int = 0


def synthetic_assets(cfg: SyntheticTaskConfig) -> tuple[np.ndarray, np.ndarray]:
    """The task's fixed token embeddings and source->target word bijection."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    embeddings = rng.normal(size=(cfg.vocab_size, cfg.feature_dim))
    mapping = rng.permutation(cfg.vocab_size)
    return embeddings, mapping


def generate_synthetic_corpus(cfg: SyntheticTaskConfig, size: int) -> Corpus:
    if size < 1:
        raise ValueError(f"corpus size must be >= 1, got {size}")
    # separate streams: assets (child 0), content (child 1), reorder (child 2),
    # so the reorder knob does not perturb sampled words/features
    seq = np.random.SeedSequence(cfg.seed).spawn(3)
    rng = np.random.default_rng(seq[1])
    reorder_rng = np.random.default_rng(seq[2])
    embeddings, mapping = synthetic_assets(cfg)
    src_vocab = Vocab([f"s{i}" for i in range(cfg.vocab_size)])
    tgt_vocab = Vocab([f"t{i}" for i in range(cfg.vocab_size)])

    utterances = []
    lo, hi = cfg.length_range
    flo, fhi = cfg.frames_per_token
    for n in range(size):
        length = int(rng.integers(lo, hi + 1))
        words = rng.integers(0, cfg.vocab_size, size=length)
        counts = rng.integers(flo, fhi + 1, size=length)
        frames = np.repeat(embeddings[words], counts, axis=0)
        if cfg.noise_std > 0:
            frames = frames + rng.normal(scale=cfg.noise_std, size=frames.shape)
        ordered = words.copy()
        if cfg.reorder_window >= 2:
            w = cfg.reorder_window
            for start in range(0, length - w + 1, w):
                if reorder_rng.random() < cfg.swap_probability:
                    block = ordered[start:start + w]
                    ordered[start:start + w] = block[np.argsort(-block, kind="stable")]
        source = words + len(RESERVED)
        target = mapping[ordered] + len(RESERVED)
        utterances.append(
            Utterance(
                id=f"syn{n:05d}",
                features=frames.astype(np.float32),
                source=source.astype(np.int64),
                target=target.astype(np.int64),
                frames_per_token=[int(c) for c in counts],
            )
        )
    return Corpus(utterances, src_vocab, tgt_vocab)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # [B, T_max, d] zero-padded
    frame_lengths: np.ndarray
    source: np.ndarray  # [B, Lz_max] PAD-padded
    source_lengths: np.ndarray
    target: np.ndarray  # [B, Ly_max] PAD-padded
    target_lengths: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def padded_frames(self) -> int:
        return self.features.shape[0] * self.features.shape[1]


def _pad_ids(seqs) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _to_batch(group: list[Utterance]) -> Batch:
    t_max = max(u.n_frames for u in group)
    d = group[0].features.shape[1]
    feats = np.zeros((len(group), t_max, d), dtype=np.float32)
    for i, u in enumerate(group):
        feats[i, : u.n_frames] = u.features
    return Batch(
        ids=[u.id for u in group],
        features=feats,
        frame_lengths=np.array([u.n_frames for u in group], dtype=np.int64),
        source=_pad_ids([u.source for u in group]),
        source_lengths=np.array([len(u.source) for u in group], dtype=np.int64),
        target=_pad_ids([u.target for u in group]),
        target_lengths=np.array([len(u.target) for u in group], dtype=np.int64),
    )


def make_batches(corpus_or_utts, max_frames: int) -> list[Batch]:
    """Length-bucketed batches; padded frame total per batch <= max_frames."""
    utts = list(corpus_or_utts)
    longest = max((u.n_frames for u in utts), default=0)
    if longest > max_frames:
        raise ValueError(f"utterance of {longest} frames exceeds max_frames={max_frames}")
    by_len = sorted(utts, key=lambda u: (u.n_frames, u.id))
    batches = []
    group: list[Utterance] = []
    group_max = 0
    for utt in by_len:
        new_max = max(group_max, utt.n_frames)
        if group and new_max * (len(group) + 1) > max_frames:
            batches.append(_to_batch(group))
            group, group_max = [], 0
            new_max = utt.n_frames
        group.append(utt)
        group_max = new_max
    if group:
        batches.append(_to_batch(group))
    return batches
