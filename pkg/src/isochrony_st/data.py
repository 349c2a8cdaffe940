"""Synthetic timing-annotated parallel corpus and decoder-side targets.

Vocabulary layout (one joint id space for the decoder)::

    0 <pad>  1 <sos>  2 <eos>  3 <OC>  4 SIL  | w0 .. w{T-1} | p0 .. p{P-1}

``w*`` are translation units, ``p*`` phonemes. ``SIL`` is a phoneme-class
token carrying a duration like any other phoneme. One frame is 10 ms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, SOS, EOS, OC, SIL = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<sos>", "<eos>", "<OC>", "SIL")


class CorpusFormatError(ValueError):
    """Malformed corpus line."""


class ConsistencyError(ValueError):
    """Alignment durations disagree with the utterance's frame count."""


# --------------------------------------------------------------------------
# Vocabulary
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    n_units: int
    n_phonemes: int

    @property
    def size(self) -> int:
        return len(RESERVED) + self.n_units + self.n_phonemes

    @property
    def unit_offset(self) -> int:
        return len(RESERVED)

    @property
    def phoneme_offset(self) -> int:
        return len(RESERVED) + self.n_units

    def unit_id(self, k: int) -> int:
        return self.unit_offset + k

    def phoneme_id(self, k: int) -> int:
        return self.phoneme_offset + k

    def is_unit(self, tok: int) -> bool:
        return self.unit_offset <= tok < self.phoneme_offset

    def is_timed(self, tok: int) -> bool:
        """True for tokens that carry a duration: phonemes and SIL."""
        return tok == SIL or self.phoneme_offset <= tok < self.size

    def timed_mask(self) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[SIL] = True
        m[self.phoneme_offset :] = True
        return m

    def tokens(self) -> list[str]:
        return (
            list(RESERVED)
            + [f"w{k}" for k in range(self.n_units)]
            + [f"p{k}" for k in range(self.n_phonemes)]
        )

    def surface(self, tok: int) -> str:
        return self.tokens()[tok]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> Vocabulary:
        toks = Path(path).read_text(encoding="utf-8").split()
        if tuple(toks[: len(RESERVED)]) != RESERVED:
            raise CorpusFormatError(f"{path}: reserved tokens must open the vocabulary in order {RESERVED}")
        rest = toks[len(RESERVED) :]
        n_units = sum(1 for t in rest if t.startswith("w"))
        vocab = cls(n_units, len(rest) - n_units)
        if vocab.tokens() != toks:
            raise CorpusFormatError(f"{path}: unexpected token layout")
        return vocab


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignmentEntry:
    unit: int
    duration: int
    is_silence: bool

    def __post_init__(self):
        if self.duration < 0:
            raise ConsistencyError(f"negative duration {self.duration}")
        if self.is_silence != (self.unit == SIL):
            raise ConsistencyError(f"is_silence={self.is_silence} inconsistent with unit {self.unit}")


@dataclass(eq=False)
class Utterance:
    uid: str
    features: np.ndarray
    total_frames: int
    target_bpe: list[int]
    alignment: list[AlignmentEntry]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.uid == other.uid
            and self.total_frames == other.total_frames
            and self.target_bpe == other.target_bpe
            and self.alignment == other.alignment
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    def validate(self) -> None:
        total = sum(a.duration for a in self.alignment)
        if total != self.total_frames:
            raise ConsistencyError(
                f"{self.uid}: alignment durations sum to {total}, total_frames is {self.total_frames}"
            )
        if self.features.shape[0] != self.total_frames:
            raise ConsistencyError(
                f"{self.uid}: {self.features.shape[0]} feature rows for {self.total_frames} frames"
            )


@dataclass(eq=False)
class PreparedTarget:
    """Aligned decoder targets: tokens z, durations d, remaining frames f, pause flags s."""

    z: np.ndarray
    d: np.ndarray
    f: np.ndarray
    s: np.ndarray

    def __len__(self) -> int:
        return len(self.z)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PreparedTarget):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "zdfs")


def prepare_target(u: Utterance) -> PreparedTarget:
    """Build z = units ++ <OC> ++ phonemes ++ <eos> and the matching d, f, s.

    ``f[t]`` counts frames not yet covered before position t; ``s[t]`` is 1
    when the token at t-1 is SIL.
    """
    total = sum(a.duration for a in u.alignment)
    if total != u.total_frames:
        raise ConsistencyError(
            f"{u.uid}: alignment durations sum to {total}, total_frames is {u.total_frames}"
        )
    units = list(u.target_bpe)
    z = units + [OC] + [a.unit for a in u.alignment] + [EOS]
    d = [0] * (len(units) + 1) + [a.duration for a in u.alignment] + [0]
    z = np.asarray(z, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    f = u.total_frames - np.concatenate([[0], np.cumsum(d)[:-1]])
    s = np.zeros(len(z), dtype=np.int64)
    s[1:] = z[:-1] == SIL
    return PreparedTarget(z=z, d=d, f=f.astype(np.int64), s=s)


def add_duration_noise(d, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma^2) to positive durations; zero-padded positions stay 0."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    d = np.asarray(d, dtype=np.float64)
    if sigma == 0:
        return d.copy()
    noise = rng.normal(0.0, sigma, size=d.shape)
    return np.where(d > 0, d + noise, d)


# --------------------------------------------------------------------------
# Generator
# --------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    src_vocab: int = 16
    tgt_vocab: int = 16
    n_phonemes: int = 12
    max_phonemes_per_token: int = 3
    min_words: int = 2
    max_words: int = 5
    duration_min: int = 2
    duration_max: int = 20
    silence_prob: float = 0.3
    silence_min: int = 5
    silence_max: int = 30
    feat_dim: int = 8
    feature_noise: float = 0.1
    n_train: int = 64
    n_dev: int = 16
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        for name in ("src_vocab", "tgt_vocab", "n_phonemes", "max_phonemes_per_token", "min_words",
                     "duration_max", "silence_max", "feat_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.src_vocab != self.tgt_vocab:
            raise ValueError("src_vocab and tgt_vocab must match (token-level bijective dictionary)")
        if self.max_words < self.min_words:
            raise ValueError("max_words < min_words")
        if not 0 <= self.duration_min <= self.duration_max:
            raise ValueError("need 0 <= duration_min <= duration_max")
        if not 0 <= self.silence_min <= self.silence_max:
            raise ValueError("need 0 <= silence_min <= silence_max")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise ValueError("silence_prob must lie in [0, 1]")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")
        for name in ("n_train", "n_dev", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.tgt_vocab, self.n_phonemes)


@dataclass
class _Tables:
    dictionary: np.ndarray           # source token -> unit index
    pronunciations: list[list[int]]  # unit index -> phoneme indices
    duration_ranges: np.ndarray      # phoneme index -> (lo, hi)
    templates: np.ndarray            # source token -> feature row
    silence_template: np.ndarray


def _tables(cfg: CorpusConfig) -> _Tables:
    rng = np.random.default_rng([cfg.seed, 0])
    dictionary = rng.permutation(cfg.tgt_vocab)
    pron = [
        [int(p) for p in rng.integers(0, cfg.n_phonemes, size=rng.integers(1, cfg.max_phonemes_per_token + 1))]
        for _ in range(cfg.tgt_vocab)
    ]
    span = cfg.duration_max - cfg.duration_min
    lo = cfg.duration_min + rng.integers(0, span // 2 + 1, size=cfg.n_phonemes)
    ranges = np.stack([lo, lo + span - span // 2], axis=1)
    templates = rng.normal(0.0, 1.0, size=(cfg.src_vocab, cfg.feat_dim))
    silence = rng.normal(0.0, 1.0, size=cfg.feat_dim)
    return _Tables(dictionary, pron, ranges, templates, silence)


_SPLIT_STREAM = {"train": 1, "dev": 2, "test": 3}


def generate_corpus(cfg: CorpusConfig, split: str = "train", n: int | None = None) -> list[Utterance]:
    """Deterministically sample ``n`` utterances (default: the split's count).

    Dictionary, pronunciations, duration ranges and feature templates are
    fixed by ``cfg.seed`` and shared by all splits.
    """
    cfg.validate()
    if split not in _SPLIT_STREAM:
        raise ValueError(f"unknown split {split!r}")
    if n is None:
        n = getattr(cfg, f"n_{split}")
    tables = _tables(cfg)
    vocab = cfg.vocabulary()
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM[split]])
    out = []
    for i in range(n):
        n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        src = rng.integers(0, cfg.src_vocab, size=n_words)
        units, alignment, rows = [], [], []
        for w, tok in enumerate(src):
            if w > 0 and cfg.silence_prob > 0 and rng.random() < cfg.silence_prob:
                dur = int(rng.integers(cfg.silence_min, cfg.silence_max + 1))
                alignment.append(AlignmentEntry(SIL, dur, True))
                rows.append(np.repeat(tables.silence_template[None, :], dur, axis=0))
            unit = int(tables.dictionary[tok])
            units.append(vocab.unit_id(unit))
            word_frames = 0
            for ph in tables.pronunciations[unit]:
                lo, hi = tables.duration_ranges[ph]
                dur = int(rng.integers(lo, hi + 1))
                alignment.append(AlignmentEntry(vocab.phoneme_id(ph), dur, False))
                word_frames += dur
            rows.append(np.repeat(tables.templates[tok][None, :], word_frames, axis=0))
        feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, cfg.feat_dim))
        feats = feats + rng.normal(0.0, cfg.feature_noise, size=feats.shape)
        feats = np.round(feats, 4)
        total = sum(a.duration for a in alignment)
        out.append(Utterance(f"{split}-{i:06d}", feats, total, units, alignment))
    return out


def generate_splits(cfg: CorpusConfig) -> dict[str, list[Utterance]]:
    return {split: generate_corpus(cfg, split) for split in _SPLIT_STREAM}


# --------------------------------------------------------------------------
# Corpus files: JSON lines, one utterance per line
# --------------------------------------------------------------------------


def utterance_to_record(u: Utterance) -> dict:
    return {
        "id": u.uid,
        "features": [[float(x) for x in row] for row in u.features],
        "total_frames": int(u.total_frames),
        "target_bpe": [int(t) for t in u.target_bpe],
        "alignment": [[int(a.unit), int(a.duration), bool(a.is_silence)] for a in u.alignment],
    }


def utterance_from_record(rec: dict, feat_dim: int | None = None) -> Utterance:
    feats = np.asarray(rec["features"], dtype=np.float64)
    if feats.size == 0:
        feats = feats.reshape(0, feat_dim or 0)
    if feats.ndim != 2:
        raise CorpusFormatError("features must be a matrix")
    u = Utterance(
        uid=str(rec["id"]),
        features=feats,
        total_frames=int(rec["total_frames"]),
        target_bpe=[int(t) for t in rec["target_bpe"]],
        alignment=[AlignmentEntry(int(a), int(b), bool(c)) for a, b, c in rec["alignment"]],
    )
    return u


def write_corpus(path, corpus: list[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in corpus:
            fh.write(json.dumps(utterance_to_record(u), separators=(",", ":")))
            fh.write("\n")


def read_corpus(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                u = utterance_from_record(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ConsistencyError):
                    raise ConsistencyError(f"{path}:{lineno}: {exc}") from exc
                last = f"line {lineno - 1}" if lineno > 1 else "none"
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({exc}); last good line: {last}") from exc
            try:
                u.validate()
            except ConsistencyError as exc:
                raise ConsistencyError(f"{path}:{lineno}: {exc}") from exc
            out.append(u)
    return out

