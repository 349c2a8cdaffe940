"""Timing-tracking greedy and beam-search decoding.

Decoding keeps, per hypothesis, a :class:`TimingState`. The decoder input for
the next position is derived from the state: the previous token and its
duration, the frames left once that duration is consumed, and a pause flag
set when the previous token was ``SIL``.

The search routines are written against a *step function*::

    step_fn(hyps) -> (log_probs [K, V], durations [K])

so the same code drives the neural model and small hand-built scorers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import EOS, PAD, SIL, SOS, Vocabulary
from .model import EncoderOutput, IsochronyModel


@dataclass(frozen=True)
class TimingState:
    remaining_frames: float
    pause_flag: int
    last_token: int
    last_duration: float


def init_state(total_frames) -> TimingState:
    if total_frames < 0:
        raise ValueError(f"total_frames must be non-negative, got {total_frames}")
    return TimingState(total_frames, 0, SOS, 0)


def step_state(st: TimingState, emitted_token: int, emitted_duration, vocab: Vocabulary | None = None) -> TimingState:
    """Advance the state by one emitted (token, duration) pair.

    With ``vocab`` given, tokens that carry no duration (units, ``<OC>``,
    ``<eos>``) are forced to 0.
    """
    if vocab is not None and not vocab.is_timed(emitted_token):
        emitted_duration = 0
    return TimingState(
        remaining_frames=st.remaining_frames - st.last_duration,
        pause_flag=int(st.last_token == SIL),
        last_token=int(emitted_token),
        last_duration=emitted_duration,
    )


def next_inputs(st: TimingState) -> tuple[int, float, float, int]:
    """Decoder inputs ``(prev_token, prev_duration, remaining_frames, pause)`` for the next position."""
    return st.last_token, st.last_duration, st.remaining_frames - st.last_duration, int(st.last_token == SIL)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple = ()
    durations: tuple = ()
    log_prob: float = 0.0
    state: TimingState = field(default_factory=lambda: init_state(0))
    inputs: tuple = ()
    finished: bool = False

    def extend(self, token: int, log_prob: float, duration: float, vocab: Vocabulary | None) -> Hypothesis:
        if self.finished:
            raise ValueError("finished hypotheses cannot be extended")
        if vocab is not None and not vocab.is_timed(token):
            duration = 0.0
        st = step_state(self.state, token, duration, vocab)
        return Hypothesis(
            tokens=self.tokens + (int(token),),
            durations=self.durations + (float(duration),),
            log_prob=log_prob,
            state=st,
            inputs=self.inputs + (next_inputs(st),),
            finished=token == EOS,
        )


def start_hypothesis(total_frames) -> Hypothesis:
    st = init_state(total_frames)
    return Hypothesis(state=st, inputs=(next_inputs(st),))


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def normalized_score(h: Hypothesis, alpha: float) -> float:
    return h.log_prob / length_penalty(max(1, len(h.tokens)), alpha)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def hypothesis_duration(h: Hypothesis, vocab: Vocabulary | None = None) -> int:
    """Total frames: sum of rounded durations over phoneme and SIL positions."""
    total = 0
    for tok, dur in zip(h.tokens, h.durations):
        if vocab is None or vocab.is_timed(tok):
            total += round_half_up(dur)
    return total


# --------------------------------------------------------------------------
# Generic search
# --------------------------------------------------------------------------

StepFn = Callable[[Sequence[Hypothesis]], tuple[np.ndarray, np.ndarray]]


def greedy_search(step_fn: StepFn, start: Hypothesis, max_len: int, vocab: Vocabulary | None = None) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    h = start
    for _ in range(max_len):
        logp, dur = step_fn([h])
        cum = h.log_prob + logp[0]
        tok = int(np.argmax(cum))
        h = h.extend(tok, float(cum[tok]), float(dur[0]), vocab)
        if h.finished:
            break
    return h


def beam_search_core(step_fn: StepFn, start: Hypothesis, beam: int, max_len: int, alpha: float = 0.6,
                     vocab: Vocabulary | None = None) -> list[Hypothesis]:
    """Length-normalized beam search.

    At every step the ``beam - len(finished)`` best extensions of the live
    hypotheses survive; those ending in ``<eos>`` move to the finished pool.
    Search stops once ``beam`` hypotheses have finished, nothing is live, or
    ``max_len`` tokens were emitted. Finished hypotheses are returned best
    first by normalized score; if none finished, the best live one is
    returned with ``finished=False``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    alive = [start]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        slots = beam - len(finished)
        if slots <= 0 or not alive:
            break
        logp, dur = step_fn(alive)
        cum = np.asarray([h.log_prob for h in alive])[:, None] + logp
        flat = cum.ravel()
        V = cum.shape[1]
        # stable sort: ties resolve to the earlier hypothesis, then the lower token id
        order = np.argsort(-flat, kind="stable")
        chosen = [j for j in order[:slots] if np.isfinite(flat[j])]
        nxt = []
        for j in chosen:
            i, tok = divmod(int(j), V)
            h = alive[i].extend(tok, float(flat[j]), float(dur[i]), vocab)
            (finished if h.finished else nxt).append(h)
        alive = nxt
    if finished:
        ranked = sorted(enumerate(finished), key=lambda p: (-normalized_score(p[1], alpha), p[0]))
        return [h for _, h in ranked][:beam]
    if not alive:
        return []
    best = max(alive, key=lambda h: normalized_score(h, alpha))
    return [best]


# --------------------------------------------------------------------------
# Neural model adapter
# --------------------------------------------------------------------------


def default_max_len(n_frames: int) -> int:
    return n_frames // 2 + 16


def model_step_fn(model: IsochronyModel, features: np.ndarray, force_eos_at_zero: bool = False) -> StepFn:
    """Wrap a model and one utterance's features as a step function."""
    c = model.config
    with ad.no_grad():
        enc = model.encode_batch(np.asarray(features)[None], [len(features)])
    tiled: dict[int, EncoderOutput] = {}

    def encoder_for(k: int) -> EncoderOutput:
        if k not in tiled:
            tiled[k] = EncoderOutput(ad.Tensor(np.repeat(enc.h.data, k, axis=0)), np.repeat(enc.lengths, k),
                                     np.repeat(enc.key_mask, k, axis=0))
        return tiled[k]

    banned = np.zeros(c.vocab_size, dtype=bool)
    banned[[PAD, SOS]] = True

    def step(hyps: Sequence[Hypothesis]) -> tuple[np.ndarray, np.ndarray]:
        inputs = np.asarray([h.inputs for h in hyps], dtype=np.float64)  # [K, T, 4]
        with ad.no_grad():
            E = model.build_decoder_input(inputs[..., 0].astype(np.int64), inputs[..., 1], inputs[..., 2],
                                          inputs[..., 3])
            O = model.decode(E, encoder_for(len(hyps)))
            logits, dur = model.project_heads(O)
        last = logits.data[:, -1, :].astype(np.float64)
        last[:, banned] = -np.inf
        if force_eos_at_zero:
            for k, h in enumerate(hyps):
                if h.inputs[-1][2] <= 0:
                    last[k, :] = -np.inf
                    last[k, EOS] = 0.0
        z = last - last.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        frames = np.maximum(dur.data[:, -1].astype(np.float64) * c.duration_scale, 0.0)
        return logp, frames

    return step


def greedy_decode(model: IsochronyModel, features, total_frames: int, vocab: Vocabulary,
                  max_len: int | None = None, force_eos_at_zero: bool = False) -> Hypothesis:
    features = np.asarray(features)
    if max_len is None:
        max_len = default_max_len(len(features))
    step = model_step_fn(model, features, force_eos_at_zero)
    return greedy_search(step, start_hypothesis(total_frames), max_len, vocab)


def beam_search(model: IsochronyModel, features, total_frames: int, vocab: Vocabulary, beam: int = 5,
                max_len: int | None = None, length_norm_alpha: float = 0.6,
                force_eos_at_zero: bool = False) -> list[Hypothesis]:
    features = np.asarray(features)
    if max_len is None:
        max_len = default_max_len(len(features))
    step = model_step_fn(model, features, force_eos_at_zero)
    return beam_search_core(step, start_hypothesis(total_frames), beam, max_len, length_norm_alpha, vocab)


# --------------------------------------------------------------------------
# Decoded output files: JSON lines
# --------------------------------------------------------------------------


def decoded_record(uid: str, h: Hypothesis, vocab: Vocabulary, alpha: float = 0.6) -> dict:
    return {
        "id": uid,
        "tokens": list(h.tokens),
        "surface": [vocab.surface(t) for t in h.tokens],
        "durations": [float(d) for d in h.durations],
        "total_duration": hypothesis_duration(h, vocab),
        "score": normalized_score(h, alpha),
        "finished": bool(h.finished),
    }


def write_decoded(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


class DecodedFormatError(ValueError):
    pass


def read_decoded(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                for key in ("id", "tokens", "durations"):
                    rec[key]
                if len(rec["tokens"]) != len(rec["durations"]):
                    raise ValueError("tokens and durations differ in length")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DecodedFormatError(f"{path}:{lineno}: malformed decoded record ({exc})") from exc
            out.append(rec)
    return out


def hypothesis_from_record(rec: dict) -> Hypothesis:
    return Hypothesis(tokens=tuple(int(t) for t in rec["tokens"]),
                      durations=tuple(float(d) for d in rec["durations"]),
                      log_prob=float(rec.get("score", 0.0)),
                      finished=bool(rec.get("finished", True)))
