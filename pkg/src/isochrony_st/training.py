"""Joint token/duration loss, the AdamW training loop, and gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Utterance, Vocabulary, prepare_target
from .model import Batch, IsochronyModel, ModelConfig, collate, load_checkpoint, save_checkpoint
from .optim import AdamWState, adamw_step, linear_decay_lr

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_frames: int = 2000
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    noise_sigma: float = 0.0
    lambda_dur: float = 1.0
    mse_phoneme_only: bool = False
    label_smoothing: float = 0.0
    eval_interval: int = 500
    eval_max_utts: int = 64
    seed: int = 0
    checkpoint: str = ""

    def validate(self) -> None:
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.batch_frames <= 0:
            raise ValueError("batch_frames must be positive")
        if self.lambda_dur < 0:
            raise ValueError("lambda_dur must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.eval_interval <= 0:
            raise ValueError("eval_interval must be positive")


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "token_loss", "dur_loss", "dev_overlap", "dev_acc")

    def append(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("report steps must increase")
        self.rows.append(row)

    def write(self, path, append: bool = False) -> None:
        import os

        new = not append or not os.path.exists(path)
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            if new:
                fh.write("\t".join(self.COLUMNS) + "\n")
            for r in self.rows:
                fh.write("\t".join(_fmt(r[c]) for c in self.COLUMNS) + "\n")


def _fmt(x) -> str:
    return str(x) if isinstance(x, int) else repr(float(x))


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def joint_loss(token_logits: Tensor, dur_pred: Tensor, batch: Batch, duration_scale: float,
               lambda_dur: float = 1.0, phoneme_only: bool = False, label_smoothing: float = 0.0,
               timed_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, token_part, dur_part)`` with ``total = token + lambda_dur * dur``.

    The duration term compares the head output with ``d / duration_scale``
    over every real position, or only phoneme/SIL positions when
    ``phoneme_only`` is set. Padding is excluded from both terms.
    """
    mask = batch.mask
    token_part = ad.cross_entropy_from_logits(token_logits, batch.z, mask, label_smoothing)
    dur_mask = mask
    if phoneme_only:
        if timed_mask is None:
            raise ValueError("phoneme_only needs the vocabulary's timed-token mask")
        dur_mask = mask * timed_mask[batch.z]
    dur_part = ad.mse_loss(dur_pred, batch.d / duration_scale, dur_mask)
    total = token_part + dur_part * lambda_dur
    return total, token_part, dur_part


def prepared_batch(utterances, noise_sigma: float = 0.0, rng=None) -> Batch:
    return collate(utterances, [prepare_target(u) for u in utterances], noise_sigma, rng)


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


def pack_batches(lengths: list[int], budget: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle and greedily pack indices so that ``count * max_len <= budget``."""
    order = rng.permutation(len(lengths))
    batches, cur, cur_max = [], [], 0
    for i in order:
        n = lengths[i]
        new_max = max(cur_max, n)
        if cur and new_max * (len(cur) + 1) > budget:
            batches.append(cur)
            cur, new_max = [], n
        cur.append(int(i))
        cur_max = new_max
    if cur:
        batches.append(cur)
    return batches


class BatchSchedule:
    """Deterministic mapping ``step -> list of utterance indices``."""

    def __init__(self, lengths: list[int], budget: int, seed: int):
        self.lengths = lengths
        self.budget = budget
        self.seed = seed
        self._epoch = -1
        self._start = 0
        self._batches: list[list[int]] = []

    def _load(self, epoch: int, start: int) -> None:
        self._epoch = epoch
        self._start = start
        self._batches = pack_batches(self.lengths, self.budget, np.random.default_rng([self.seed, 7, epoch]))

    def at(self, step: int) -> list[int]:
        if step < self._start:
            self._load(0, 0)
        elif self._epoch < 0:
            self._load(0, 0)
        while step >= self._start + len(self._batches):
            self._load(self._epoch + 1, self._start + len(self._batches))
        return self._batches[step - self._start]


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def token_accuracy(model: IsochronyModel, utterances, batch_frames: int = 4000) -> float:
    """Teacher-forced accuracy of the token head over real positions."""
    correct = total = 0
    idx = list(range(len(utterances)))
    with ad.no_grad():
        for chunk in pack_batches([utterances[i].total_frames for i in idx], batch_frames,
                                  np.random.default_rng(0)):
            batch = prepared_batch([utterances[i] for i in sorted(chunk)])
            logits, _ = model.forward(batch)
            pred = logits.data.argmax(-1)
            correct += int(((pred == batch.z) * batch.mask).sum())
            total += int(batch.mask.sum())
    return correct / max(1, total)


def _dev_overlap(model: IsochronyModel, vocab: Vocabulary, utterances) -> float:
    from .inference import greedy_decode, hypothesis_duration
    from .metrics import speech_overlap

    vals = []
    with ad.no_grad():
        for u in utterances:
            hyp = greedy_decode(model, u.features, u.total_frames, vocab)
            vals.append(speech_overlap(u.total_frames, hypothesis_duration(hyp, vocab)))
    return float(np.mean(vals)) if vals else float("nan")


def _adam_state_arrays(opt: AdamWState) -> dict[str, np.ndarray]:
    out = {"adam/step": np.asarray(opt.step)}
    for k, v in opt.m.items():
        out[f"adam_m/{k}"] = v
    for k, v in opt.v.items():
        out[f"adam_v/{k}"] = v
    return out


def _adam_state_from(extra: dict[str, np.ndarray], opt: AdamWState) -> None:
    opt.step = int(extra.get("adam/step", 0))
    for k, v in extra.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = v.copy()
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = v.copy()


def train_step(model: IsochronyModel, opt: AdamWState, batch: Batch, cfg: TrainConfig, step: int,
               rng: np.random.Generator, timed_mask: np.ndarray | None = None) -> tuple[float, float]:
    for p in model.params.values():
        p.grad = None
    try:
        logits, dur = model.forward(batch, training=True, rng=rng)
    except FloatingPointError as exc:
        raise NumericError(f"{exc} at step {step}") from exc
    total, tok, dpart = joint_loss(logits, dur, batch, model.config.duration_scale, cfg.lambda_dur,
                                   cfg.mse_phoneme_only, cfg.label_smoothing, timed_mask)
    value = float(total.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step}")
    total.backward()
    opt.lr = linear_decay_lr(step, cfg.steps, cfg.base_lr)
    adamw_step(model.params, opt)
    return float(tok.data), float(dpart.data)


def train(corpus: list[Utterance], model_cfg: ModelConfig, cfg: TrainConfig, vocab: Vocabulary,
          dev: list[Utterance] | None = None, resume_from: str | None = None,
          stop_after: int | None = None, report_path: str | None = None,
          meta: dict | None = None) -> tuple[IsochronyModel, TrainReport]:
    """Train from scratch (or resume) and optionally write a checkpoint.

    ``stop_after`` ends the run early at that global step while keeping the
    learning-rate schedule of the full ``cfg.steps``; used for resumption.
    """
    cfg.validate()
    if not corpus:
        raise ValueError("training corpus is empty")
    if resume_from:
        model, extra, _ = load_checkpoint(resume_from)
        opt = AdamWState(lr=cfg.base_lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
                         eps=cfg.eps)
        _adam_state_from(extra, opt)
    else:
        model = IsochronyModel(model_cfg)
        opt = AdamWState(lr=cfg.base_lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
                         eps=cfg.eps)
    targets = [prepare_target(u) for u in corpus]
    schedule = BatchSchedule([u.total_frames for u in corpus], cfg.batch_frames, cfg.seed)
    timed = vocab.timed_mask().astype(np.float64)
    report = TrainReport()
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    acc_tok = acc_dur = 0.0
    n_acc = 0
    dev_subset = (dev or [])[: cfg.eval_max_utts]
    for step in range(opt.step, end):
        idx = schedule.at(step)
        rng = np.random.default_rng([cfg.seed, 11, step])
        batch = collate([corpus[i] for i in idx], [targets[i] for i in idx], cfg.noise_sigma, rng)
        tok, dl = train_step(model, opt, batch, cfg, step, rng, timed)
        acc_tok += tok
        acc_dur += dl
        n_acc += 1
        done = step + 1
        if done % cfg.eval_interval == 0 or done == end:
            row = dict(step=done, token_loss=acc_tok / n_acc, dur_loss=acc_dur / n_acc,
                       dev_overlap=float("nan"), dev_acc=float("nan"))
            if dev_subset:
                row["dev_acc"] = token_accuracy(model, dev_subset)
                row["dev_overlap"] = _dev_overlap(model, vocab, dev_subset)
            report.append(**row)
            log.info("step %d token_loss %.4f dur_loss %.5f dev_acc %.4f dev_overlap %.4f",
                     done, row["token_loss"], row["dur_loss"], row["dev_acc"], row["dev_overlap"])
            acc_tok = acc_dur = 0.0
            n_acc = 0
    if report_path:
        report.write(report_path, append=bool(resume_from))
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, model, extra=_adam_state_arrays(opt),
                        meta={"train_config": asdict(cfg), **(meta or {})})
    return model, report


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    rows: list[tuple[str, tuple, float, float, float]]
    kinks_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0.0 else abs(a - b) / denom


# Attention key biases shift every score in a row by the same amount, which
# softmax ignores: their true gradient is identically zero and any relative
# error on them measures only roundoff.
ZERO_GRADIENT_SUFFIXES = (".bk",)


def gradient_check(model: IsochronyModel, batch: Batch, epsilon: float = 1e-4, tolerance: float = 1e-5,
                   n_samples: int = 20, seed: int = 0, lambda_dur: float = 1.0) -> GradCheckReport:
    """Compare autodiff gradients with central differences on sampled entries.

    Runs in eval mode (no dropout). Parameter tensors are chosen uniformly,
    then one entry within each. Key biases are skipped (see
    ``ZERO_GRADIENT_SUFFIXES``), as are entries whose two probes put some
    ReLU on different sides of its kink; those are redrawn.
    """
    if model.np_dtype != np.float64:
        raise ValueError("gradient_check needs a float64 model")

    def loss() -> Tensor:
        logits, dur = model.forward(batch, training=False)
        return joint_loss(logits, dur, batch, model.config.duration_scale, lambda_dur)[0]

    for p in model.params.values():
        p.grad = None
    loss().backward()
    rng = np.random.default_rng(seed)
    names = [n for n in model.params if not n.endswith(ZERO_GRADIENT_SUFFIXES)]
    rows = []
    kinks = 0
    while len(rows) < n_samples:
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        with ad.no_grad():
            p.data[idx] = orig + epsilon
            with ad.record_kinks() as hi:
                up = float(loss().data)
            p.data[idx] = orig - epsilon
            with ad.record_kinks() as lo:
                down = float(loss().data)
            p.data[idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(hi, lo)):
            # a ReLU switched sides between the probes; the difference quotient is meaningless here
            kinks += 1
            if kinks > 10 * n_samples:
                raise RuntimeError("gradient check: too many samples straddle ReLU kinks; reduce epsilon")
            continue
        numeric = (up - down) / (2 * epsilon)
        rows.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    worst = max((r[4] for r in rows), default=0.0)
    return GradCheckReport(worst, tolerance, rows, kinks)
