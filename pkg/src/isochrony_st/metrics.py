"""Speech overlap and corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .data import EOS, OC, Utterance, Vocabulary
from .inference import round_half_up


def speech_overlap_raw(ref_frames, hyp_frames) -> float:
    if ref_frames <= 0:
        raise ValueError(f"speech overlap undefined for reference duration {ref_frames}")
    return 1.0 - abs(ref_frames - hyp_frames) / ref_frames


def speech_overlap(ref_frames, hyp_frames) -> float:
    """``max(0, 1 - |ref - hyp| / ref)``."""
    return max(0.0, speech_overlap_raw(ref_frames, hyp_frames))


def ngram_stats(ref: Sequence[int], hyp: Sequence[int], max_n: int = 4) -> tuple[list[int], list[int]]:
    """Clipped n-gram matches and hypothesis n-gram totals for n = 1..max_n."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        h = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(0, len(hyp) - n + 1))
    return matches, totals


def bleu_from_stats(matches, totals, hyp_len: int, ref_len: int) -> float:
    """BLEU (0-100) from corpus-level counts; add-one smoothing for n >= 2 zero matches."""
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if m == 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t)
    log_p /= len(matches)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def corpus_bleu(references: Sequence[Sequence[int]], hypotheses: Sequence[Sequence[int]], max_n: int = 4) -> float:
    if len(hypotheses) == 0:
        raise ValueError("corpus_bleu needs at least one hypothesis")
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    M = [0] * max_n
    Tt = [0] * max_n
    hyp_len = ref_len = 0
    for ref, hyp in zip(references, hypotheses):
        m, t = ngram_stats(ref, hyp, max_n)
        M = [a + b for a, b in zip(M, m)]
        Tt = [a + b for a, b in zip(Tt, t)]
        hyp_len += len(hyp)
        ref_len += len(ref)
    return bleu_from_stats(M, Tt, hyp_len, ref_len)


def unit_block(tokens: Sequence[int]) -> list[int]:
    """Tokens before the first ``<OC>`` (or ``<eos>``): the scored translation."""
    out = []
    for t in tokens:
        if t in (OC, EOS):
            break
        out.append(int(t))
    return out


@dataclass
class EvalReport:
    bleu: float
    mean_overlap: float
    mean_overlap_raw: float
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("id", "ref_frames", "hyp_frames", "overlap", "overlap_raw", "hyp_len", "ref_len",
               "match_1", "match_2", "match_3", "match_4", "total_1", "total_2", "total_3", "total_4")

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(self.COLUMNS) + "\n")
            for r in self.rows:
                fh.write("\t".join(str(r[c]) if not isinstance(r[c], float) else repr(r[c]) for c in self.COLUMNS))
                fh.write("\n")

    def summary(self) -> str:
        return "\n".join([
            "== evaluation ==",
            f"utterances   {len(self.rows)}",
            f"BLEU         {self.bleu:.2f}",
            f"overlap      {self.mean_overlap:.12f}",
            f"overlap_raw  {self.mean_overlap_raw:.12f}",
        ])


def evaluate(decoded: list[dict], corpus: list[Utterance], vocab: Vocabulary | None = None) -> EvalReport:
    """Score decoded records (see :func:`inference.read_decoded`) against a corpus."""
    if not decoded:
        raise ValueError("no hypotheses to evaluate")
    by_id = {u.uid: u for u in corpus}
    seen = {}
    for rec in decoded:
        if rec["id"] not in by_id:
            raise KeyError(f"decoded id {rec['id']!r} not present in corpus")
        if rec["id"] in seen:
            raise ValueError(f"decoded id {rec['id']!r} appears twice")
        seen[rec["id"]] = rec
    missing = [u.uid for u in corpus if u.uid not in seen]
    if missing:
        raise KeyError(f"corpus id {missing[0]!r} has no decoded hypothesis")
    rows, refs, hyps = [], [], []
    for u in corpus:
        rec = seen[u.uid]
        toks = [int(t) for t in rec["tokens"]]
        hyp_frames = sum(round_half_up(d) for t, d in zip(toks, rec["durations"])
                         if vocab is None or vocab.is_timed(t))
        hyp_units = unit_block(toks)
        m, t = ngram_stats(u.target_bpe, hyp_units)
        rows.append({
            "id": u.uid, "ref_frames": u.total_frames, "hyp_frames": hyp_frames,
            "overlap": speech_overlap(u.total_frames, hyp_frames),
            "overlap_raw": speech_overlap_raw(u.total_frames, hyp_frames),
            "hyp_len": len(hyp_units), "ref_len": len(u.target_bpe),
            **{f"match_{n + 1}": m[n] for n in range(4)},
            **{f"total_{n + 1}": t[n] for n in range(4)},
        })
        refs.append(u.target_bpe)
        hyps.append(hyp_units)
    bleu = corpus_bleu(refs, hyps)
    mean = math.fsum(r["overlap"] for r in rows) / len(rows)
    mean_raw = math.fsum(r["overlap_raw"] for r in rows) / len(rows)
    return EvalReport(bleu, mean, mean_raw, rows)
