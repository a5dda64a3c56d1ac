"""Word error rate: minimal edit alignment, corpus WER, grounding probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError

MATCH, SUB, DEL, INS = "match", "substitute", "delete", "insert"


@dataclass
class AlignOp:
    kind: str
    ref_index: int | None  # None for insertions
    hyp_index: int | None  # None for deletions


@dataclass
class Alignment:
    """Minimal edit script turning ref into hyp."""

    ops: list[AlignOp]
    n_sub: int
    n_ins: int
    n_del: int

    @property
    def cost(self) -> int:
        return self.n_sub + self.n_ins + self.n_del

    def replay(self, ref: list[str], hyp: list[str]) -> list[str]:
        """Apply the ops to ref; must reproduce hyp exactly."""
        out = []
        for op in self.ops:
            if op.kind == MATCH:
                out.append(ref[op.ref_index])
            elif op.kind in (SUB, INS):
                out.append(hyp[op.hyp_index])
            # deletions emit nothing
        return out


def align(ref: list[str], hyp: list[str]) -> Alignment:
    """Dynamic-programming minimal edit alignment (Levenshtein).

    Ties break substitution > deletion > insertion so alignments are
    reproducible across runs.
    """
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        cost[i][0] = i
    for j in range(m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row, above = cost[i], cost[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            diag = above[j - 1] + (r != hyp[j - 1])
            up = above[j] + 1
            left = row[j - 1] + 1
            row[j] = diag if diag <= up and diag <= left else min(up, left)

    ops: list[AlignOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0 and here == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            kind = MATCH if ref[i - 1] == hyp[j - 1] else SUB
            ops.append(AlignOp(kind, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and here == cost[i - 1][j] + 1:
            ops.append(AlignOp(DEL, i - 1, None))
            i -= 1
        else:
            ops.append(AlignOp(INS, None, j - 1))
            j -= 1
    ops.reverse()
    return Alignment(
        ops=ops,
        n_sub=sum(op.kind == SUB for op in ops),
        n_ins=sum(op.kind == INS for op in ops),
        n_del=sum(op.kind == DEL for op in ops),
    )


@dataclass
class UttScore:
    utt_id: str
    n_ref: int
    n_sub: int
    n_ins: int
    n_del: int

    @property
    def wer(self) -> float:
        errors = self.n_sub + self.n_ins + self.n_del
        return errors / self.n_ref if self.n_ref else float(errors > 0)


@dataclass
class WerReport:
    wer: float
    n_ref: int
    n_sub: int
    n_ins: int
    n_del: int
    per_utt: list[UttScore] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'utt_id':<20} {'wer':>8} {'n_ref':>6} {'S':>4} {'I':>4} {'D':>4}"]
        for u in self.per_utt:
            lines.append(
                f"{u.utt_id:<20} {u.wer:>8.4f} {u.n_ref:>6} {u.n_sub:>4} {u.n_ins:>4} {u.n_del:>4}"
            )
        lines.append(
            f"{'TOTAL':<20} {self.wer:>8.4f} {self.n_ref:>6} {self.n_sub:>4} "
            f"{self.n_ins:>4} {self.n_del:>4}"
        )
        return "\n".join(lines)

    def machine_lines(self) -> list[str]:
        return [
            f"{u.utt_id}\t{u.wer:.6f}\t{u.n_ref}\t{u.n_sub}\t{u.n_ins}\t{u.n_del}"
            for u in self.per_utt
        ]


def wer(refs: list[list[str]], hyps: list[list[str]], utt_ids=None) -> WerReport:
    """Corpus WER = (sum S + I + D) / sum |ref|, with per-utterance breakdown."""
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if utt_ids is None:
        utt_ids = [f"utt{i:04d}" for i in range(len(refs))]
    per_utt = []
    for utt_id, ref, hyp in zip(utt_ids, refs, hyps):
        a = align(ref, hyp)
        per_utt.append(UttScore(utt_id, len(ref), a.n_sub, a.n_ins, a.n_del))
    n_ref = sum(u.n_ref for u in per_utt)
    if n_ref == 0:
        raise UndefinedMetricError("WER undefined: zero reference words in total")
    n_sub = sum(u.n_sub for u in per_utt)
    n_ins = sum(u.n_ins for u in per_utt)
    n_del = sum(u.n_del for u in per_utt)
    return WerReport((n_sub + n_ins + n_del) / n_ref, n_ref, n_sub, n_ins, n_del, per_utt)


def grounded_token_error_rate(
    refs: list[list[str]], hyps: list[list[str]], grounded_words: set[str]
) -> float:
    """Error rate restricted to reference positions holding grounded words.

    A grounded reference token counts as an error when its aligned op is a
    substitution or deletion; insertions have no reference position.
    """
    n_grounded = 0
    n_errors = 0
    for ref, hyp in zip(refs, hyps):
        a = align(ref, hyp)
        for op in a.ops:
            if op.ref_index is None or ref[op.ref_index] not in grounded_words:
                continue
            n_grounded += 1
            if op.kind in (SUB, DEL):
                n_errors += 1
    if n_grounded == 0:
        raise UndefinedMetricError("no grounded reference tokens found")
    return n_errors / n_grounded


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Fixed-point-free permutation of range(n) via Sattolo's algorithm."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def grounding_probe(model, items, pairing: str, seed: int = 0, beam_size: int = 1) -> WerReport:
    """Decode one test set under matched / mismatched / none image pairing.

    ``items`` carry (utt_id, features, visual input, reference words); the
    same audio is decoded in every pairing, only the images change.
    Mismatched pairing derangement-shuffles the images (seeded, no fixed
    point); ``none`` substitutes a zero visual embedding.
    """
    if pairing not in ("matched", "mismatched", "none"):
        raise ValueError(f"unknown pairing {pairing!r}")
    if not model.is_multimodal:
        raise ValueError("grounding probe needs a multimodal model")
    visuals = [item.visual for item in items]
    if pairing == "mismatched":
        perm = derangement(len(items), np.random.default_rng(seed))
        visuals = [visuals[j] for j in perm]
    elif pairing == "none":
        visuals = [None] * len(items)  # model substitutes a zero embedding

    refs, hyps, utt_ids = [], [], []
    for item, visual in zip(items, visuals):
        text = model.transcribe(item.features, visual, beam_size=beam_size)
        refs.append(item.ref_words)
        hyps.append(text.split())
        utt_ids.append(item.utt_id)
    return wer(refs, hyps, utt_ids)
