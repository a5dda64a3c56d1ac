"""Unigram-LM subword vocabulary: EM training and Viterbi segmentation.

Text is lowercased and whitespace-collapsed; word boundaries become the
``▁`` marker prefix, so a vocabulary round-trips any text over its
training alphabet exactly. Ids are dense and 0-based with the four
specials first: pad=0, unk=1, sos=2, eos=3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, DataError

BOUNDARY = "▁"  # ▁
SPECIAL_PIECES = ("<pad>", "<unk>", "<s>", "</s>")
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3
N_SPECIALS = 4

UNK_LOG_PROB = -100.0  # per unknown character emitted as <unk>

_NEG_INF = float("-inf")


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def _to_internal(text: str) -> str:
    """Normalized text with every word prefixed by the boundary marker."""
    norm = normalize(text)
    if not norm:
        return ""
    return BOUNDARY + norm.replace(" ", BOUNDARY)


@dataclass
class Vocabulary:
    """Subword pieces with log probabilities; immutable after training."""

    pieces: list[tuple[str, float]]  # non-special pieces, id = index + N_SPECIALS

    def __post_init__(self):
        self._ids = {p: i + N_SPECIALS for i, (p, _) in enumerate(self.pieces)}
        self._log_probs = {p: lp for p, lp in self.pieces}
        self._max_len = max((len(p) for p, _ in self.pieces), default=1)

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.pieces)

    def id_of(self, piece: str) -> int:
        return self._ids[piece]

    def piece_of(self, token_id: int) -> str:
        if 0 <= token_id < N_SPECIALS:
            return SPECIAL_PIECES[token_id]
        if token_id < self.size:
            return self.pieces[token_id - N_SPECIALS][0]
        raise IndexError(f"token id {token_id} out of range for vocabulary of {self.size}")

    def log_prob(self, piece: str) -> float:
        return self._log_probs[piece]

    def save(self, path) -> None:
        lines = ["# mmasr-vocab v1"]
        for role, piece in zip(("pad", "unk", "sos", "eos"), SPECIAL_PIECES):
            lines.append(f"# special {role} {piece}")
        for piece, lp in self.pieces:
            lines.append(f"{piece}\t{lp:.17g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        pieces = []
        for line in lines:
            if not line or line.startswith("#"):
                continue
            try:
                piece, lp = line.split("\t")
                pieces.append((piece, float(lp)))
            except ValueError as exc:
                raise DataError(f"{path}: malformed vocabulary line {line!r}") from exc
        if not pieces:
            raise DataError(f"{path}: empty vocabulary")
        return cls(pieces)


def _matches_at(text: str, pos: int, log_probs: dict[str, float], max_len: int):
    """(end, piece) candidates for pieces starting at pos."""
    out = []
    for end in range(pos + 1, min(pos + max_len, len(text)) + 1):
        piece = text[pos:end]
        if piece in log_probs:
            out.append((end, piece))
    return out


def _viterbi(text: str, log_probs: dict[str, float], max_len: int):
    """Best segmentation of ``text``.

    Returns (pieces, score); each entry is (piece, known) where known=False
    marks an out-of-alphabet character emitted as a one-char unknown.
    """
    n = len(text)
    best = [_NEG_INF] * (n + 1)
    back: list[tuple[int, str, bool] | None] = [None] * (n + 1)
    best[0] = 0.0
    for pos in range(n):
        if best[pos] == _NEG_INF:
            continue
        for end, piece in _matches_at(text, pos, log_probs, max_len):
            score = best[pos] + log_probs[piece]
            if score > best[end]:
                best[end] = score
                back[end] = (pos, piece, True)
        if text[pos] not in log_probs:
            # out-of-alphabet character: keep the lattice connected via <unk>
            score = best[pos] + UNK_LOG_PROB
            if score > best[pos + 1]:
                best[pos + 1] = score
                back[pos + 1] = (pos, text[pos], False)
    pieces = []
    pos = n
    while pos > 0:
        prev, piece, known = back[pos]
        pieces.append((piece, known))
        pos = prev
    pieces.reverse()
    return pieces, best[n]


def encode(vocab: Vocabulary, text: str) -> list[int]:
    """Viterbi maximum-log-probability segmentation into token ids."""
    internal = _to_internal(text)
    if not internal:
        return []
    pieces, _ = _viterbi(internal, vocab._log_probs, vocab._max_len)
    return [vocab.id_of(p) if known else UNK_ID for p, known in pieces]


def decode(vocab: Vocabulary, ids) -> str:
    """Concatenate pieces, restore spaces from boundary markers, drop specials."""
    chunks = []
    for token_id in ids:
        token_id = int(token_id)
        if token_id < 0 or token_id >= vocab.size:
            raise IndexError(f"token id {token_id} out of range for vocabulary of {vocab.size}")
        if token_id < N_SPECIALS:
            continue
        chunks.append(vocab.piece_of(token_id))
    return "".join(chunks).replace(BOUNDARY, " ").strip()


def _expected_counts(internal: str, log_probs: dict[str, float], max_len: int):
    """Lattice forward-backward: expected piece counts for one sentence."""
    n = len(internal)
    spans = []  # (start, end, piece, logp)
    for pos in range(n):
        for end, piece in _matches_at(internal, pos, log_probs, max_len):
            spans.append((pos, end, piece, log_probs[piece]))

    alpha = [_NEG_INF] * (n + 1)
    beta = [_NEG_INF] * (n + 1)
    alpha[0] = 0.0
    beta[n] = 0.0
    by_end: dict[int, list] = {}
    by_start: dict[int, list] = {}
    for span in spans:
        by_end.setdefault(span[1], []).append(span)
        by_start.setdefault(span[0], []).append(span)
    for end in range(1, n + 1):
        terms = [alpha[s] + lp for s, _, _, lp in by_end.get(end, []) if alpha[s] > _NEG_INF]
        if terms:
            alpha[end] = _logsumexp(terms)
    for start in range(n - 1, -1, -1):
        terms = [beta[e] + lp for _, e, _, lp in by_start.get(start, []) if beta[e] > _NEG_INF]
        if terms:
            beta[start] = _logsumexp(terms)

    total = alpha[n]
    counts: dict[str, float] = {}
    if total == _NEG_INF:
        return counts, total
    for start, end, piece, lp in spans:
        if alpha[start] > _NEG_INF and beta[end] > _NEG_INF:
            counts[piece] = counts.get(piece, 0.0) + math.exp(alpha[start] + lp + beta[end] - total)
    return counts, total


def _logsumexp(values) -> float:
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def _normalize_log_probs(counts: dict[str, float]) -> dict[str, float]:
    total = sum(counts.values())
    return {p: math.log(c) - math.log(total) for p, c in counts.items()}


def train_unigram(
    corpus,
    target_size: int,
    seed_max_len: int = 6,
    em_iters: int = 2,
    prune_fraction: float = 0.2,
) -> Vocabulary:
    """Train a unigram vocabulary by alternating EM and pruning.

    Seeds from all word substrings up to ``seed_max_len`` (capped at
    20x target_size by frequency), then repeats ``em_iters`` EM sweeps and
    drops the lowest-likelihood-loss ``prune_fraction`` of multi-char
    pieces until ``target_size`` total ids (specials included) remain.
    Single characters are never pruned, so coverage is total.
    """
    internals = [s for s in (_to_internal(t) for t in corpus) if s]
    if not internals:
        raise ConfigError("tokenizer training corpus is empty")
    alphabet = sorted({c for s in internals for c in s})
    floor_size = len(alphabet) + N_SPECIALS
    if target_size < floor_size:
        raise ConfigError(
            f"target_size {target_size} below alphabet + specials ({floor_size})"
        )

    # seed: substrings of boundary-prefixed words, ranked by frequency
    seed_counts: dict[str, float] = {}
    for internal in internals:
        words = [BOUNDARY + w for w in internal.split(BOUNDARY) if w]
        for word in words:
            for i in range(len(word)):
                for j in range(i + 1, min(i + seed_max_len, len(word)) + 1):
                    piece = word[i : j]
                    seed_counts[piece] = seed_counts.get(piece, 0.0) + 1.0
    chars = {c: seed_counts.get(c, 1.0) for c in alphabet}
    multi = sorted(
        ((p, c) for p, c in seed_counts.items() if len(p) > 1),
        key=lambda pc: (-pc[1], pc[0]),
    )[: 20 * target_size]
    counts = dict(chars)
    counts.update(multi)
    log_probs = _normalize_log_probs(counts)

    target_pieces = target_size - N_SPECIALS
    while True:
        for _ in range(em_iters):
            max_len = max(len(p) for p in log_probs)
            agg: dict[str, float] = {}
            for internal in internals:
                sent_counts, _ = _expected_counts(internal, log_probs, max_len)
                for p, c in sent_counts.items():
                    agg[p] = agg.get(p, 0.0) + c
            # characters stay in the model even with negligible mass
            for c in alphabet:
                agg[c] = max(agg.get(c, 0.0), 1e-12)
            log_probs = _normalize_log_probs(
                {p: c for p, c in agg.items() if c > 0.0 and (len(p) == 1 or p in log_probs)}
            )

        n_excess = len(log_probs) - target_pieces
        if n_excess <= 0:
            break
        prunable = [p for p in log_probs if len(p) > 1]
        n_drop = min(max(1, int(math.ceil(prune_fraction * len(prunable)))), n_excess)
        max_len = max(len(p) for p in log_probs)
        losses = []
        for piece in prunable:
            others = dict(log_probs)
            del others[piece]
            _, alt = _viterbi(piece, others, max_len)
            usage = math.exp(log_probs[piece])  # relative expected mass
            losses.append((usage * (log_probs[piece] - alt), piece))
        losses.sort(key=lambda lp: (lp[0], lp[1]))
        dropped = {piece for _, piece in losses[:n_drop]}
        log_probs = _normalize_log_probs(
            {p: max(math.exp(lp), 1e-300) for p, lp in log_probs.items() if p not in dropped}
        )

    ordered = sorted(log_probs.items(), key=lambda pl: (-pl[1], pl[0]))
    return Vocabulary(list(ordered))


def corpus_log_likelihood(vocab: Vocabulary, corpus) -> float:
    """Marginal log-likelihood of the corpus under the piece distribution."""
    total = 0.0
    for text in corpus:
        internal = _to_internal(text)
        if not internal:
            continue
        _, ll = _expected_counts(internal, vocab._log_probs, vocab._max_len)
        total += ll
    return total
