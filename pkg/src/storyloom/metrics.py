"""Lexical diversity and redundancy metrics over generated scripts.

All metrics share one tokenizer: lowercase, whitespace split, punctuation
stripped at token boundaries (internal hyphens and apostrophes survive).
Self-BLEU is BLEU-4 with uniform weights, a brevity penalty, and no
smoothing: any n-gram order with zero matches zeroes the score.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

MATTR_WINDOW = 500
BLEU_ORDER = 4

_STRIP = string.punctuation + "‘’“”–—…"  # smart quotes, dashes, ellipsis


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        token = raw.strip(_STRIP)
        if token:
            tokens.append(token)
    return tokens


def ttr(tokens: Sequence[str]) -> float:
    """Plain type-token ratio; empty input is 0."""
    if not tokens:
        return 0.0
    return len(set(tokens)) / len(tokens)


def distinct_n(tokens: Sequence[str], n: int) -> float:
    """Distinct n-grams over total n-grams; 0 when no n-grams exist."""
    if n < 1:
        raise ValueError("n must be >= 1")
    total = len(tokens) - n + 1
    if total <= 0:
        return 0.0
    grams = {tuple(tokens[i : i + n]) for i in range(total)}
    return len(grams) / total


def mattr(tokens: Sequence[str], window: int = MATTR_WINDOW) -> float:
    """Moving-average type-token ratio scaled to [0, 100].

    Mean of per-window TTRs over every contiguous window; shorter texts fall
    back to the plain TTR.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(tokens) < window:
        return 100.0 * ttr(tokens)
    counts: Counter[str] = Counter(tokens[:window])
    types = len(counts)
    total_ratio = types / window
    windows = 1
    for i in range(window, len(tokens)):
        out_token, in_token = tokens[i - window], tokens[i]
        if out_token != in_token:
            counts[out_token] -= 1
            if counts[out_token] == 0:
                del counts[out_token]
                types -= 1
            if counts[in_token] == 0:
                types += 1
            counts[in_token] += 1
        total_ratio += types / window
        windows += 1
    return 100.0 * total_ratio / windows


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypothesis: Sequence[str], references: Iterable[Sequence[str]], max_order: int = BLEU_ORDER
) -> float:
    """Sentence BLEU with uniform weights, brevity penalty, no smoothing."""
    references = [list(r) for r in references]
    if not hypothesis or not references:
        return 0.0
    log_sum = 0.0
    for order in range(1, max_order + 1):
        hyp_counts = _ngram_counts(hypothesis, order)
        total = sum(hyp_counts.values())
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, order).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram]) for gram, count in hyp_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total) / max_order
    hyp_len = len(hypothesis)
    ref_len = min((abs(len(r) - hyp_len), len(r)) for r in references)[1]
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_sum)


def self_bleu(scene_texts: Sequence[str]) -> float:
    """Mean BLEU of each scene against all others; lower is more diverse."""
    if len(scene_texts) < 2:
        return 0.0
    tokenized = [tokenize(text) for text in scene_texts]
    scores = []
    for i, hypothesis in enumerate(tokenized):
        references = [t for j, t in enumerate(tokenized) if j != i]
        scores.append(bleu(hypothesis, references))
    return sum(scores) / len(scores)


@dataclass(frozen=True)
class MetricReport:
    words: int
    distinct_2: float
    mattr: float
    self_bleu: float
    premise_ttr: float | None = None
    per_scene: tuple[dict[str, Any], ...] | None = None
    metadata: dict[str, Any] = field(
        default_factory=lambda: {"mattr_window": MATTR_WINDOW, "bleu_order": BLEU_ORDER, "smoothing": "none"}
    )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "words": self.words,
            "distinct_2": self.distinct_2,
            "mattr": self.mattr,
            "self_bleu": self.self_bleu,
            "metadata": dict(self.metadata),
        }
        if self.premise_ttr is not None:
            out["premise_ttr"] = self.premise_ttr
        if self.per_scene is not None:
            out["per_scene"] = [dict(s) for s in self.per_scene]
        return out


def scene_text(scene) -> str:
    return scene.scene_description + "\n" + "\n".join(scene.dialogue)


def report_for_script(script, *, window: int = MATTR_WINDOW) -> MetricReport:
    """Compute the full report for a :class:`~storyloom.synthesis.Script`."""
    texts = [scene_text(s) for s in script.scenes]
    full = tokenize("\n".join(texts))
    per_scene = tuple(
        {"index": s.index, "words": len(tokenize(texts[i])), "dialogue_lines": len(s.dialogue)}
        for i, s in enumerate(script.scenes)
    )
    return MetricReport(
        words=len(full),
        distinct_2=distinct_n(full, 2),
        mattr=mattr(full, window),
        self_bleu=self_bleu(texts),
        premise_ttr=ttr(tokenize(script.premise.text)),
        per_scene=per_scene,
        metadata={"mattr_window": window, "bleu_order": BLEU_ORDER, "smoothing": "none"},
    )
