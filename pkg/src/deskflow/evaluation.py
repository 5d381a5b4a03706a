"""Perplexity, diversity metrics and the aggregated evaluation report.

Diversity metrics operate on whitespace-delimited words, not model tokens,
and return exact :class:`fractions.Fraction` values.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TEXT_ONLY, Dataset, Tokenizer
from .errors import DegenerateInputError, FormatError
from .infer import GenParams, generate
from .model import TransformerModel

DEFAULT_SEEDS = tuple(range(8))


def token_nll(model: TransformerModel, ids: Sequence[int]) -> tuple[float, int]:
    """Summed next-token NLL (float64) and count over non-overlapping context windows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        raise DegenerateInputError("need at least two tokens to score")
    width = model.config.max_context
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, ids.size - 1, width):
            window = ids[start : start + width + 1]
            if window.size < 2:
                break
            logits = model.forward(window[:-1]).data.astype(np.float64)
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            total -= float(logp[np.arange(window.size - 1), window[1:]].sum())
            count += window.size - 1
    return total, count


def perplexity_tokens(model: TransformerModel, ids: Sequence[int]) -> float:
    total, count = token_nll(model, ids)
    return math.exp(total / count)


def corpus_tokens(ds: Dataset, tok: Tokenizer) -> list[int]:
    if ds.kind != TEXT_ONLY:
        raise FormatError(f"perplexity needs a text_only dataset, got {ds.kind!r}")
    stream: list[int] = []
    for text in ds.texts():
        stream.extend(tok.encode(text))
        stream.append(tok.eos)
    return stream


def perplexity(model: TransformerModel, ds: Dataset, tok: Tokenizer) -> float:
    """exp of the token-weighted mean NLL over the EOS-joined corpus."""
    stream = corpus_tokens(ds, tok)
    if len(stream) < 2:
        raise DegenerateInputError("corpus is empty after tokenization")
    return perplexity_tokens(model, stream)


def words(text: str) -> list[str]:
    return text.split()


def msttr(tokens: Sequence[str], segment: int = 100) -> Fraction:
    """Mean type-token ratio over consecutive full segments.

    With fewer than ``segment`` words this falls back to the plain
    type-token ratio (callers flag it).
    """
    if not tokens:
        raise DegenerateInputError("msttr of an empty text")
    n_full = len(tokens) // segment
    if n_full == 0:
        return Fraction(len(set(tokens)), len(tokens))
    ratios = [Fraction(len(set(tokens[i * segment : (i + 1) * segment])), segment) for i in range(n_full)]
    return sum(ratios, Fraction(0)) / n_full


def _ngrams(texts: Sequence[str], n: int) -> Counter:
    if n < 1:
        raise ValueError("n must be >= 1")
    counts: Counter = Counter()
    for t in texts:
        w = words(t)
        counts.update(tuple(w[i : i + n]) for i in range(len(w) - n + 1))
    return counts


def distinct_n(texts: Sequence[str], n: int) -> Fraction:
    """Distinct n-grams over total n-grams, pooled over ``texts`` (0 if none)."""
    counts = _ngrams(texts, n)
    total = sum(counts.values())
    return Fraction(len(counts), total) if total else Fraction(0)


def unique_n(texts: Sequence[str], n: int) -> int:
    """Number of n-grams that occur exactly once in the pooled texts."""
    return sum(1 for c in _ngrams(texts, n).values() if c == 1)


@dataclass
class EvalReport:
    reward_mean: float | None
    ppl: float | None
    msttr100: float
    distinct1: float
    distinct2: float
    unique1: int
    unique2: int
    pred_length_mean: float
    n_samples: int
    flags: list[str] = field(default_factory=list)
    notes: list[str] = field(
        default_factory=lambda: [
            "diversity metrics count whitespace-delimited words",
            "ppl is measured on a held-out text_only corpus",
        ]
    )

    COLUMNS = (
        ("Reward", "reward_mean"),
        ("PPL", "ppl"),
        ("msttr-100", "msttr100"),
        ("distinct 1", "distinct1"),
        ("distinct 2", "distinct2"),
        ("unique 1", "unique1"),
        ("unique 2", "unique2"),
        ("Pred. Length", "pred_length_mean"),
    )

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, doc: dict) -> EvalReport:
        return cls(**doc)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, int):
        return str(v)
    return f"{v:.3f}"


def render_table(reports: dict[str, EvalReport]) -> str:
    """Aligned plain-text table, one row per named report."""
    header = ["Model"] + [c for c, _ in EvalReport.COLUMNS]
    rows = [[name] + [_fmt(getattr(r, attr)) for _, attr in EvalReport.COLUMNS] for name, r in reports.items()]
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def evaluate(
    policy: TransformerModel,
    tok: Tokenizer,
    prompts: Sequence[str],
    p: GenParams,
    reward=None,
    ppl_ds: Dataset | None = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    render=None,
) -> EvalReport:
    """Generate one completion per prompt per seed and aggregate the metrics.

    ``reward`` is a RewardModel or a ``(prompt, completion) -> float``
    callable; ``render`` maps a raw prompt to the text fed to the policy.
    """
    from .align import _as_reward_fn, sample_seed

    if not prompts:
        raise DegenerateInputError("no prompts to evaluate")
    score = _as_reward_fn(reward, tok) if reward is not None else None
    completions, lengths, rewards = [], [], []
    for seed in seeds:
        for i, prompt in enumerate(prompts):
            params = GenParams(p.max_new_tokens, p.temperature, p.top_k, p.top_p, p.stop, sample_seed(seed, i))
            g = generate(policy, tok, render(prompt) if render else prompt, params)
            completions.append(g.text)
            lengths.append(len(g.tokens))
            if score is not None:
                rewards.append(float(score(prompt, g.text)))
    flags = []
    all_words = [w for c in completions for w in words(c)]
    if not all_words:
        flags.append("degenerate: completions contain no words")
        m = Fraction(0)
    else:
        if len(all_words) < 100:
            flags.append("msttr fell back to plain type-token ratio (<100 words)")
        m = msttr(all_words)
    d1, d2 = distinct_n(completions, 1), distinct_n(completions, 2)
    if not sum(_ngrams(completions, 2).values()):
        flags.append("degenerate: no bigrams")
    return EvalReport(
        reward_mean=float(np.mean(rewards)) if score is not None else None,
        ppl=perplexity(policy, ppl_ds, tok) if ppl_ds is not None else None,
        msttr100=float(m),
        distinct1=float(d1),
        distinct2=float(d2),
        unique1=unique_n(completions, 1),
        unique2=unique_n(completions, 2),
        pred_length_mean=float(np.mean(lengths)),
        n_samples=len(completions),
        flags=flags,
    )
