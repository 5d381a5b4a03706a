"""Batch, streaming and speculative generation."""

from __future__ import annotations

import codecs
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .data import Tokenizer
from .errors import ConfigError, LengthError, SinkError
from .model import TransformerModel


@dataclass(frozen=True)
class GenParams:
    max_new_tokens: int = 64
    temperature: float = 1.0
    top_k: int | None = None
    top_p: float | None = None
    stop: frozenset[int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 0 or self.temperature < 0:
            raise ConfigError("max_new_tokens and temperature must be non-negative")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.top_p is not None and not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.stop is not None:
            object.__setattr__(self, "stop", frozenset(self.stop))

    def stop_ids(self, tok: Tokenizer) -> frozenset[int]:
        return frozenset({tok.eos}) if self.stop is None else self.stop


def adjusted_probs(logits: np.ndarray, p: GenParams) -> np.ndarray:
    """Sampling distribution after temperature, top-k and top-p (float64)."""
    z = np.asarray(logits, dtype=np.float64)
    V = z.shape[-1]
    if p.temperature == 0:
        out = np.zeros(V)
        out[int(np.argmax(z))] = 1.0
        return out
    z = z / p.temperature
    keep = np.ones(V, dtype=bool)
    order = np.argsort(-z, kind="stable")
    if p.top_k is not None and p.top_k < V:
        keep[:] = False
        keep[order[: p.top_k]] = True
    e = np.where(keep, np.exp(z - z[keep].max()), 0.0)
    probs = e / e.sum()
    if p.top_p is not None and p.top_p < 1:
        ranked = probs[order]
        # smallest prefix reaching top_p; the slack absorbs round-off in the cumsum
        cut = int(np.searchsorted(np.cumsum(ranked), p.top_p - 1e-12, side="left")) + 1
        nucleus = np.zeros(V, dtype=bool)
        nucleus[order[:cut]] = True
        probs = np.where(nucleus, probs, 0.0)
        probs /= probs.sum()
    return probs


class Sampler(Protocol):
    def categorical(self, probs: np.ndarray) -> int: ...

    def bernoulli(self, prob: float) -> bool: ...


class RandomSampler:
    """Draws from a numpy Generator by inverse CDF."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def categorical(self, probs: np.ndarray) -> int:
        cdf = np.cumsum(probs)
        idx = int(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right"))
        idx = min(idx, len(probs) - 1)
        while probs[idx] <= 0:
            idx -= 1
        return idx

    def bernoulli(self, prob: float) -> bool:
        return bool(self.rng.random() < prob)


def sample_token(logits: np.ndarray, p: GenParams, rng: np.random.Generator) -> int:
    probs = adjusted_probs(logits, p)
    if p.temperature == 0:
        return int(np.argmax(probs))
    return RandomSampler(rng).categorical(probs)


class ModelSession:
    """One decoding stream over a model: owns a KV cache."""

    def __init__(self, model: TransformerModel):
        self.model = model
        self.cache = model.new_cache()
        self.limit = model.config.max_context

    @property
    def length(self) -> int:
        return self.cache.length

    def feed(self, ids) -> np.ndarray:
        with T.no_grad():
            return self.model.forward(np.asarray(ids, dtype=np.int64), self.cache).data

    def crop(self, length: int) -> None:
        self.cache.crop(length)

    def copy(self) -> ModelSession:
        other = ModelSession.__new__(ModelSession)
        other.model, other.cache, other.limit = self.model, self.cache.copy(), self.limit
        return other


@dataclass
class Generation:
    text: str
    tokens: list[int]
    truncated: bool = False
    stopped: bool = False


def _prompt_ids(tok: Tokenizer, prompt: str, limit: int) -> list[int]:
    ids = tok.encode(prompt) or [tok.eos]
    if len(ids) > limit:
        raise LengthError(f"prompt of {len(ids)} tokens exceeds context {limit}")
    return ids


def generate(
    model: TransformerModel,
    tok: Tokenizer,
    prompt: str,
    p: GenParams,
    sink: Callable[[str], object] | None = None,
) -> Generation:
    """Autoregressive decoding with a KV cache.

    ``sink`` receives one payload per sampled token (a terminating stop token
    included); payloads withhold incomplete UTF-8 sequences, and their
    concatenation is the returned text.
    """
    session = ModelSession(model)
    ids = _prompt_ids(tok, prompt, session.limit)
    rng = np.random.default_rng(p.seed)
    stop = p.stop_ids(tok)
    decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")
    pieces: list[str] = []
    out: list[int] = []
    truncated = stopped = False
    if p.max_new_tokens == 0:
        return Generation("", [])
    logits = session.feed(ids)[-1]
    while True:
        tid = sample_token(logits, p, rng)
        stopped = tid in stop
        if not stopped:
            out.append(tid)
        room = session.length < session.limit
        last = stopped or len(out) == p.max_new_tokens or not room
        payload = decoder.decode(b"" if stopped else tok.token_bytes(tid), final=last)
        pieces.append(payload)
        if sink is not None:
            try:
                sink(payload)
            except Exception as exc:
                raise SinkError(f"sink failed after {len(out)} tokens: {exc}", "".join(pieces[:-1]), len(out)) from exc
        if last:
            truncated = not stopped and len(out) < p.max_new_tokens
            break
        logits = session.feed([tid])[-1]
    return Generation("".join(pieces), out, truncated, stopped)


def inference(model: TransformerModel, tok: Tokenizer, prompt: str, p: GenParams) -> str:
    return generate(model, tok, prompt, p).text


def stream_inference(
    model: TransformerModel, tok: Tokenizer, prompt: str, p: GenParams, sink: Callable[[str], object]
) -> str:
    return generate(model, tok, prompt, p, sink).text


# ---------------------------------------------------------------- speculative


@dataclass
class SpecStats:
    proposed: int = 0
    accepted: int = 0
    target_forward_calls: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0

    def as_dict(self) -> dict:
        return {
            "proposed": self.proposed,
            "accepted": self.accepted,
            "target_forward_calls": self.target_forward_calls,
            "acceptance_rate": self.acceptance_rate,
        }


@dataclass
class SpecConfig:
    target: TransformerModel
    draft: TransformerModel
    gamma: int = 4

    def __post_init__(self):
        if self.gamma < 1:
            raise ConfigError("gamma must be >= 1")
        if self.target.config.vocab != self.draft.config.vocab:
            raise ConfigError("draft and target must share a vocabulary")


def speculative_generate(
    target,
    draft,
    prompt_ids: list[int],
    p: GenParams,
    gamma: int,
    sampler: Sampler,
    stop: frozenset[int] = frozenset(),
) -> tuple[list[int], SpecStats, bool]:
    """Draft-then-verify decoding over two sessions (``feed``/``crop``/``length``/``limit``).

    Each round the draft proposes up to ``gamma`` tokens from q; the target
    scores them in one call; token x is kept with probability
    min(1, p(x)/q(x)); the first rejection is replaced by a draw from
    norm(max(0, p - q)); if every proposal survives a bonus token is drawn
    from the target.  Sessions may arrive pre-filled with a prefix of
    ``prompt_ids``.  Returns (tokens, stats, truncated).
    """
    ctx = list(prompt_ids)
    stats = SpecStats()
    out: list[int] = []
    limit = min(target.limit, draft.limit)
    if len(ctx) > limit:
        raise LengthError(f"prompt of {len(ctx)} tokens exceeds context {limit}")
    for s in (target, draft):
        if s.length >= len(ctx):
            raise ValueError("sessions must leave at least the last prompt token unconsumed")
    truncated = False
    while len(out) < p.max_new_tokens:
        if len(ctx) > limit:
            truncated = True
            break
        g = min(gamma, limit - len(ctx))
        proposals, qs = [], []
        feed = ctx[draft.length :]
        for _ in range(g):
            q = adjusted_probs(draft.feed(feed)[-1], p)
            x = sampler.categorical(q)
            proposals.append(x)
            qs.append(q)
            feed = [x]
        verify = target.feed(ctx[target.length :] + proposals)[-(g + 1) :]
        stats.target_forward_calls += 1
        stats.proposed += g
        emitted = []
        for i, x in enumerate(proposals):
            pi = adjusted_probs(verify[i], p)
            if sampler.bernoulli(min(1.0, pi[x] / qs[i][x])):
                emitted.append(x)
                continue
            residual = np.maximum(pi - qs[i], 0.0)
            total = residual.sum()
            emitted.append(sampler.categorical(residual / total if total > 0 else pi))
            break
        else:
            emitted.append(sampler.categorical(adjusted_probs(verify[g], p)))
        stats.accepted += len(emitted) - 1
        ctx.extend(emitted)
        target.crop(min(target.length, len(ctx) - 1))
        draft.crop(min(draft.length, len(ctx) - 1))
        for tid in emitted:
            if tid in stop:
                return out, stats, False
            out.append(tid)
            if len(out) == p.max_new_tokens:
                break
    return out, stats, truncated


def speculative_decode(sc: SpecConfig, tok: Tokenizer, prompt: str, p: GenParams) -> tuple[str, SpecStats]:
    target, draft = ModelSession(sc.target), ModelSession(sc.draft)
    ids = _prompt_ids(tok, prompt, min(target.limit, draft.limit))
    if p.max_new_tokens == 0:
        return "", SpecStats()
    sampler = RandomSampler(np.random.default_rng(p.seed))
    tokens, stats, _ = speculative_generate(target, draft, ids, p, sc.gamma, sampler, p.stop_ids(tok))
    return tok.decode(tokens), stats
