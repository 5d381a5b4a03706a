"""Independent reference computations used by the unit and acceptance tests."""

from __future__ import annotations

from collections import defaultdict
from typing import Callable

import numpy as np

from deskflow import tensor as T

# ---------------------------------------------------------------- finite differences


def finite_difference_grads(loss_fn: Callable[[], T.Tensor], params: dict[str, T.Tensor], h: float = 1e-3) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` w.r.t. every element of ``params``.

    Parameters are promoted to float64 for the perturbed evaluations and
    restored afterwards, so the reference is free of f32 round-off.
    """
    saved = {k: p.data for k, p in params.items()}
    try:
        for k, p in params.items():
            p.data = saved[k].astype(np.float64)
        out = {}
        with T.no_grad(), T.default_dtype(np.float64):
            for k, p in params.items():
                g = np.zeros_like(p.data)
                flat, gflat = p.data.reshape(-1), g.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = float(loss_fn().data)
                    flat[i] = orig - h
                    down = float(loss_fn().data)
                    flat[i] = orig
                    gflat[i] = (up - down) / (2 * h)
                out[k] = g
        return out
    finally:
        for k, p in params.items():
            p.data = saved[k]


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Norm-wise relative error, guarded for all-zero references."""
    denom = max(np.linalg.norm(reference), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(np.asarray(analytic, np.float64) - reference) / denom)


# ---------------------------------------------------------------- tree enumeration


class NeedChoice(Exception):
    def __init__(self, branches: list[tuple[object, float]]):
        self.branches = branches


class ScriptedSampler:
    """Replays a fixed prefix of choices, then asks the enumerator to branch."""

    def __init__(self, script: list):
        self.script = script
        self.pos = 0

    def _next(self, branches):
        if self.pos < len(self.script):
            choice = self.script[self.pos]
            self.pos += 1
            return choice
        raise NeedChoice(branches)

    def categorical(self, probs: np.ndarray) -> int:
        return self._next([(i, float(q)) for i, q in enumerate(probs) if q > 0])

    def bernoulli(self, prob: float) -> bool:
        return self._next([(b, w) for b, w in ((True, prob), (False, 1.0 - prob)) if w > 0])


def enumerate_outcomes(run: Callable[[ScriptedSampler], object]) -> dict:
    """Exact output distribution of ``run`` over every sampler decision path."""
    dist: dict = defaultdict(float)
    stack: list[tuple[list, float]] = [([], 1.0)]
    while stack:
        script, weight = stack.pop()
        try:
            outcome = run(ScriptedSampler(script))
        except NeedChoice as need:
            for choice, w in need.branches:
                stack.append((script + [choice], weight * w))
            continue
        dist[outcome] += weight
    return dict(dist)


class TableSession:
    """Session whose next-token distribution is an arbitrary function of the context."""

    def __init__(self, dist_fn: Callable[[tuple], np.ndarray], limit: int = 64):
        self.dist_fn = dist_fn
        self.ctx: list[int] = []
        self.limit = limit

    @property
    def length(self) -> int:
        return len(self.ctx)

    def feed(self, ids) -> np.ndarray:
        rows = []
        for t in ids:
            self.ctx.append(int(t))
            rows.append(np.log(self.dist_fn(tuple(self.ctx))))
        return np.array(rows)

    def crop(self, length: int) -> None:
        del self.ctx[length:]


def random_table(vocab: int, seed: int) -> Callable[[tuple], np.ndarray]:
    """Deterministic, context-dependent distributions with full support."""
    cache: dict = {}

    def dist(ctx: tuple) -> np.ndarray:
        if ctx not in cache:
            rng = np.random.default_rng([seed, len(ctx), *ctx])
            w = rng.uniform(0.05, 1.0, size=vocab)
            cache[ctx] = w / w.sum()
        return cache[ctx]

    return dist


def sequence_distribution(dist_fn, prompt: tuple, n: int, vocab: int) -> dict[tuple, float]:
    """Exact distribution of ``n`` tokens sampled autoregressively from ``dist_fn``."""
    out = {(): 1.0}
    for _ in range(n):
        nxt = {}
        for seq, w in out.items():
            p = dist_fn(prompt + seq)
            for x in range(vocab):
                nxt[seq + (x,)] = w * float(p[x])
        out = nxt
    return out


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
