"""Reward modelling and reward-ranked finetuning (RAFT).

RAFT repeats: sample ``b`` completions per prompt, score them, keep the
top ``ceil(k*b)`` per prompt, and run one supervised pass on the kept
(prompt, completion) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .data import PREFERENCE, SftTemplate, Tokenizer, load_dataset, text2text
from .errors import ConfigError, ContractError, DegenerateGenerationError, DegenerateInputError, LengthError
from .infer import GenParams, generate
from .model import ModelConfig, TransformerModel
from .tensor import Tensor
from .train import OptimizerState, TrainConfig, batch_indices, run_loop, train_sft


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ContractError("chosen and rejected responses are identical")


def load_preferences(directory: str | Path) -> list[PreferencePair]:
    """Read a ``{"type": "preference", ...}`` dataset directory."""
    ds = load_dataset(directory, allowed_types=(PREFERENCE,))
    return [PreferencePair(i["prompt"], i["chosen"], i["rejected"]) for i in ds.instances]


class RewardModel:
    """Transformer backbone plus a linear head read at the final non-pad position."""

    def __init__(self, backbone: TransformerModel):
        if not backbone.config.reward_head:
            raise ConfigError("backbone has no reward head; use RewardModel.from_backbone")
        self.backbone = backbone

    @classmethod
    def from_backbone(cls, model: TransformerModel) -> RewardModel:
        """Copy ``model`` and add a zero-initialised scalar head."""
        base = model.copy()
        cfg = ModelConfig(**{**base.config.to_dict(), "reward_head": True})
        params = dict(base.params)
        params["reward_head.weight"] = Tensor(np.zeros(cfg.d_model, np.float32), requires_grad=True, name="reward_head.weight")
        params["reward_head.bias"] = Tensor(np.zeros(1, np.float32), requires_grad=True, name="reward_head.bias")
        out = TransformerModel(cfg, params)
        out.lora, out.lora_config = base.lora, base.lora_config
        return cls(out)

    def encode(self, tok: Tokenizer, text: str) -> list[int]:
        ids = tok.encode(text) + [tok.eos]
        limit = self.backbone.config.max_context
        if len(ids) > limit:
            raise LengthError(f"text of {len(ids)} tokens exceeds reward-model context {limit}")
        return ids

    def scores_tensor(self, batch: Sequence[Sequence[int]], pad_id: int) -> Tensor:
        width = max(len(s) for s in batch)
        ids = np.full((len(batch), width), pad_id, dtype=np.int64)
        for r, s in enumerate(batch):
            ids[r, : len(s)] = s
        last = np.array([len(s) - 1 for s in batch])
        h = self.backbone.hidden(ids)[np.arange(len(batch)), last]
        w = self.backbone.params["reward_head.weight"]
        b = self.backbone.params["reward_head.bias"]
        return (h @ w.reshape(-1, 1) + b).reshape(len(batch))

    def score_batch(self, tok: Tokenizer, texts: Sequence[str]) -> np.ndarray:
        with T.no_grad():
            return self.scores_tensor([self.encode(tok, t) for t in texts], tok.pad).data.astype(np.float64)


def reward_score(rm: RewardModel, tok: Tokenizer, text: str) -> float:
    return float(rm.score_batch(tok, [text])[0])


def pairwise_loss(r_chosen, r_rejected) -> np.ndarray:
    """Per-pair -log sigmoid(r_chosen - r_rejected)."""
    return np.logaddexp(0.0, -(np.asarray(r_chosen, dtype=np.float64) - np.asarray(r_rejected, dtype=np.float64)))


def pairwise_accuracy(rm: RewardModel, tok: Tokenizer, pairs: Sequence[PreferencePair]) -> float:
    chosen = rm.score_batch(tok, [p.prompt + p.chosen for p in pairs])
    rejected = rm.score_batch(tok, [p.prompt + p.rejected for p in pairs])
    return float(np.mean(chosen > rejected))


def train_reward(
    rm: RewardModel,
    tok: Tokenizer,
    pairs: Sequence[PreferencePair],
    cfg: TrainConfig,
    opt_state: OptimizerState | None = None,
    run_dir: str | Path | None = None,
) -> tuple[RewardModel, list[dict]]:
    """Minimise the Bradley-Terry pairwise loss with AdamW."""
    if not pairs:
        raise DegenerateInputError("no preference pairs")
    encoded = [(rm.encode(tok, p.prompt + p.chosen), rm.encode(tok, p.prompt + p.rejected)) for p in pairs]
    order_cache: dict = {}
    accuracy: list[float] = []

    def loss_at(step):
        batch = [encoded[i] for i in batch_indices(step, len(encoded), cfg, order_cache)]
        n = len(batch)
        scores = rm.scores_tensor([c for c, _ in batch] + [r for _, r in batch], tok.pad)
        margin = scores[:n] - scores[n:]
        accuracy.append(float(np.mean(margin.data > 0)))
        return T.mean(T.softplus(-margin)), sum(len(c) + len(r) for c, r in batch)

    history = run_loop(rm.backbone, loss_at, cfg, opt_state, run_dir)
    for rec, acc in zip(history, accuracy):
        rec["accuracy"] = acc
    return rm, history


# ---------------------------------------------------------------- RAFT

RewardFn = Callable[[str, str], float]


@dataclass(frozen=True)
class RaftConfig:
    b: int = 8
    accept_fraction: float = 0.125
    sample_temperature: float = 1.0
    iterations: int = 1
    prompts_per_iter: int = 0
    max_new_tokens: int = 32
    sft_epochs: int = 1
    seed: int = 0
    sft_cfg: TrainConfig = field(default_factory=lambda: TrainConfig(warmup_steps=0, total_steps=1))

    def __post_init__(self):
        if self.b < 2:
            raise ConfigError("b must be >= 2")
        if not 0 < self.accept_fraction <= 1:
            raise ConfigError("accept_fraction must lie in (0, 1]")
        if self.sample_temperature <= 0:
            raise ConfigError("sample_temperature must be positive")
        if self.iterations < 0 or self.prompts_per_iter < 0 or self.sft_epochs < 1:
            raise ConfigError("iterations and prompts_per_iter must be >= 0, sft_epochs >= 1")

    @property
    def keep(self) -> int:
        return keep_count(self.accept_fraction, self.b)


def keep_count(k: float, b: int) -> int:
    # rounding guards against k*b landing a hair above an integer
    return max(1, math.ceil(round(k * b, 9)))


def select_indices(rewards: Sequence[float], k: float) -> list[int]:
    """Indices of the top ``ceil(k*b)`` rewards; ties go to the earlier sample."""
    n = keep_count(k, len(rewards))
    ranked = sorted(range(len(rewards)), key=lambda i: (-rewards[i], i))
    return sorted(ranked[:n])


def raft_select(candidates: Sequence[tuple[str, Sequence[tuple[str, float]]]], k: float) -> list[tuple[str, str]]:
    """Keep the best-scored completions of each prompt as (prompt, completion) pairs."""
    out = []
    for prompt, scored in candidates:
        for i in select_indices([r for _, r in scored], k):
            out.append((prompt, scored[i][0]))
    return out


def check_selection_dominance(rewards: Sequence[float], selected: Sequence[int]) -> None:
    """Exact check that the kept rewards dominate; raises AssertionError otherwise."""
    exact = [Fraction(r) for r in rewards]
    kept = [exact[i] for i in selected]
    dropped = [exact[i] for i in range(len(exact)) if i not in set(selected)]
    if dropped and min(kept) < max(dropped):
        raise AssertionError("a rejected sample outscored a selected one")
    if sum(kept) / len(kept) < sum(exact) / len(exact):
        raise AssertionError("selected mean reward fell below the sample mean")


def _as_reward_fn(reward, tok: Tokenizer) -> RewardFn:
    if isinstance(reward, RewardModel):
        return lambda prompt, completion: reward_score(reward, tok, prompt + completion)
    return reward


def sample_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def raft_train(
    policy: TransformerModel,
    reward: Union[RewardModel, RewardFn],
    tok: Tokenizer,
    prompts: Sequence[str],
    cfg: RaftConfig,
    tmpl: SftTemplate = SftTemplate(),
    on_iteration: Callable[[dict], None] | None = None,
) -> tuple[TransformerModel, list[dict]]:
    """Reward-ranked finetuning of ``policy`` in place."""
    if not prompts:
        raise DegenerateInputError("no prompts")
    score = _as_reward_fn(reward, tok)
    metrics: list[dict] = []
    seen: set[tuple[str, str]] = set()
    for it in range(cfg.iterations):
        idx = list(range(len(prompts)))
        if cfg.prompts_per_iter and cfg.prompts_per_iter < len(prompts):
            idx = sorted(np.random.default_rng([cfg.seed, it]).permutation(len(prompts))[: cfg.prompts_per_iter].tolist())
        all_rewards, sel_rewards, pairs = [], [], []
        n_empty = n_nonempty = 0
        for pi in idx:
            prompt = prompts[pi]
            rendered = tmpl.render_prompt(prompt)
            texts = []
            for j in range(cfg.b):
                params = GenParams(cfg.max_new_tokens, cfg.sample_temperature, seed=sample_seed(cfg.seed, it, pi, j))
                texts.append(generate(policy, tok, rendered, params).text)
            rewards = [float(score(prompt, t)) for t in texts]
            chosen = select_indices(rewards, cfg.accept_fraction)
            check_selection_dominance(rewards, chosen)
            n_nonempty += sum(1 for t in texts if t)
            all_rewards.extend(rewards)
            for i in chosen:
                sel_rewards.append(rewards[i])
                if texts[i]:
                    pairs.append((prompt, texts[i]))
                else:
                    n_empty += 1
        if n_nonempty == 0:
            raise DegenerateGenerationError(f"iteration {it}: every sampled completion was empty")
        dup = sum(1 for p in pairs if p in seen)
        seen.update(pairs)
        record = {
            "iteration": it,
            "mean_reward": float(np.mean(all_rewards)),
            "mean_selected_reward": float(np.mean(sel_rewards)),
            "n_selected": len(pairs),
            "n_empty_skipped": n_empty,
            "dedup_rate": dup / len(pairs) if pairs else 0.0,
        }
        if pairs:
            ds = text2text(pairs)
            sft = cfg.sft_cfg
            steps = math.ceil(len(pairs) / sft.batch_size) * cfg.sft_epochs
            sft = sft.replace(total_steps=steps, warmup_steps=min(sft.warmup_steps, steps), seed=sample_seed(cfg.seed, it))
            _, hist = train_sft(policy, ds, sft, tok, tmpl)
            record["sft_loss"] = hist[-1]["loss"]
        metrics.append(record)
        if on_iteration is not None:
            on_iteration(record)
    return policy, metrics
