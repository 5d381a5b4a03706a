"""AdamW training loops for continuous pretraining and instruction tuning."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import TEXT2TEXT, TEXT_ONLY, Dataset, SftTemplate, Tokenizer, build_sft_example
from .errors import ConfigError, ContractError, DegenerateInputError, FormatError, NonFiniteError, VersionError
from .model import TransformerModel, load_model, save_model
from .tensor import Tensor

METRICS_FILE = "metrics.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 10
    total_steps: int = 200
    batch_size: int = 8
    seq_len: int = 64
    grad_clip: float | None = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    grad_checkpointing: bool = False
    # after a vocabulary extension: train only embedding/output rows >= this id
    new_rows_from: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigError("betas must lie in (0, 1)")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or None")
        if self.new_rows_from is not None and self.new_rows_from < 0:
            raise ConfigError("new_rows_from must be >= 0")

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    tokens_seen: int = 0

    @classmethod
    def fresh(cls, model: TransformerModel) -> OptimizerState:
        params = model.trainable_parameters()
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``0.1 * lr`` at ``total_steps``."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = 0.1 * cfg.lr
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm:
        return grads, total
    factor = np.float32(max_norm / (total + 1e-6))
    return {k: g * factor for k, g in grads.items()}, total


def adamw_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig, step: int
) -> None:
    """One bias-corrected AdamW update with decoupled weight decay on matrices.

    Updates ``params`` and ``state`` in place; ``state.t`` becomes ``step``.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient at step {step} in parameter {name!r}")
    b1, b2 = cfg.betas
    lr = lr_at(step, cfg)
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m.astype(np.float32), v.astype(np.float32)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        data = p.data
        if cfg.weight_decay and data.ndim >= 2:
            data = data * np.float32(1.0 - lr * cfg.weight_decay)
        p.data = (data - np.float32(lr) * update).astype(np.float32)
    state.t = step


# ---------------------------------------------------------------- batching


def _epoch_order(seed: int, epoch: int, n: int, cache: dict) -> np.ndarray:
    if epoch not in cache:
        cache[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
    return cache[epoch]


def batch_indices(step: int, n: int, cfg: TrainConfig, cache: dict | None = None) -> list[int]:
    """Example indices for 0-based ``step`` under epoch-wise seeded shuffling."""
    cache = {} if cache is None else cache
    out = []
    for gi in range(step * cfg.batch_size, (step + 1) * cfg.batch_size):
        epoch, pos = divmod(gi, n)
        out.append(int(_epoch_order(cfg.seed, epoch, n, cache)[pos]))
    return out


def pack_texts(ds: Dataset, tok: Tokenizer, seq_len: int) -> np.ndarray:
    """EOS-joined token stream cut into [n, seq_len + 1] windows (stride seq_len)."""
    if ds.kind != TEXT_ONLY:
        raise FormatError(f"pretraining needs a text_only dataset, got {ds.kind!r}")
    stream: list[int] = []
    for text in ds.texts():
        stream.extend(tok.encode(text))
        stream.append(tok.eos)
    n = (len(stream) - 1) // seq_len
    if n < 1:
        raise DegenerateInputError(f"corpus has {len(stream)} tokens, fewer than one sequence of {seq_len} + 1")
    return np.array([stream[i * seq_len : i * seq_len + seq_len + 1] for i in range(n)], dtype=np.int64)


def pad_examples(examples: list[tuple[list[int], list[bool]]], pad_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to the batch maximum. Returns inputs, targets, loss mask."""
    width = max(len(ids) for ids, _ in examples) - 1
    inputs = np.full((len(examples), width), pad_id, dtype=np.int64)
    targets = np.full((len(examples), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for r, (ids, m) in enumerate(examples):
        n = len(ids) - 1
        inputs[r, :n] = ids[:-1]
        targets[r, :n] = ids[1:]
        mask[r, :n] = m[1:]
    return inputs, targets, mask


# ---------------------------------------------------------------- loop


def _append_metrics(run_dir: Path, record: dict) -> None:
    with open(run_dir / METRICS_FILE, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def run_loop(
    model: TransformerModel,
    loss_at: Callable[[int], tuple[Tensor, int]],
    cfg: TrainConfig,
    opt_state: OptimizerState | None = None,
    run_dir: str | Path | None = None,
    max_steps: int | None = None,
    tokenizer: Tokenizer | None = None,
) -> list[dict]:
    """Generic optimisation loop. ``loss_at(step)`` builds the loss for 0-based ``step``."""
    state = OptimizerState.fresh(model) if opt_state is None else opt_state
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    params = model.trainable_parameters()
    if not params:
        raise ContractError("model has no trainable parameters")
    history: list[dict] = []
    done = 0
    while state.t < cfg.total_steps and (max_steps is None or done < max_steps):
        step = state.t + 1
        model.zero_grad()
        loss, n_tokens = loss_at(state.t)
        loss.backward()
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if cfg.new_rows_from is not None:
            grads = _new_row_grads(grads, cfg.new_rows_from)
            kept = {k: params[k].data[: cfg.new_rows_from].copy() for k in grads}
        if cfg.grad_clip is not None:
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, state, cfg, step)
        if cfg.new_rows_from is not None:
            for k, rows in kept.items():
                params[k].data[: cfg.new_rows_from] = rows
        state.tokens_seen += n_tokens
        record = {"step": step, "loss": float(loss.item()), "lr": lr_at(step, cfg), "tokens_seen": state.tokens_seen}
        history.append(record)
        done += 1
        if run_dir is not None:
            _append_metrics(run_dir, record)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, state, run_dir / "checkpoints" / f"step_{step:06d}", tokenizer)
    model.zero_grad()
    if run_dir is not None and state.t >= cfg.total_steps:
        save_checkpoint(model, state, run_dir / "final", tokenizer)
    return history


ROW_PARAMS = ("tok_emb", "lm_head")


def _new_row_grads(grads: dict[str, np.ndarray], start: int) -> dict[str, np.ndarray]:
    out = {}
    for k in ROW_PARAMS:
        if k in grads:
            g = grads[k].copy()
            g[:start] = 0.0
            out[k] = g
    if not out:
        raise ContractError("new_rows_from needs trainable tok_emb or lm_head")
    return out


def _check_context(model: TransformerModel, cfg: TrainConfig) -> None:
    if cfg.seq_len > model.config.max_context:
        raise ConfigError(f"seq_len {cfg.seq_len} exceeds model context {model.config.max_context}")


def train_pretrain(
    model: TransformerModel,
    ds: Dataset,
    cfg: TrainConfig,
    tok: Tokenizer,
    opt_state: OptimizerState | None = None,
    run_dir: str | Path | None = None,
    max_steps: int | None = None,
) -> tuple[TransformerModel, list[dict]]:
    """Next-token training on packed text (domain or task adaptation)."""
    _check_context(model, cfg)
    chunks = pack_texts(ds, tok, cfg.seq_len)
    order_cache: dict = {}

    def loss_at(step):
        batch = chunks[batch_indices(step, len(chunks), cfg, order_cache)]
        logits = model.forward(batch[:, :-1], checkpointing=cfg.grad_checkpointing)
        return T.cross_entropy(logits, batch[:, 1:]), batch[:, 1:].size

    return model, run_loop(model, loss_at, cfg, opt_state, run_dir, max_steps, tok)


def sft_examples(ds: Dataset, tok: Tokenizer, tmpl: SftTemplate, max_len: int) -> list[tuple[list[int], list[bool]]]:
    if ds.kind != TEXT2TEXT:
        raise FormatError(f"instruction tuning needs a text2text dataset, got {ds.kind!r}")
    if not len(ds):
        raise DegenerateInputError("empty dataset")
    return [build_sft_example(tmpl, inst, tok, max_len) for inst in ds.instances]


def train_sft(
    model: TransformerModel,
    ds: Dataset,
    cfg: TrainConfig,
    tok: Tokenizer,
    tmpl: SftTemplate = SftTemplate(),
    opt_state: OptimizerState | None = None,
    run_dir: str | Path | None = None,
    max_steps: int | None = None,
) -> tuple[TransformerModel, list[dict]]:
    """Instruction tuning with loss restricted to the answer span."""
    _check_context(model, cfg)
    examples = sft_examples(ds, tok, tmpl, cfg.seq_len + 1)
    order_cache: dict = {}

    def loss_at(step):
        batch = [examples[i] for i in batch_indices(step, len(examples), cfg, order_cache)]
        inputs, targets, mask = pad_examples(batch, tok.pad)
        logits = model.forward(inputs, checkpointing=cfg.grad_checkpointing)
        return T.cross_entropy(logits, targets, mask), int(mask.sum())

    return model, run_loop(model, loss_at, cfg, opt_state, run_dir, max_steps, tok)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: TransformerModel, opt_state: OptimizerState, path: str | Path, tokenizer: Tokenizer | None = None) -> Path:
    extras = {}
    for k in opt_state.m:
        extras[f"optim.m.{k}"] = opt_state.m[k]
        extras[f"optim.v.{k}"] = opt_state.v[k]
    root = save_model(model, path, tokenizer, extras)
    state = {"step": opt_state.t, "tokens_seen": opt_state.tokens_seen, "config_hash": model.config.config_hash()}
    (root / "train_state.json").write_text(json.dumps(state))
    return root


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, OptimizerState, Tokenizer | None]:
    root = Path(path)
    model, tok, extras = load_model(root)
    state_file = root / "train_state.json"
    st = json.loads(state_file.read_text()) if state_file.exists() else {"step": 0, "tokens_seen": 0}
    if "config_hash" in st and st["config_hash"] != model.config.config_hash():
        raise VersionError("optimizer state was written for a different model config")
    opt = OptimizerState(t=int(st["step"]), tokens_seen=int(st["tokens_seen"]))
    for k, arr in extras.items():
        kind, name = k.split(".", 2)[1:]
        (opt.m if kind == "m" else opt.v)[name] = arr
    if not opt.m:
        opt = OptimizerState.fresh(model)
        opt.t, opt.tokens_seen = int(st["step"]), int(st["tokens_seen"])
    return model, opt, tok
