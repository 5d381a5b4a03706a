"""Tiny pre-norm decoder-only transformer.

Rotary positions with linear position interpolation, a per-sequence KV
cache, LoRA adapters, block-level gradient checkpointing, embedding resize
and an optional scalar reward head.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .data import Tokenizer
from .errors import ConfigError, FormatError, LengthError, StateError, TokenIndexError, VersionError
from .tensor import Tensor

CHECKPOINT_FORMAT = "deskflow-checkpoint"
CHECKPOINT_VERSION = 1
LORA_TARGETS = ("wq", "wk", "wv", "wo", "w_in", "w_out")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab: int = 259
    context: int = 64
    rope_base: float = 10000.0
    pi_scale: float = 1.0
    reward_head: bool = False

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab", "context"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.pi_scale < 1:
            raise ConfigError("pi_scale must be >= 1")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_context(self) -> int:
        """Usable context s·L."""
        return int(math.floor(self.pi_scale * self.context))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("wq", "wv")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


# ---------------------------------------------------------------- rotary


def rope_tables(positions, head_dim: int, base: float = 10000.0, scale: float = 1.0, dtype=np.float32):
    """cos/sin tables of shape [len(positions), head_dim/2] at effective positions m/s."""
    if head_dim % 2:
        raise ConfigError("head dimension must be even for rotary embeddings")
    pos = np.asarray(positions, dtype=np.float64) / scale
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(pos, inv_freq)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate dimension pairs (2i, 2i+1) of ``x[..., T, head_dim]``."""
    xd = x.data
    x0, x1 = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def backward(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return T._result(out, (x,), backward, "rope")


def apply_rope(q: Tensor, k: Tensor, positions, base: float = 10000.0, scale: float = 1.0) -> tuple[Tensor, Tensor]:
    """Rotate queries and keys at positions ``m`` by angle ``(m/scale)·base^(-2i/head_dim)``."""
    if scale < 1:
        raise ConfigError("interpolation scale must be >= 1")
    if np.any(np.asarray(positions) < 0):
        raise ConfigError("positions must be non-negative")
    cos, sin = rope_tables(positions, q.shape[-1], base, scale, q.data.dtype)
    return rope_rotate(q, cos, sin), rope_rotate(k, cos, sin)


# ---------------------------------------------------------------- cache


class KVCache:
    """Per-layer keys/values for the positions consumed so far."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers
        self.length = 0

    def crop(self, length: int) -> None:
        """Drop positions >= ``length`` (used to roll back rejected draft tokens)."""
        if length > self.length or length < 0:
            raise StateError(f"cannot crop cache of length {self.length} to {length}")
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            if k is not None:
                self.keys[i] = k[..., :length, :]
                self.values[i] = v[..., :length, :]
        self.length = length

    def copy(self) -> KVCache:
        other = KVCache(len(self.keys))
        other.keys, other.values, other.length = list(self.keys), list(self.values), self.length
        return other


# ---------------------------------------------------------------- model


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.lora: dict[str, tuple[Tensor, Tensor]] = {}
        self.lora_config: LoraConfig | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> TransformerModel:
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.d_ff
        resid_std = 0.02 / math.sqrt(2 * config.n_layers)

        def normal(shape, std=0.02):
            return rng.normal(0.0, std, size=shape).astype(np.float32)

        p: dict[str, np.ndarray] = {"tok_emb": normal((config.vocab, d))}
        for i in range(config.n_layers):
            b = f"blocks.{i}."
            p[b + "attn_norm"] = np.ones(d, np.float32)
            p[b + "wq"] = normal((d, d))
            p[b + "wk"] = normal((d, d))
            p[b + "wv"] = normal((d, d))
            p[b + "wo"] = normal((d, d), resid_std)
            p[b + "mlp_norm"] = np.ones(d, np.float32)
            p[b + "w_in"] = normal((f, d))
            p[b + "w_out"] = normal((d, f), resid_std)
        p["final_norm"] = np.ones(d, np.float32)
        p["lm_head"] = normal((config.vocab, d))
        if config.reward_head:
            p["reward_head.weight"] = np.zeros(d, np.float32)
            p["reward_head.bias"] = np.zeros(1, np.float32)
        return cls(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()})

    # parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, (a, b) in self.lora.items():
            out[name + ".lora_A"] = a
            out[name + ".lora_B"] = b
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def copy(self) -> TransformerModel:
        clone = TransformerModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()},
        )
        clone.lora = {
            k: (Tensor(a.data.copy(), requires_grad=a.requires_grad), Tensor(b.data.copy(), requires_grad=b.requires_grad))
            for k, (a, b) in self.lora.items()
        }
        clone.lora_config = self.lora_config
        return clone

    def with_config(self, **changes) -> TransformerModel:
        """Same weights (shared, not copied) under a modified config, e.g. another ``pi_scale``."""
        cfg = ModelConfig(**{**self.config.to_dict(), **changes})
        other = TransformerModel(cfg, self.params)
        other.lora, other.lora_config = self.lora, self.lora_config
        return other

    # forward

    def _linear(self, x: Tensor, name: str) -> Tensor:
        out = x @ self.params[name].swapaxes(0, 1)
        adapter = self.lora.get(name)
        if adapter is not None:
            a, b = adapter
            delta = (x @ a.swapaxes(0, 1)) @ b.swapaxes(0, 1)
            out = out + T.scale(delta, self.lora_config.scaling)
        return out

    def _block(self, i: int, x: Tensor, cos, sin, start: int, cache: KVCache | None) -> Tensor:
        cfg = self.config
        pre = f"blocks.{i}."
        B, L, _ = x.shape
        H, hd = cfg.n_heads, cfg.head_dim

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, hd).transpose(0, 2, 1, 3)

        h = T.rmsnorm(x, self.params[pre + "attn_norm"])
        q = rope_rotate(heads(self._linear(h, pre + "wq")), cos, sin)
        k = rope_rotate(heads(self._linear(h, pre + "wk")), cos, sin)
        v = heads(self._linear(h, pre + "wv"))
        if cache is not None:
            if cache.keys[i] is not None:
                k = T.concat([Tensor(cache.keys[i]), k], axis=2)
                v = T.concat([Tensor(cache.values[i]), v], axis=2)
            cache.keys[i], cache.values[i] = k.data, v.data
        S = k.shape[2]
        scores = T.scale(q @ k.swapaxes(-1, -2), 1.0 / math.sqrt(hd))
        mask = (np.arange(S)[None, :] <= (start + np.arange(L))[:, None])
        att = T.softmax(scores, mask) @ v
        att = att.transpose(0, 2, 1, 3).reshape(B, L, cfg.d_model)
        x = x + self._linear(att, pre + "wo")
        h = T.rmsnorm(x, self.params[pre + "mlp_norm"])
        return x + self._linear(T.gelu(self._linear(h, pre + "w_in")), pre + "w_out")

    def hidden(self, tokens, cache: KVCache | None = None, checkpointing: bool = False) -> Tensor:
        """Final-normed hidden states, shape [B, T, d_model] (or [T, d_model] for 1-d input)."""
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        cfg = self.config
        start = cache.length if cache is not None else 0
        L = ids.shape[1]
        if start + L > cfg.max_context:
            raise LengthError(
                f"sequence of {start + L} positions exceeds context s*L = {cfg.pi_scale:g}*{cfg.context} = {cfg.max_context}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
            raise TokenIndexError(f"token id out of range [0, {cfg.vocab})")
        x = T.embedding(self.params["tok_emb"], ids)
        cos, sin = rope_tables(np.arange(start, start + L), cfg.head_dim, cfg.rope_base, cfg.pi_scale, x.data.dtype)
        if checkpointing and cache is None and T.is_grad_enabled():
            group = max(1, math.ceil(math.sqrt(cfg.n_layers)))
            for lo in range(0, cfg.n_layers, group):
                layers = range(lo, min(lo + group, cfg.n_layers))

                def segment(h, layers=layers):
                    for i in layers:
                        h = self._block(i, h, cos, sin, 0, None)
                    return h

                x = T.checkpoint(segment, x)
        else:
            for i in range(cfg.n_layers):
                x = self._block(i, x, cos, sin, start, cache)
        if cache is not None:
            cache.length = start + L
        x = T.rmsnorm(x, self.params["final_norm"])
        return x[0] if squeeze else x

    def forward(self, tokens, cache: KVCache | None = None, checkpointing: bool = False) -> Tensor:
        """Logits of shape [T, V] (or [B, T, V])."""
        h = self.hidden(tokens, cache, checkpointing)
        return h @ self.params["lm_head"].swapaxes(0, 1)

    __call__ = forward

    def new_cache(self) -> KVCache:
        return KVCache(self.config.n_layers)


# ---------------------------------------------------------------- LoRA


def attach_lora(
    model: TransformerModel,
    rank: int = 8,
    alpha: float = 16.0,
    targets: Iterable[str] = ("wq", "wv"),
    seed: int = 0,
) -> TransformerModel:
    """Freeze the base weights and add trainable adapters to the target projections."""
    targets = tuple(targets)
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    unknown = [t for t in targets if t not in LORA_TARGETS]
    if unknown or not targets:
        raise ConfigError(f"unknown LoRA targets {unknown}; choose from {list(LORA_TARGETS)}")
    if model.lora:
        raise StateError("model already carries LoRA adapters")
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    for i in range(model.config.n_layers):
        for t in targets:
            name = f"blocks.{i}.{t}"
            d_out, d_in = model.params[name].shape
            a = Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros((d_out, rank), np.float32), requires_grad=True)
            model.lora[name] = (a, b)
    model.lora_config = LoraConfig(rank, float(alpha), targets)
    return model


def merge_lora(model: TransformerModel) -> TransformerModel:
    """Fold every adapter into its base weight and drop the adapters."""
    if not model.lora:
        raise StateError("model has no LoRA adapters to merge")
    s = model.lora_config.scaling
    for name, (a, b) in model.lora.items():
        w = model.params[name]
        w.data = (w.data + np.float32(s) * (b.data @ a.data)).astype(np.float32)
    model.lora = {}
    model.lora_config = None
    for p in model.params.values():
        p.requires_grad = True
    return model


def lora_parameter_count(model: TransformerModel) -> int:
    return sum(a.data.size + b.data.size for a, b in model.lora.values())


# ---------------------------------------------------------------- vocabulary


def resize_embeddings(model: TransformerModel, new_vocab: int) -> TransformerModel:
    """Grow the embedding and output matrices; new rows are the mean of the old ones."""
    old = model.config.vocab
    if new_vocab < old:
        raise ConfigError(f"cannot shrink vocabulary from {old} to {new_vocab}")
    if new_vocab == old:
        return model
    for name in ("tok_emb", "lm_head"):
        p = model.params[name]
        mean_row = p.data.mean(axis=0, keepdims=True)
        grown = np.concatenate([p.data, np.repeat(mean_row, new_vocab - old, axis=0)], axis=0)
        model.params[name] = Tensor(grown, requires_grad=p.requires_grad, name=name)
    model.config = ModelConfig(**{**model.config.to_dict(), "vocab": new_vocab})
    return model


# ---------------------------------------------------------------- persistence


def save_model(
    model: TransformerModel,
    directory: str | Path,
    tokenizer: Tokenizer | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> Path:
    """Write ``config.json``, ``manifest.json`` and ``weights.bin`` (little-endian f32)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.data for k, v in model.named_parameters().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    entries, offset = [], 0
    with open(root / "weights.bin", "wb") as fh:
        for name, arr in tensors.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(blob)
            entries.append(
                {"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset, "length": len(blob)}
            )
            offset += len(blob)
    (root / "manifest.json").write_text(json.dumps({"tensors": entries}, indent=1))
    lc = model.lora_config
    cfg = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "lora": None if lc is None else {"rank": lc.rank, "alpha": lc.alpha, "targets": list(lc.targets)},
        "trainable": sorted(model.trainable_parameters()),
        "extra": list(extra_tensors or {}),
        "tokenizer": None,
    }
    if tokenizer is not None:
        tokenizer.save(root / "tokenizer.json")
        cfg["tokenizer"] = "tokenizer.json"
    (root / "config.json").write_text(json.dumps(cfg, indent=2))
    return root


def load_model(directory: str | Path) -> tuple[TransformerModel, Tokenizer | None, dict[str, np.ndarray]]:
    """Inverse of :func:`save_model`. Returns (model, tokenizer, extra tensors)."""
    root = Path(directory)
    try:
        cfg = json.loads((root / "config.json").read_text())
        manifest = json.loads((root / "manifest.json").read_text())
        blob = (root / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"incomplete checkpoint in {str(root)!r}: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint metadata in {str(root)!r}: {exc.msg}") from exc
    if cfg.get("format") != CHECKPOINT_FORMAT or cfg.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint format {cfg.get('format')!r} v{cfg.get('version')!r}")
    try:
        mcfg = ModelConfig(**cfg["model"])
    except TypeError as exc:
        raise VersionError(f"checkpoint model config does not match this version: {exc}") from exc
    if mcfg.config_hash() != cfg.get("config_hash"):
        raise VersionError(f"config hash mismatch: file says {cfg.get('config_hash')}, config hashes to {mcfg.config_hash()}")
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "float32" or e["offset"] + e["length"] > len(blob):
            raise FormatError(f"manifest entry {e['name']!r} does not fit weights.bin")
        arr = np.frombuffer(blob, dtype="<f4", count=e["length"] // 4, offset=e["offset"])
        arrays[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
    trainable = set(cfg.get("trainable", []))
    extra = set(cfg.get("extra", []))
    base_names = [k for k in arrays if k not in extra and not k.endswith((".lora_A", ".lora_B"))]
    params = {k: Tensor(arrays[k], requires_grad=k in trainable, name=k) for k in base_names}
    model = TransformerModel(mcfg, params)
    if cfg.get("lora"):
        lc = cfg["lora"]
        model.lora_config = LoraConfig(int(lc["rank"]), float(lc["alpha"]), tuple(lc["targets"]))
        for k in arrays:
            if k.endswith(".lora_A") and k not in extra:
                name = k[: -len(".lora_A")]
                model.lora[name] = (
                    Tensor(arrays[k], requires_grad=k in trainable),
                    Tensor(arrays[name + ".lora_B"], requires_grad=name + ".lora_B" in trainable),
                )
    extras = {k: v for k, v in arrays.items() if k in extra}
    tok = Tokenizer.load(root / cfg["tokenizer"]) if cfg.get("tokenizer") else None
    return model, tok, extras
