"""``deskflow`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data-format error,
3 numeric failure.  Failures print a single ``error[<kind>]: ...`` line on
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

from . import __version__
from .align import RaftConfig, RewardModel, load_preferences, pairwise_accuracy, raft_train, train_reward
from .config import SECTIONS, RunConfig, flag_keys, parse_value, resolve
from .data import TEXT2TEXT, SftTemplate, Tokenizer, extend_vocabulary, load_dataset, train_bpe
from .errors import ConfigError, DeskflowError, FormatError, NonFiniteError, VersionError
from .evaluation import EvalReport, evaluate, render_table
from .infer import GenParams, SpecConfig, generate, speculative_decode
from .model import ModelConfig, TransformerModel, attach_lora, load_model, merge_lora, resize_embeddings, save_model
from .plots import plot_history, plot_raft, plot_reports
from .train import METRICS_FILE, OptimizerState, TrainConfig, load_checkpoint, save_checkpoint, train_pretrain, train_sft

RUN_CONFIG = "run_config.json"

ALIASES = {
    "data.path": ["--data"],
    "data.eval_path": ["--eval-data"],
    "tokenizer.path": ["--tokenizer"],
    "tokenizer.vocab_size": ["--vocab-size"],
    "paths.checkpoint": ["--checkpoint"],
    "paths.draft": ["--draft"],
    "paths.reward_model": ["--reward-model"],
    "paths.out": ["--out"],
    "paths.run_dir": ["--run-dir"],
    "generation.prompt": ["--prompt"],
    "generation.gamma": ["--gamma"],
    "generation.temperature": ["--temperature"],
    "generation.max_new_tokens": ["--max-new-tokens"],
    "generation.top_k": ["--top-k"],
    "generation.top_p": ["--top-p"],
    "generation.seed": ["--seed"],
    "train.total_steps": ["--steps"],
    "train.lr": ["--lr"],
}


class UsageError(DeskflowError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _string_typed(section: str, key: str) -> bool:
    f = next(f for f in dataclasses.fields(SECTIONS[section]) if f.name == key)
    return str(f.type).startswith("str")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--resume", metavar="RUN_DIR", help="continue a previous run from its latest checkpoint")
    for section, key in flag_keys():
        dotted = f"{section}.{key}"
        p.add_argument(f"--{dotted}", *ALIASES.get(dotted, []), dest=dotted, default=argparse.SUPPRESS, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deskflow", description="Desk-scale finetuning pipeline for small GPT models.")
    parser.add_argument("--version", action="version", version=f"deskflow {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "init-model": "create a randomly initialised checkpoint",
        "train-tokenizer": "learn byte-pair merges from a text_only dataset",
        "pretrain": "continuous pretraining (domain / task adaptation)",
        "finetune": "instruction tuning on a text2text dataset",
        "reward": "train a reward model on preference pairs",
        "raft": "reward-ranked finetuning",
        "infer": "single-shot generation (streaming or speculative)",
        "chat": "interactive streaming chat in the terminal",
        "eval": "evaluation report (JSON, text table, figure)",
        "merge-lora": "fold LoRA adapters into the base weights",
        "extend-vocab": "append tokens to the tokenizer and embeddings",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _add_config_flags(p)
        if name == "infer":
            p.add_argument("--stream", action="store_true", help="print tokens as they are generated")
        if name == "extend-vocab":
            p.add_argument("--tokens", nargs="+", required=True, help="tokens to append")
    return parser


# ---------------------------------------------------------------- helpers


def _overrides(ns: argparse.Namespace) -> dict:
    out = {}
    for section, key in flag_keys():
        dotted = f"{section}.{key}"
        if hasattr(ns, dotted):
            raw = getattr(ns, dotted)
            out[dotted] = raw if _string_typed(section, key) and raw != "null" else parse_value(raw)
    return out


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        lr=t.lr, betas=tuple(t.betas), eps=t.eps, weight_decay=t.weight_decay, warmup_steps=t.warmup_steps,
        total_steps=t.total_steps, batch_size=t.batch_size, seq_len=t.seq_len, grad_clip=t.grad_clip,
        seed=t.seed, checkpoint_every=t.checkpoint_every, grad_checkpointing=t.grad_checkpointing,
        new_rows_from=t.new_rows_from,
    )


def _template(cfg: RunConfig) -> SftTemplate:
    d = cfg.data
    return SftTemplate(d.template_prefix, d.template_infix, d.template_suffix, d.loss_on_input)


def _gen_params(cfg: RunConfig) -> GenParams:
    g = cfg.generation
    return GenParams(g.max_new_tokens, g.temperature, g.top_k, g.top_p, None, g.seed)


def _require(value, what: str):
    if value in (None, ""):
        raise ConfigError(f"missing {what}")
    return value


def _tokenizer(cfg: RunConfig) -> Tokenizer:
    return Tokenizer.load(cfg.tokenizer.path) if cfg.tokenizer.path else Tokenizer.byte_level()


def _new_model(cfg: RunConfig, tok: Tokenizer) -> TransformerModel:
    m = cfg.model
    mc = ModelConfig(m.n_layers, m.n_heads, m.d_model, m.d_ff, len(tok), m.context, m.rope_base, m.pi_scale)
    return TransformerModel.init(mc, seed=m.init_seed)


def _load(path: str, cfg: RunConfig) -> tuple[TransformerModel, Tokenizer]:
    model, tok, _ = load_model(path)
    return model, tok if tok is not None else _tokenizer(cfg)


def _policy(cfg: RunConfig) -> tuple[TransformerModel, Tokenizer]:
    if cfg.paths.checkpoint:
        return _load(cfg.paths.checkpoint, cfg)
    tok = _tokenizer(cfg)
    return _new_model(cfg, tok), tok


def _run_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.paths.run_dir:
        root = Path(cfg.paths.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        root = Path(cfg.paths.runs) / f"{stamp}-{command}-{cfg.digest()}"
    root.mkdir(parents=True, exist_ok=True)
    (root / RUN_CONFIG).write_text(json.dumps({"command": command, "config": cfg.to_dict()}, indent=2))
    return root


def _latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((run_dir / "checkpoints").glob("step_*")) if (run_dir / "checkpoints").is_dir() else []
    return ckpts[-1] if ckpts else None


def _trim_metrics(run_dir: Path, last_step: int) -> None:
    path = run_dir / METRICS_FILE
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= last_step]
    path.write_text("".join(line + "\n" for line in keep))


def _read_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / METRICS_FILE
    return [json.loads(line) for line in path.read_text().splitlines() if line] if path.exists() else []


# ---------------------------------------------------------------- commands


def cmd_init_model(cfg: RunConfig, ns) -> int:
    tok = _tokenizer(cfg)
    out = Path(cfg.paths.out) if cfg.paths.out else _run_dir(cfg, "init-model") / "model"
    save_model(_new_model(cfg, tok), out, tok)
    print(out)
    return 0


def cmd_train_tokenizer(cfg: RunConfig, ns) -> int:
    ds = load_dataset(_require(cfg.data.path, "data.path"))
    tok = train_bpe(ds, cfg.tokenizer.vocab_size)
    out = Path(cfg.paths.out) if cfg.paths.out else _run_dir(cfg, "train-tokenizer") / "tokenizer.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(out)
    print(out)
    return 0


def _training_run(cfg: RunConfig, ns, command: str) -> int:
    tcfg = _train_config(cfg)
    if ns.resume:
        run_dir = Path(ns.resume)
        ckpt = _latest_checkpoint(run_dir)
    else:
        run_dir, ckpt = _run_dir(cfg, command), None
    if ckpt is not None:
        model, opt, tok = load_checkpoint(ckpt)
        tok = tok or _tokenizer(cfg)
        _trim_metrics(run_dir, opt.t)
    else:
        model, tok = _policy(cfg)
        if cfg.train.lora_rank > 0 and not model.lora:
            attach_lora(model, cfg.train.lora_rank, cfg.train.lora_alpha, cfg.train.lora_targets, seed=cfg.train.seed)
        opt = OptimizerState.fresh(model)
        if ns.resume:
            _trim_metrics(run_dir, 0)
    ds = load_dataset(_require(cfg.data.path, "data.path"))
    if command == "pretrain":
        train_pretrain(model, ds, tcfg, tok, opt, run_dir)
    else:
        train_sft(model, ds, tcfg, tok, _template(cfg), opt, run_dir)
    plot_history(_read_metrics(run_dir), run_dir / "loss.png", command)
    print(run_dir)
    return 0


def cmd_reward(cfg: RunConfig, ns) -> int:
    tcfg = _train_config(cfg)
    pairs = load_preferences(_require(cfg.data.path, "data.path"))
    run_dir = Path(ns.resume) if ns.resume else _run_dir(cfg, "reward")
    ckpt = _latest_checkpoint(run_dir) if ns.resume else None
    if ckpt is not None:
        backbone, opt, tok = load_checkpoint(ckpt)
        rm, tok = RewardModel(backbone), tok or _tokenizer(cfg)
        _trim_metrics(run_dir, opt.t)
    else:
        base, tok = _policy(cfg)
        rm = RewardModel.from_backbone(base)
        opt = OptimizerState.fresh(rm.backbone)
    train_reward(rm, tok, pairs, tcfg, opt, run_dir)
    save_checkpoint(rm.backbone, opt, run_dir / "final", tok)
    acc = pairwise_accuracy(rm, tok, pairs)
    (run_dir / "reward_summary.json").write_text(json.dumps({"pairwise_accuracy": acc, "n_pairs": len(pairs)}))
    plot_history(_read_metrics(run_dir), run_dir / "loss.png", "reward model")
    print(run_dir)
    print(f"pairwise_accuracy={acc:.4f}", file=sys.stderr)
    return 0


def _reward_fn(cfg: RunConfig, tok: Tokenizer):
    choice = cfg.raft.reward
    if choice.startswith("count:"):
        needle = choice[len("count:") :]
        if not needle:
            raise ConfigError("raft.reward count: needs a substring")
        return lambda prompt, completion: float(completion.count(needle))
    if choice != "model":
        raise ConfigError(f"raft.reward must be 'model' or 'count:<text>', got {choice!r}")
    backbone, _, _ = load_model(_require(cfg.paths.reward_model, "paths.reward_model"))
    return RewardModel(backbone)


def _prompts(cfg: RunConfig) -> list[str]:
    ds = load_dataset(_require(cfg.data.path, "data.path"))
    return [i["input"] for i in ds.instances] if ds.kind == TEXT2TEXT else ds.texts()


def cmd_raft(cfg: RunConfig, ns) -> int:
    policy, tok = _policy(cfg)
    r = cfg.raft
    rcfg = RaftConfig(
        r.b, r.accept_fraction, r.sample_temperature, r.iterations, r.prompts_per_iter, r.max_new_tokens,
        r.sft_epochs, r.seed, _train_config(cfg),
    )
    run_dir = _run_dir(cfg, "raft")
    log = open(run_dir / "raft_metrics.jsonl", "w")
    with log:
        _, metrics = raft_train(
            policy, _reward_fn(cfg, tok), tok, _prompts(cfg), rcfg, _template(cfg),
            on_iteration=lambda rec: (log.write(json.dumps(rec) + "\n"), log.flush()),
        )
    save_model(policy, run_dir / "final", tok)
    if metrics:
        plot_raft(metrics, run_dir / "raft.png")
    print(run_dir)
    return 0


def cmd_infer(cfg: RunConfig, ns) -> int:
    model, tok = _policy(cfg)
    p = _gen_params(cfg)
    prompt = cfg.generation.prompt
    if cfg.generation.use_template:
        prompt = _template(cfg).render_prompt(prompt)
    if cfg.paths.draft:
        draft, _ = _load(cfg.paths.draft, cfg)
        text, stats = speculative_decode(SpecConfig(model, draft, cfg.generation.gamma), tok, prompt, p)
        sys.stdout.write(text + "\n")
        print(json.dumps(stats.as_dict()), file=sys.stderr)
        return 0
    if ns.stream:
        def sink(piece):
            sys.stdout.write(piece)
            sys.stdout.flush()

        generate(model, tok, prompt, p, sink)
        sys.stdout.write("\n")
        return 0
    sys.stdout.write(generate(model, tok, prompt, p).text + "\n")
    return 0


def cmd_chat(cfg: RunConfig, ns) -> int:
    model, tok = _policy(cfg)
    tmpl = _template(cfg)
    p = _gen_params(cfg)
    transcript = ""
    limit = model.config.max_context - p.max_new_tokens
    if limit < 1:
        raise ConfigError("generation.max_new_tokens leaves no room for the transcript")
    turn = 0
    for line in sys.stdin:
        line = line.rstrip("\n")
        if line.strip() in ("/quit", "/exit"):
            break
        transcript += tmpl.render_prompt(line)
        ids = tok.encode(transcript)
        if len(ids) > limit:
            transcript = tok.decode(ids[-limit:])
        params = dataclasses.replace(p, seed=p.seed + turn)
        reply = generate(model, tok, transcript, params, lambda s: (sys.stdout.write(s), sys.stdout.flush())).text
        sys.stdout.write("\n")
        transcript += reply + "\n"
        turn += 1
    return 0


def cmd_eval(cfg: RunConfig, ns) -> int:
    p = _gen_params(cfg)
    tmpl = _template(cfg)
    prompts = _prompts(cfg)
    ppl_ds = load_dataset(cfg.data.eval_path) if cfg.data.eval_path else None
    models = dict(cfg.eval.models) or {"model": _require(cfg.paths.checkpoint, "paths.checkpoint")}
    reports: dict[str, EvalReport] = {}
    reward = None
    for name, path in models.items():
        model, tok = _load(path, cfg)
        if reward is None and (cfg.paths.reward_model or cfg.raft.reward.startswith("count:")):
            reward = _reward_fn(cfg, tok)
        render = tmpl.render_prompt if cfg.generation.use_template else None
        reports[name] = evaluate(model, tok, prompts, p, reward, ppl_ds, cfg.eval.seeds, render)
    run_dir = _run_dir(cfg, "eval")
    (run_dir / "report.json").write_text(json.dumps({k: v.to_json() for k, v in reports.items()}, indent=2))
    table = render_table(reports)
    (run_dir / "report.txt").write_text(table)
    plot_reports(reports, run_dir / "report.png")
    sys.stdout.write(table)
    print(run_dir, file=sys.stderr)
    return 0


def cmd_merge_lora(cfg: RunConfig, ns) -> int:
    model, tok = _load(_require(cfg.paths.checkpoint, "paths.checkpoint"), cfg)
    merge_lora(model)
    out = _require(cfg.paths.out, "paths.out")
    save_model(model, out, tok)
    print(out)
    return 0


def cmd_extend_vocab(cfg: RunConfig, ns) -> int:
    model, tok = _load(_require(cfg.paths.checkpoint, "paths.checkpoint"), cfg)
    tok, n = extend_vocabulary(tok, ns.tokens)
    resize_embeddings(model, len(tok))
    out = _require(cfg.paths.out, "paths.out")
    save_model(model, out, tok)
    print(out)
    print(f"added={n} vocab={len(tok)}", file=sys.stderr)
    return 0


COMMANDS = {
    "init-model": cmd_init_model,
    "train-tokenizer": cmd_train_tokenizer,
    "pretrain": lambda cfg, ns: _training_run(cfg, ns, "pretrain"),
    "finetune": lambda cfg, ns: _training_run(cfg, ns, "finetune"),
    "reward": cmd_reward,
    "raft": cmd_raft,
    "infer": cmd_infer,
    "chat": cmd_chat,
    "eval": cmd_eval,
    "merge-lora": cmd_merge_lora,
    "extend-vocab": cmd_extend_vocab,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        if not ns.command:
            raise UsageError("a subcommand is required")
        if ns.resume:
            saved = json.loads((Path(ns.resume) / RUN_CONFIG).read_text())
            if saved["command"] != ns.command:
                raise UsageError(f"{ns.resume} was a {saved['command']!r} run, not {ns.command!r}")
            cfg = RunConfig.from_dict(saved["config"])
        else:
            cfg = resolve(ns.config, _overrides(ns))
        return COMMANDS[ns.command](cfg, ns)
    except (FormatError, VersionError) as exc:
        return _fail("format", exc, 2)
    except NonFiniteError as exc:
        return _fail("numeric", exc, 3)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, 1)
    except DeskflowError as exc:
        return _fail("runtime", exc, 1)
    except FileNotFoundError as exc:
        return _fail("usage", f"file not found: {exc.filename}", 1)


if __name__ == "__main__":
    sys.exit(main())
