"""Command-line entry point: ``cpmtp <command> [--config file.json] [overrides]``.

Settings are resolved as command-line overrides > JSON config file >
defaults. Unknown config keys are a usage error (exit 2); runtime failures
exit 1 with a JSON failure report on stdout.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import checkpoint
from . import corpus as corp
from . import heads
from . import sampler
from . import speculative as sp
from . import training as tr
from . import verify as ver
from .rng import make_rng

DEFAULTS = {
    "gen-data": dict(kind="clustered", vocab=32, order=1, clusters=4, lead=0.3, between=2.0,
                     within=0.5, concentration=1.0, length=200_000, val_fraction=0.1, seed=0,
                     text=None, boundary=None, out="tokens.bin", spec_out="markov.json"),
    "train": dict(data="tokens.bin", ranks=[4], horizon=2, steps=1500, batch_size=128,
                  learning_rate=1e-2, aux_coefficient=0.1, seed=0, embed_dim=64, decay=0.7,
                  context_length=16, warmup_steps=0, out="model.ckpt",
                  metrics="metrics.jsonl", threads=None),
    "finetune": dict(data="tokens.bin", base=None, base_steps=1500, rank=4, horizon=2,
                     steps=1500, batch_size=128, learning_rate=1e-2, aux_coefficient=0.1,
                     distill_beta=0.9, discount=0.9, seed=0, embed_dim=64, decay=0.7,
                     context_length=16, warmup_steps=0, out="finetuned.ckpt",
                     metrics="finetune.jsonl", threads=None),
    "sample": dict(checkpoint="model.ckpt", prompt=[0], temperature=1.0, seed=0, count=1),
    "bench": dict(checkpoints=["model.ckpt"], data="tokens.bin", prompts=100, prompt_length=10,
                  max_tokens=50, modes=["greedy", "stochastic", "tree"], temperature=1.0,
                  branching=[5], seed=0, out="bench.json"),
    "verify": dict(seed=0, out=None),
}

LIST_KEYS = {"ranks": int, "prompt": int, "checkpoints": str, "modes": str, "branching": int}


class UsageError(Exception):
    pass


def _list(kind):
    return lambda text: [kind(x) for x in text.split(",") if x != ""]


def build_parser():
    parser = argparse.ArgumentParser(prog="cpmtp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with settings")
        for key, value in defaults.items():
            flag = "--" + key.replace("_", "-")
            if key in LIST_KEYS:
                p.add_argument(flag, type=_list(LIST_KEYS[key]), default=None)
            elif isinstance(value, bool):
                p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"), default=None)
            elif isinstance(value, int) or key == "threads":
                p.add_argument(flag, type=int, default=None)
            elif isinstance(value, float):
                p.add_argument(flag, type=float, default=None)
            else:
                p.add_argument(flag, default=None)
    return parser


def resolve(command, args):
    cfg = dict(DEFAULTS[command])
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS[command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if command in ("train", "finetune") and cfg.get("threads") is None:
        env = os.environ.get("CP_SPEC_THREADS")
        cfg["threads"] = int(env) if env else 1
    return cfg


def _train_config(cfg, mode, rank):
    return tr.TrainConfig(
        mode=mode, rank=rank, horizon=cfg["horizon"], aux_coefficient=cfg["aux_coefficient"],
        distill_beta=cfg.get("distill_beta", 0.9), discount=cfg.get("discount", 0.9),
        learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], steps=cfg["steps"],
        seed=cfg["seed"], embed_dim=cfg["embed_dim"], decay=cfg["decay"],
        context_length=cfg["context_length"], warmup_steps=cfg["warmup_steps"],
        workers=max(1, cfg["threads"]))


def _per_rank_path(path, rank, sweep):
    if "{rank}" in path:
        return path.format(rank=rank)
    if not sweep:
        return path
    root, ext = os.path.splitext(path)
    return f"{root}_r{rank}{ext}"


def cmd_gen_data(cfg):
    kind = cfg["kind"]
    if kind == "text":
        if not cfg["text"]:
            raise UsageError("gen-data --kind text needs --text PATH")
        c = corp.load_text(cfg["text"], boundary=cfg["boundary"], val_fraction=cfg["val_fraction"])
        corp.write_tokens(cfg["out"], c)
        summary = {"out": cfg["out"], "tokens": int(c.tokens.size), "vocab": c.vocab_size,
                   "characters": "".join(c.vocab)}
    else:
        if kind == "clustered":
            spec = corp.clustered_markov(cfg["vocab"], cfg["clusters"], cfg["seed"],
                                         cfg["within"], cfg["between"], cfg["lead"])
        elif kind == "markov":
            spec = corp.random_markov(cfg["vocab"], cfg["order"], cfg["seed"], cfg["concentration"])
        elif kind == "uniform":
            spec = corp.uniform_markov(cfg["vocab"], cfg["order"])
        elif kind == "cycle":
            spec = corp.cycle_markov(cfg["vocab"])
        else:
            raise UsageError(f"unknown data kind {kind!r}")
        c = corp.generate_markov(spec, cfg["length"], cfg["val_fraction"], seed=cfg["seed"])
        corp.write_tokens(cfg["out"], c)
        with open(cfg["spec_out"], "w") as fh:
            fh.write(spec.to_json())
        summary = {"out": cfg["out"], "spec_out": cfg["spec_out"], "tokens": int(c.tokens.size),
                   "vocab": c.vocab_size, "true_joint_nll_per_token": corp.entropy_rate(spec)}
    summary["config"] = cfg
    return summary


def cmd_train(cfg):
    data = corp.read_tokens(cfg["data"])
    sweep = len(cfg["ranks"]) > 1
    results = []
    for rank in cfg["ranks"]:
        tc = _train_config(cfg, heads.SCRATCH, rank)
        model, metrics = tr.train(tc, data, metrics_path=_per_rank_path(cfg["metrics"], rank, sweep))
        out = _per_rank_path(cfg["out"], rank, sweep)
        checkpoint.save(out, model, {"command": "train", **cfg, "ranks": [rank]})
        ev = tr.evaluate(model, data, context_length=tc.context_length)
        results.append({"rank": rank, "checkpoint": out, "val_joint_nll": ev["joint_nll"],
                        "val_first_token_nll": ev["first_token_nll"],
                        "max_utilization": ev["balance"].max_utilization})
    return {"runs": results, "config": cfg}


def cmd_finetune(cfg):
    data = corp.read_tokens(cfg["data"])
    if cfg["base"]:
        base, _ = checkpoint.load(cfg["base"])
    else:
        bc = _train_config(dict(cfg, horizon=1, steps=cfg["base_steps"]), heads.SCRATCH, 1)
        base, _ = tr.train(bc, data)
    model = tr.finetune_model(base, cfg["horizon"], cfg["rank"], seed=cfg["seed"])
    tc = _train_config(cfg, heads.FINETUNE, cfg["rank"])
    model, _ = tr.train(tc, data, model=model, metrics_path=cfg["metrics"])
    checkpoint.save(cfg["out"], model, {"command": "finetune", **cfg})
    ev = tr.evaluate(model, data, context_length=tc.context_length)
    return {"checkpoint": cfg["out"], "val_joint_nll": ev["joint_nll"],
            "val_base_nll": ev["base_nll"], "config": cfg}


def cmd_sample(cfg):
    model, _ = checkpoint.load(cfg["checkpoint"])
    e = np.tanh(sp.context_state(model, cfg["prompt"]))
    dist = model.forward(e)
    rng = make_rng(cfg["seed"])
    draws = sampler.sample_sequences(dist, cfg["count"], cfg["temperature"], rng)
    return {"samples": draws.tolist(), "config": cfg}


def cmd_bench(cfg):
    data = corp.read_tokens(cfg["data"])
    val = data.tokens[data.split:]
    L = cfg["prompt_length"]
    stride = max(L, (val.size - L) // max(cfg["prompts"], 1))
    prompts = [val[i:i + L] for i in range(0, val.size - L, stride)][:cfg["prompts"]]
    report = []
    for path in cfg["checkpoints"]:
        model, _ = checkpoint.load(path)
        t0 = time.perf_counter()
        base_out = [sp.base_greedy_generate(model, p, cfg["max_tokens"]) for p in prompts]
        base_time = (time.perf_counter() - t0) / (len(prompts) * cfg["max_tokens"])
        n, _, V, _ = model.dims
        branching = cfg["branching"]
        if len(branching) == 1:
            # a single value means a uniform tree over every position
            branching = [min(branching[0], V)] * n
        for mode in cfg["modes"]:
            sc = sampler.SampleConfig(cfg["temperature"], cfg["seed"], tuple(branching))
            total = sp.SpecDecodeStats()
            lossless = True
            for k, p in enumerate(prompts):
                sc.seed = cfg["seed"] + k
                out, st = sp.generate(model, p, cfg["max_tokens"], mode, sc)
                if mode != sp.STOCHASTIC:
                    lossless &= out == base_out[k]
                total.steps += st.steps
                total.tokens_emitted += st.tokens_emitted
                total.accepted += st.accepted
                total.wall_total += st.wall_total
                total.timed_tokens += st.timed_tokens
            row = {"checkpoint": path, "rank": model.dims[1], "mode": mode,
                   "branching": list(branching) if mode == sp.TREE else None,
                   "avg_accepted": total.avg_accepted, "steps": total.steps,
                   "tokens_emitted": total.tokens_emitted,
                   "time_per_token": total.wall_per_token, "base_time_per_token": base_time}
            if mode != sp.STOCHASTIC:
                row["lossless"] = bool(lossless)
            report.append(row)
    result = {"results": report, "config": cfg}
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump(result, fh, indent=1)
    return result


def cmd_verify(cfg):
    checks = ver.run_all(cfg["seed"])
    result = {"ok": all(c["passed"] for c in checks), "checks": checks, "config": cfg}
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            json.dump(result, fh, indent=1)
    return result


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune,
            "sample": cmd_sample, "bench": cmd_bench, "verify": cmd_verify}


def _summary(command, result):
    if command == "verify":
        lines = [f"{'PASS' if c['passed'] else 'FAIL'} {c['check']}: {c['value']:.3g} "
                 f"(tol {c['tolerance']:g})" for c in result["checks"]]
        return "\n".join(lines)
    if command == "bench":
        return "\n".join(f"{r['checkpoint']} [{r['mode']}] avg accepted {r['avg_accepted']:.3f}, "
                         f"{r['time_per_token'] * 1e3:.3f} ms/token" for r in result["results"])
    return None


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args.command, args)
    except UsageError as exc:
        parser.error(str(exc))
    try:
        result = COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:     # runtime failure -> exit 1 with a report
        print(json.dumps({"ok": False, "command": args.command,
                          "error": type(exc).__name__, "message": str(exc)}))
        return 1
    summary = _summary(args.command, result)
    if summary:
        print(summary, file=sys.stderr)
    print(json.dumps(result, default=float))
    if args.command == "verify" and not result["ok"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
