"""``alloyforge`` command-line entry point.

Exit codes: 0 success, 2 validation or user error, 1 internal error. Every
subcommand that writes files also writes ``<out>.manifest.json``.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .alignment import data as adata
from .alignment.config import ConfigError, DpoConfig, SftConfig, SkldConfig
from .alignment.distill import distill_train
from .alignment.dpo import dpo_train
from .alignment.sft import sft_train
from .checkpoint import Checkpoint, CheckpointError, ModelConfig, read_checkpoint, tensor_stats, write_checkpoint
from .evalharness import EchoStub, EmptyStub, NiahSpec, default_niah_spec, format_benchmark_table, niah_grid
from .merge import MergeError, MergeSchedule, merge_checkpoints
from .transformer import ToyModel

log = logging.getLogger("alloyforge")


class UsageError(Exception):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_obj(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def default_seed():
    raw = os.environ.get("ALLOYFORGE_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"ALLOYFORGE_SEED must be an integer, got {raw!r}") from None


def write_manifest(path, subcommand, config, seed, started, outputs):
    manifest = {
        "subcommand": subcommand,
        "config_digest": _digest_obj(config),
        "seed": seed,
        "toolkit_version": __version__,
        "wall_time_s": round(time.time() - started, 6),
        "outputs": {os.path.basename(p): sha256_file(p) for p in outputs},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _model_to_checkpoint(model, like=None):
    """Checkpoint of ``model`` keeping the dtypes of ``like`` where present."""
    tensors = {}
    for name, arr in model.params.items():
        dtype = like.tensors[name].dtype if like is not None and name in like.tensors else np.float64
        tensors[name] = arr.astype(dtype)
    return Checkpoint(tensors, model.config)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_init(args):
    started = time.time()
    cfg = ModelConfig()
    if args.config:
        with open(args.config) as f:
            cfg = ModelConfig.from_dict(json.load(f))
    overrides = {k: getattr(args, k) for k in ("n_layers", "d_model", "d_ffn", "n_heads", "n_kv_heads", "vocab_size", "max_seq_len") if getattr(args, k) is not None}
    if overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **overrides})
    model = ToyModel.init(cfg, seed=args.seed)
    write_checkpoint(model.to_checkpoint(), args.out)
    write_manifest(args.out + ".manifest.json", "init", cfg.to_dict(), args.seed, started, [args.out])
    return 0


def cmd_synth(args):
    started = time.time()
    if args.kind == "sft":
        recs = adata.synthetic_sft_corpus(args.vocab_size, args.n, args.seed)
        ntok = sum(len(r["prompt"]) + len(r["response"]) for r in recs)
        ref = adata.REFERENCE_TOKEN_COUNTS["sft"]
        adata.write_jsonl(args.out, recs)
    elif args.kind == "pref":
        pairs = adata.synthetic_preference_pairs(args.vocab_size, args.n, args.seed)
        ntok = sum(len(p.prompt) + len(p.chosen) + len(p.rejected) for p in pairs)
        ref = adata.REFERENCE_TOKEN_COUNTS["preference"]
        adata.save_preference_pairs(args.out, pairs)
    else:
        prompts = adata.synthetic_prompts(args.vocab_size, args.n, args.seed)
        ntok = sum(map(len, prompts))
        ref = None
        adata.write_jsonl(args.out, [{"prompt": p} for p in prompts])
    manifest_path = args.out + ".corpus.json"
    adata.CorpusManifest(os.path.basename(args.out), args.kind, args.n, ntok, args.seed, ref).write(manifest_path)
    write_manifest(args.out + ".manifest.json", "synth", vars_for_digest(args), args.seed, started, [args.out, manifest_path])
    return 0


def vars_for_digest(args):
    return {k: v for k, v in vars(args).items() if k != "func" and isinstance(v, (int, float, str, bool, type(None)))}


def cmd_merge(args):
    started = time.time()
    a = read_checkpoint(args.a)
    b = read_checkpoint(args.b)
    if args.schedule:
        schedule = MergeSchedule.load(args.schedule)
    else:
        schedule = MergeSchedule.constant(args.t if args.t is not None else 0.5)
    merged, report = merge_checkpoints(a, b, schedule, workers=args.workers)
    write_checkpoint(merged, args.out)
    outputs = [args.out]
    if args.report:
        report.write(args.report)
        outputs.append(args.report)
    write_manifest(args.out + ".manifest.json", "merge", schedule.to_dict(), None, started, outputs)
    counts = report.counts
    print(json.dumps({"tensors": len(report.entries), **counts}))
    return 0


_TRAIN_CONFIGS = {"sft": SftConfig, "dpo": DpoConfig, "distill": SkldConfig}


def _load_train_config(args):
    cls = _TRAIN_CONFIGS[args.stage]
    raw = {}
    if args.config:
        with open(args.config) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{args.config}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw:
        raw["seed"] = default_seed()
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    return cls.from_dict(raw)


def cmd_train(args):
    started = time.time()
    cfg = _load_train_config(args)
    ckpt = read_checkpoint(args.model)
    model = ToyModel(ckpt)
    history = []
    if args.stage == "sft":
        examples = adata.load_sft_examples(args.data)
        sft_train(model, examples, cfg, history)
    elif args.stage == "dpo":
        pairs = adata.load_preference_pairs(args.data)
        reference = ToyModel(read_checkpoint(args.reference)) if args.reference else model.copy()
        dpo_train(model, reference, pairs, cfg, history)
    else:
        if not args.teacher:
            raise UsageError("train distill requires --teacher")
        teacher = ToyModel(read_checkpoint(args.teacher))
        prompts = adata.load_prompts(args.data)
        distill_train(model, teacher, prompts, cfg, history)
    write_checkpoint(_model_to_checkpoint(model, ckpt), args.out)
    log_path = args.log or args.out + ".log.csv"
    adata.write_training_log(log_path, history)
    write_manifest(args.out + ".manifest.json", f"train {args.stage}", cfg.to_dict(), cfg.seed, started, [args.out, log_path])
    return 0


def _parse_list(text, conv):
    try:
        return [conv(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def cmd_eval(args):
    started = time.time()
    if args.target == "table":
        with open(args.results) as f:
            payload = json.load(f)
        text = format_benchmark_table(payload["results"], payload.get("baselines"), payload.get("model_name", "ours"))
        if args.out:
            with open(args.out, "w") as f:
                f.write(text)
            write_manifest(args.out + ".manifest.json", "eval table", payload, None, started, [args.out])
        else:
            sys.stdout.write(text)
        return 0

    seed = args.seed if args.seed is not None else default_seed()
    model = None
    vocab = args.vocab_size
    if args.model not in ("echo-stub", "empty-stub"):
        if not os.path.exists(args.model):
            raise UsageError(f"model file not found: {args.model}")
        model = ToyModel(read_checkpoint(args.model))
        vocab = model.config.vocab_size
    if args.spec:
        spec = NiahSpec.load(args.spec)
    else:
        spec = default_niah_spec(
            vocab,
            _parse_list(args.lengths, int),
            _parse_list(args.depths, float),
            seed=seed,
            trials=args.trials,
        )
    if args.model == "echo-stub":
        model = EchoStub(spec.answer)
    elif args.model == "empty-stub":
        model = EmptyStub()
    grid = niah_grid(model, spec, trials=args.trials)
    csv_text = grid.to_csv()
    if args.out:
        grid.write_csv(args.out)
        write_manifest(args.out + ".manifest.json", "eval niah-grid", spec.to_dict(), seed, started, [args.out])
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_inspect(args):
    ckpt = read_checkpoint(args.ckpt)
    names = [args.tensor] if args.tensor else list(ckpt.tensors)
    out = {"format_version": ckpt.format_version, "config": ckpt.config.to_dict(), "tensors": {}}
    for name in names:
        if name not in ckpt.tensors:
            raise UsageError(f"unknown tensor {name!r}")
        arr = ckpt.tensors[name]
        out["tensors"][name] = {"dtype": "f32" if arr.dtype == np.float32 else "f64", "shape": list(arr.shape), **tensor_stats(ckpt, name)}
    print(json.dumps(out, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="alloyforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a seeded random toy model")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="ModelConfig JSON")
    s.add_argument("--seed", type=int, default=None)
    for k in ("n_layers", "d_model", "d_ffn", "n_heads", "n_kv_heads", "vocab_size", "max_seq_len"):
        s.add_argument("--" + k.replace("_", "-"), dest=k, type=int)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("synth", help="write a seeded synthetic corpus")
    s.add_argument("kind", choices=["sft", "pref", "prompts"])
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--vocab-size", type=int, default=256)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("merge", help="SLERP-merge two checkpoints")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--schedule", help="schedule JSON {default_t, rules}")
    s.add_argument("--t", type=float, help="constant t when no schedule is given (default 0.5)")
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="JSON-lines per-tensor report")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("train", help="run a post-training stage")
    s.add_argument("stage", choices=["sft", "dpo", "distill"])
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="CSV training log (default <out>.log.csv)")
    s.add_argument("--reference", help="dpo: frozen reference (default: copy of --model)")
    s.add_argument("--teacher", help="distill: teacher checkpoint")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="NIAH grid or benchmark table")
    s.add_argument("target", choices=["niah-grid", "table"])
    s.add_argument("--model", default="echo-stub", help="checkpoint path, echo-stub or empty-stub")
    s.add_argument("--spec", help="NiahSpec JSON")
    s.add_argument("--lengths", default="64,128,256")
    s.add_argument("--depths", default="0,0.5,1")
    s.add_argument("--trials", type=int, default=8)
    s.add_argument("--vocab-size", type=int, default=256)
    s.add_argument("--results", help="table: JSON {results, baselines, model_name}")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="print config and tensor statistics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--tensor")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if getattr(args, "seed", "absent") is None and args.command in ("init", "synth"):
            args.seed = default_seed()
        if args.command == "eval" and args.target == "table" and not args.results:
            raise UsageError("eval table requires --results")
        return args.func(args)
    except MergeError as e:
        print(f"alloyforge: merge failed: {e}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, CheckpointError, ValueError, KeyError, OSError) as e:
        print(f"alloyforge: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"alloyforge: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
