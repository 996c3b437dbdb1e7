"""Command-line entry point.

Subcommands: ``gen``, ``train``, ``eval``, ``gradcheck``, ``ablate`` and
``replay``.  Every run writes a JSON manifest holding the fully resolved
arguments and configs, the artifact paths, the tool version and start/end
timestamps; ``replay MANIFEST`` reruns it.

Settings resolve as built-in defaults < ``--config`` file < flags.  The config
file is flat ``key = value`` text whose keys are long flag names without the
leading dashes (``tau = 0.05``, ``mask-f2g = true``); ``#`` starts a comment.

Exit codes: 0 success, 1 IO or runtime failure, 2 usage or validation error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import encoder as enc
from . import gradcheck
from . import multivec as mv
from . import synthbench as sb
from . import trainer as tr
from .cached_grad import set_fault
from .errors import ConfigError, DimensionError, FormatError, FusionEmbedError, PreconditionError

ENV_OUTDIR = "FUSIONEMBED_OUTDIR"
EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3
_INTERNAL = ("config", "manifest", "command")


class UsageError(Exception):
    pass


def _outdir() -> Path:
    return Path(os.environ.get(ENV_OUTDIR, "."))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# parser


def _add_common(sp):
    sp.add_argument("--config", metavar="FILE", help="flat key = value file; flags override it")
    sp.add_argument("--manifest", metavar="PATH", help="manifest path (default: next to the main artifact)")


def _add_model_flags(sp):
    sp.add_argument("--tau", type=float, default=0.02, help="softmax temperature")
    sp.add_argument("--alpha", type=float, default=20.0, help="hard-negative amplification; 0 disables it")
    sp.add_argument("--n-fine", type=int, default=10, help="fine-grained embeddings per item")
    sp.add_argument("--m", type=int, default=10, help="hidden units per head when --hidden is unset")
    sp.add_argument("--hidden", type=int, default=None, help="trunk width (default m * (n_fine + 1))")
    sp.add_argument("--dim", type=int, default=16, help="embedding dimension")
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--sub-batch", type=int, default=None, help="encoder sub-batch (default: --batch)")
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--optimizer", choices=tr.OPTIMIZERS, default="adam_like")
    sp.add_argument("--precision", choices=tr.PRECISIONS, default="double")
    sp.add_argument("--no-normalize", action="store_true", help="keep raw head outputs")
    sp.add_argument("--seed", type=int, default=0)


def _add_fusion_flags(sp):
    sp.add_argument("--aggregator", choices=("logsumexp", "max", "mean-max"), default="logsumexp")
    for fam in mv.FAMILIES:
        sp.add_argument(f"--mask-{fam}", action="store_true", help=f"exclude the {fam} similarity family")


def _add_data(sp):
    sp.add_argument("--data", metavar="FILE", help="dataset file written by gen")


def build_parser():
    parser = argparse.ArgumentParser(prog="fusionembed", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"fusionembed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}

    sp = subs["gen"] = sub.add_parser("gen", help="generate a synthetic dataset")
    sp.add_argument("--items", type=int, default=1000, help="training pairs")
    sp.add_argument("--pool", type=int, default=200, help="held-out evaluation pairs")
    sp.add_argument("--aspects", type=int, default=4)
    sp.add_argument("--block-dim", type=int, default=8)
    sp.add_argument("--mix", default="0.25,0.25,0.25,0.25", help="g2g,f2g,g2f,f2f proportions")
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--hard-cluster", type=int, default=0, help="runs of near-duplicate targets")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--out", help="dataset path (default $FUSIONEMBED_OUTDIR/data.bin)")

    sp = subs["train"] = sub.add_parser("train", help="train the encoder")
    _add_data(sp)
    _add_model_flags(sp)
    _add_fusion_flags(sp)
    sp.add_argument("--checkpoint-every", type=int, default=0, metavar="K")
    sp.add_argument("-o", "--out", help="final checkpoint (default $FUSIONEMBED_OUTDIR/model.ckpt)")
    sp.add_argument("--metrics", help="JSON-lines metrics stream (default: checkpoint path + .metrics.jsonl)")
    sp.add_argument("--timing", action="store_true", help="include wall-clock time in step records")

    sp = subs["eval"] = sub.add_parser("eval", help="Precision@1 on the dataset's evaluation pool")
    _add_data(sp)
    sp.add_argument("--checkpoint", metavar="FILE")
    sp.add_argument("--oracle", action="store_true", help="use the planted-block encoder instead of a checkpoint")
    _add_fusion_flags(sp)
    sp.add_argument("-o", "--out", help="also write the report as JSON here")

    sp = subs["gradcheck"] = sub.add_parser("gradcheck", help="closed-form vs finite-difference gradients")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--first", type=int, default=0, help="index of the first trial (for replaying one)")
    sp.add_argument("--report", help="JSON-lines record per trial")
    sp.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    sp = subs["ablate"] = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    _add_data(sp)
    _add_model_flags(sp)
    sp.add_argument("-o", "--out", help="table path (default $FUSIONEMBED_OUTDIR/ablation.tsv)")

    sp = subs["replay"] = sub.add_parser("replay", help="rerun a command from its manifest")
    sp.add_argument("source", metavar="MANIFEST")

    for name, sp in subs.items():
        if name != "replay":
            _add_common(sp)
    return parser, subs


def read_config(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _config_defaults(sp, entries: dict) -> dict:
    by_flag = {}
    for action in sp._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt[2:]] = action
    defaults = {}
    for key, value in entries.items():
        action = by_flag.get(key)
        if action is None or key in ("config", "manifest", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} needs a boolean, got {value!r}")
            defaults[action.dest] = low in ("true", "1", "yes")
            continue
        try:
            converted = action.type(value) if action.type else value
        except ValueError:
            raise UsageError(f"config key {key!r}: bad value {value!r}") from None
        if action.choices is not None and converted not in action.choices:
            raise UsageError(f"config key {key!r} must be one of {list(action.choices)}")
        defaults[action.dest] = converted
    return defaults


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        subs[args.command].set_defaults(**_config_defaults(subs[args.command], read_config(args.config)))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# shared helpers


def _mask(args) -> mv.PatternMask:
    excluded = [f for f in mv.FAMILIES if getattr(args, f"mask_{f}")]
    if len(excluded) == len(mv.FAMILIES):
        raise UsageError("masking all four similarity families leaves nothing to fuse")
    return mv.PatternMask.excluding(*excluded)


def _train_config(args, aggregator="logsumexp", mask=mv.FULL_MASK) -> tr.TrainConfig:
    return tr.TrainConfig(
        tau=args.tau,
        alpha=args.alpha,
        n_fine=args.n_fine,
        m_capacity=args.m,
        dim=args.dim,
        hidden=args.hidden,
        batch_size=args.batch,
        sub_batch_size=args.sub_batch,
        steps=args.steps,
        lr=args.lr,
        optimizer=args.optimizer,
        aggregator=aggregator,
        mask=mask,
        seed=args.seed,
        precision=args.precision,
        normalize=not args.no_normalize,
        checkpoint_every=getattr(args, "checkpoint_every", 0),
    )


def _fusion(args):
    mask = _mask(args)
    agg = mv.Aggregator.parse(args.aggregator)
    if agg is mv.Aggregator.MEAN_MAX and not mask.is_full:
        raise UsageError("mean-max aggregation cannot be combined with --mask-* switches")
    return agg, mask


def _load_data(args) -> sb.Dataset:
    if not args.data:
        raise UsageError("--data is required")
    return sb.load_dataset(args.data)


def _args_record(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in _INTERNAL}


class Manifest:
    def __init__(self, args, path: Path, resolved: dict, artifacts: dict):
        self.path = Path(args.manifest) if args.manifest else path
        self.record = {
            "tool": "fusionembed",
            "version": __version__,
            "command": args.command,
            "args": _args_record(args),
            "resolved": resolved,
            "artifacts": {k: str(v) for k, v in artifacts.items()},
            "started": _now(),
            "finished": None,
            "exit_code": None,
        }
        self._write()

    def finish(self, code: int, **extra) -> int:
        self.record.update(extra)
        self.record["finished"] = _now()
        self.record["exit_code"] = code
        self._write()
        return code

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.record, indent=2, sort_keys=True) + "\n")


def _emit(record: dict):
    print(json.dumps(record, sort_keys=True))


def _default(args_value, name: str) -> Path:
    return Path(args_value) if args_value else _outdir() / name


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    try:
        mix = tuple(float(x) for x in args.mix.split(","))
    except ValueError:
        raise UsageError(f"--mix needs comma-separated numbers, got {args.mix!r}") from None
    cfg = sb.SynthConfig(
        n_items=args.items,
        n_pool=args.pool,
        n_aspects=args.aspects,
        block_dim=args.block_dim,
        pattern_mix=mix,
        noise_sigma=args.noise,
        seed=args.seed,
        hard_cluster=args.hard_cluster,
    )
    out = _default(args.out, "data.bin")
    man = Manifest(args, _sidecar(out, ".manifest.json"), {"synth": cfg.to_record()}, {"dataset": out})
    ds = sb.generate(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    sb.save_dataset(ds, out)
    checksum = ds.checksum()
    _emit({"type": "gen", "path": str(out), "sha256": checksum, **cfg.to_record()})
    return man.finish(EXIT_OK, sha256=checksum)


def cmd_train(args) -> int:
    agg, mask = _fusion(args)
    cfg = _train_config(args, agg, mask)
    ds = _load_data(args)
    out = _default(args.out, "model.ckpt")
    metrics = Path(args.metrics) if args.metrics else _sidecar(out, ".metrics.jsonl")
    resolved = {"train": cfg.to_record(), "synth": ds.config.to_record()}
    man = Manifest(args, _sidecar(out, ".manifest.json"), resolved, {"checkpoint": out, "metrics": metrics})
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.parent.mkdir(parents=True, exist_ok=True)
    snapshots = []

    with metrics.open("w") as stream:

        def write(rec):
            stream.write(json.dumps(rec, sort_keys=True) + "\n")

        def on_checkpoint(step, params):
            path = out.with_name(f"{out.stem}.step{step}{out.suffix}")
            enc.save_checkpoint(params, path)
            snapshots.append(str(path))
            write({"type": "checkpoint", "step": step, "sha256": _sha256(path)})

        write({"type": "run", **resolved})
        params, reports = tr.train_run(
            cfg,
            ds.train_queries,
            ds.train_positives,
            on_report=lambda r: write(r.to_record(timing=args.timing)),
            on_checkpoint=on_checkpoint,
        )
        enc.save_checkpoint(params, out)
        # paths stay out of the stream so equal runs give equal streams
        final = {"type": "final", "steps": len(reports), "loss": reports[-1].loss if reports else None,
                 "sha256": _sha256(out)}
        write(final)
    _emit({**final, "checkpoint": str(out)})
    return man.finish(EXIT_OK, snapshots=snapshots)


def cmd_eval(args) -> int:
    agg, mask = _fusion(args)
    ds = _load_data(args)
    if args.oracle == bool(args.checkpoint):
        raise UsageError("give exactly one of --checkpoint or --oracle")
    params = sb.oracle_params(ds.config) if args.oracle else enc.load_checkpoint(args.checkpoint)
    if params.f_in != ds.config.feature_dim:
        raise DimensionError(f"checkpoint expects {params.f_in} features, dataset has {ds.config.feature_dim}")
    primary = Path(args.out) if args.out else _outdir() / "eval.json"
    artifacts = {"dataset": args.data, **({"checkpoint": args.checkpoint} if args.checkpoint else {})}
    if args.out:
        artifacts["report"] = args.out
    resolved = {"synth": ds.config.to_record(), "aggregator": agg.value,
                "mask": dict(zip(mv.FAMILIES, mask.flags)), "oracle": args.oracle}
    man = Manifest(args, _sidecar(primary, ".manifest.json"), resolved, artifacts)
    rep = sb.evaluate(params, ds, mask, agg).to_record()
    rep.update(aggregator=agg.value, mask=mask.label())
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    _emit(rep)
    return man.finish(EXIT_OK, p_at_1=rep["p_at_1"])


def cmd_gradcheck(args) -> int:
    if args.trials < 0:
        raise UsageError("--trials must be >= 0")
    report = Path(args.report) if args.report else None
    primary = report or _outdir() / "gradcheck.jsonl"
    man = Manifest(args, _sidecar(primary, ".manifest.json"), {"cached_tol": gradcheck.CACHED_TOL,
                   "chain_tol": gradcheck.CHAIN_TOL}, {"report": report} if report else {})
    worst, count, failures = {}, {}, []
    stream = report.open("w") if report else None
    if args.inject_fault:
        set_fault("flip_query_global_positive", True)
    try:
        for res in gradcheck.run_trials(args.trials, args.seed, args.first):
            worst[res.check] = max(worst.get(res.check, 0.0), res.rel_error)
            count[res.check] = count.get(res.check, 0) + 1
            if stream:
                stream.write(json.dumps(res.to_record(), sort_keys=True) + "\n")
            if not res.passed:
                failures.append(res)
    finally:
        set_fault("flip_query_global_positive", False)
        if stream:
            stream.close()
    if not count:
        print("gradcheck: no trials")
    for check, err in worst.items():
        tol = gradcheck.CACHED_TOL if check == "cached_gradients" else gradcheck.CHAIN_TOL
        print(f"{check}: {count[check]} trials, max relative error {err:.3e} (tolerance {tol:g})")
    for res in failures:
        print(
            f"FAIL {res.check} trial {res.trial} seed {res.seed}: relative error {res.rel_error:.3e}; "
            f"replay with: fusionembed gradcheck --seed {res.seed} --first {res.trial} --trials 1",
            file=sys.stderr,
        )
    code = EXIT_VERIFY if failures else EXIT_OK
    return man.finish(code, max_relative_error=worst, failures=[r.to_record() for r in failures])


def cmd_ablate(args) -> int:
    base = _train_config(args)
    ds = _load_data(args)
    out = _default(args.out, "ablation.tsv")
    resolved = {"train": base.to_record(), "synth": ds.config.to_record(),
                "cells": [f"{a.value}/alpha={al:g}/{m}" for a, al, m, _ in sb.ablation_cells(base.alpha)]}
    man = Manifest(args, _sidecar(out, ".manifest.json"), resolved, {"dataset": args.data, "table": out})

    def progress(row):
        print(f"{row.cell()}: P@1 {row.p_at_1:.4f}", file=sys.stderr)

    rows = sb.ablation_suite(ds, base, on_row=progress)
    table = sb.ablation_table(rows)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    sys.stdout.write(table)
    return man.finish(EXIT_OK)


def cmd_replay(args) -> int:
    try:
        record = json.loads(Path(args.source).read_text())
        command, recorded = record["command"], record["args"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{args.source} is not a run manifest: {exc}") from None
    if command not in COMMANDS or command == "replay":
        raise UsageError(f"manifest names unknown command {command!r}")
    ns = argparse.Namespace(**recorded, command=command, config=None, manifest=None)
    return COMMANDS[command](ns)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fusionembed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"fusionembed: error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, PreconditionError, DimensionError) as exc:
        print(f"fusionembed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, FusionEmbedError) as exc:
        print(f"fusionembed: error: {exc}", file=sys.stderr)
        return EXIT_IO
