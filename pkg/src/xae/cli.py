"""Command-line entry point: ``xae <command> [flags]``.

Commands: synth, train, eval, explain, simulate, sweep {trigger,expressiveness},
param-count.  Every command writes the resolved RunConfig and a small run
record into its output directory so the run can be replayed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2            # argparse's own code for unknown flags
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_GOLDEN_MISMATCH = 5
EXIT_DATA = 6



class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", default=None, help="YAML config path or preset name")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("--out", default=None, help="output directory (default: $XAE_OUT_DIR/<command>)")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xae", description="Explainable addressee estimation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[shared], help="generate a synthetic dataset")
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--interactions", type=int, default=10)
    s.add_argument("--frames", type=int, default=10)

    s = sub.add_parser("train", parents=[shared], help="fit a model on a dataset")
    s.add_argument("--data", required=True, help="dataset directory or manifest.json")

    s = sub.add_parser("eval", parents=[shared], help="cross-validate, or score a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", default=None, help="score this model instead of cross-validating")
    s.add_argument("--seeds", type=_int_list, default=None, help="comma-separated CV seeds")
    s.add_argument("--folds", default=None, help="comma-separated interaction ids to hold out")
    s.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("explain", parents=[shared], help="export explanation bundles")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--theta", type=float, default=None)
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--layer", type=int, default=None)
    s.add_argument("--head", default="MEAN", help="MEAN or a head index")

    s = sub.add_parser("simulate", parents=[shared], help="replay a conversation script")
    s.add_argument("--script", required=True)
    s.add_argument("--golden", default=None, help="compare the transcript byte-for-byte")
    s.add_argument("--checkpoint", default=None, help="use a trained model instead of the scripted stub")

    s = sub.add_parser("sweep", help="analysis sweeps")
    kind = s.add_subparsers(dest="sweep", required=True)
    t = kind.add_parser("trigger", parents=[shared], help="cue trigger probability vs threshold")
    t.add_argument("--data", required=True)
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--thetas", default="0:0.05:0.005", help="start:stop:step, stop inclusive")
    t.add_argument("--window", type=int, default=None)
    e = kind.add_parser("expressiveness", parents=[shared], help="fusion dim vs modality-weight spread")
    e.add_argument("--dims", type=_int_list, default=[8, 16, 32, 64])
    e.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    e.add_argument("--per-class", type=int, default=100)

    sub.add_parser("param-count", parents=[shared], help="print the trainable parameter count")
    return p


# -- helpers ----------------------------------------------------------------------------

def _load_config(args):
    from .training import RunConfig
    if args.config is None:
        default = "tiny_xae" if args.command in ("train", "eval", "sweep") else "xae_default"
        return RunConfig.preset(default)
    try:
        return RunConfig.load(args.config)
    except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot read config {args.config!r}: {exc}", EXIT_CONFIG) from exc


def _out_dir(args) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        name = args.command if args.command != "sweep" else f"sweep_{args.sweep}"
        out = Path(os.environ.get("XAE_OUT_DIR", "xae_out")) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record_run(out: Path, args, config) -> None:
    from importlib.metadata import PackageNotFoundError, version
    config.dump(out / "config.yaml")
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    rec = {"command": args.command, "argv": sys.argv[1:], "seed": args.seed,
           "versions": {"python": platform.python_version(), "numpy": np.__version__, "artifact": pkg}}
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _load_data(path):
    from .data import load_dataset
    p = Path(path)
    try:
        return load_dataset(p / "manifest.json" if p.is_dir() else p)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}", EXIT_DATA) from exc


def _load_model(path):
    from .estimator import AddresseeEstimator
    p = Path(path)
    if not (p / "model.xae").exists() and not (p.is_file() and p.suffix == ".xae"):
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    try:
        return AddresseeEstimator.load(p)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args, config, out):
    from .data import SynthConfig, save_dataset, synth_generate
    sc = SynthConfig(sequences_per_class=args.per_class, n_interactions=args.interactions, k=args.frames,
                     seed=args.seed)
    ds = synth_generate(sc)
    save_dataset(ds.sequences, out)
    (out / "synth.yaml").write_text(yaml.safe_dump(sc.to_dict(), sort_keys=True))
    print(out / "manifest.json")


def cmd_train(args, config, out):
    from .estimator import AddresseeEstimator
    from .training import write_loss_csv
    seqs = _load_data(args.data)
    est = AddresseeEstimator(config, random_state=args.seed, verbose=int(args.verbose)).fit(seqs)
    est.save(out)
    write_loss_csv(out / "loss.csv", est.history_)
    print(out / "model.xae")


def cmd_eval(args, config, out):
    from .training import confusion, cross_validate, weighted_f1, write_confusion_csv
    est = _load_model(args.checkpoint) if args.checkpoint else None
    seqs = _load_data(args.data)
    if est is not None:
        labels = np.array([int(s.label) for s in seqs])
        pred = est.predict(seqs)
        f1 = weighted_f1(pred, labels)
        write_confusion_csv(out / "confusion.csv", confusion(pred, labels))
        (out / "report.json").write_text(json.dumps({"weighted_f1": f1, "n": len(seqs)}, indent=2) + "\n")
    else:
        folds = args.folds.split(",") if args.folds else None
        report = cross_validate(config, seqs, seeds=args.seeds, jobs=args.jobs, test_ids=folds)
        report.write(out)
        f1 = report.f1
    print(f"weighted_f1 {f1:.4f}")


def cmd_explain(args, config, out):
    from .explain import export_bundles
    est = _load_model(args.checkpoint)
    seqs = _load_data(args.data)
    head = args.head if args.head.upper() == "MEAN" else int(args.head)
    bundles = est.explain(seqs, theta=args.theta, window=args.window, layer=args.layer, head_mode=head)
    export_bundles(out, bundles)
    print(f"{len(bundles)} bundles -> {out}")


def cmd_simulate(args, config, out):
    from .sim import SimulationError, compare_transcript, load_script, run_episode, write_transcript
    try:
        script = load_script(args.script)
    except OSError as exc:
        raise CliError(f"cannot read script {args.script}: {exc}", EXIT_DATA) from exc
    except SimulationError as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    model = _load_model(args.checkpoint) if args.checkpoint else None
    records = run_episode(script, model, config, seed=args.seed)
    write_transcript(out / "transcript.jsonl", records)
    if args.golden:
        ok, diff = compare_transcript(records, args.golden)
        if not ok:
            raise CliError(f"transcript differs from {args.golden}: {diff}", EXIT_GOLDEN_MISMATCH)
        print("transcript matches golden")
    else:
        print(out / "transcript.jsonl")


def cmd_sweep(args, config, out):
    from . import explain as ex
    if args.sweep == "trigger":
        est = _load_model(args.checkpoint)
        seqs = _load_data(args.data)
        times = est.forward_details(seqs).times
        if times is None:
            raise CliError("model has no time scores (IAE variant)", EXIT_FAILURE)
        w = args.window or est._config().cue_window
        try:
            thetas = ex.theta_grid(args.thetas)
        except ValueError as exc:
            raise CliError(f"bad --thetas {args.thetas!r}: {exc}", EXIT_USAGE) from exc
        curve = ex.trigger_probability(times, thetas, w)
        ex.write_trigger_csv(out / "trigger.csv", curve)
        print(out / "trigger.csv")
    else:
        from .data import SynthConfig, synth_generate
        train = synth_generate(SynthConfig(sequences_per_class=args.per_class, seed=args.seed)).sequences
        held = synth_generate(SynthConfig(sequences_per_class=10, seed=args.seed + 7)).sequences
        res = ex.expressiveness_sweep(args.dims, args.seeds, train, held)
        res.write_csv(out / "sweep.csv")
        summary = {"rho": res.rho, "p_value": res.p_value, "degenerate": res.degenerate,
                   "reference_rho": res.reference_rho,
                   "per_dim_log_std": {str(k): v for k, v in res.per_dim_log_std().items()}}
        (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
        print(f"spearman rho {res.rho:.3f} (p={res.p_value:.3g})")


def cmd_param_count(args, config, out):
    from .nn import param_count
    print(param_count(config.model))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
            "simulate": cmd_simulate, "sweep": cmd_sweep, "param-count": cmd_param_count}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _load_config(args)
        out = None
        if args.command != "param-count":
            out = _out_dir(args)
            _record_run(out, args, config)
        COMMANDS[args.command](args, config, out)
    except CliError as exc:
        print(f"xae: error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, RuntimeError) as exc:
        print(f"xae: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
