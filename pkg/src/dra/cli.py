"""Command-line interface: ``dra {train,eval,ablate,synth,selftest}``."""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .errors import ConfigError, DRAError
from .heads import PRESETS
from .pseudogen import PSEUDO_KINDS

log = logging.getLogger("dra")

CONFIG_SECTIONS = ("data", "model", "train", "protocol", "eval")

# flag dest -> type, for values read from a config file
_BOOL_KEYS = {"freeze_backbone", "freeze_prior", "reference_mix", "plot", "no_timing"}
_FLOAT_KEYS = {"learning_rate", "weight_decay", "k_fraction", "margin", "focal_gamma", "focal_alpha",
               "max_grad_norm", "normal_ratio", "contrast"}
_INT_KEYS = {"epochs", "iterations_per_epoch", "batch_size", "n_reference", "prior_samples",
             "image_size", "seed", "shots", "n_normal_train", "n_normal_test", "n_per_class"}


def read_config(path: str | Path) -> dict[str, object]:
    """Flatten an INI config into ``{dest: value}``; section names are checked."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (configparser.MissingSectionHeaderError, configparser.DuplicateSectionError,
            configparser.DuplicateOptionError) as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.message.splitlines()[0]}") from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"{path}:{lineno}: cannot parse config line") from exc
    out: dict[str, object] = {}
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {CONFIG_SECTIONS}")
        for key, raw in parser.items(section):
            dest = key.replace("-", "_")
            try:
                if dest in _BOOL_KEYS:
                    value: object = parser.getboolean(section, key)
                elif dest in _FLOAT_KEYS:
                    value = float(raw)
                elif dest in _INT_KEYS:
                    value = int(raw)
                elif dest == "classes":
                    value = raw.replace(",", " ").split()
                elif dest in ("scales", "seeds"):
                    value = [float(v) if dest == "scales" else int(v) for v in raw.replace(",", " ").split()]
                else:
                    value = raw
            except ValueError as exc:
                raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
            out[dest] = value
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data] [model] [train] [protocol] [eval] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset-root")
    p.add_argument("--dataset-name")
    p.add_argument("--subset")
    p.add_argument("--image-size", type=int)
    p.add_argument("--normal-ratio", type=float)


def _add_protocol(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", choices=("general", "hard"))
    p.add_argument("--shots", type=int, choices=(1, 10))
    p.add_argument("--seen-class")


def _add_train(p: argparse.ArgumentParser, preset: bool = True) -> None:
    if preset:
        p.add_argument("--preset", choices=tuple(PRESETS))
    p.add_argument("--pseudo-source", choices=PSEUDO_KINDS)
    p.add_argument("--outlier-dir")
    p.add_argument("--outlier-exclude")
    p.add_argument("--loss", choices=("deviation", "bce", "focal"))
    p.add_argument("--backbone", choices=("resnet18", "tiny"))
    p.add_argument("--backbone-weights")
    p.add_argument("--freeze-backbone", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--k-fraction", type=float)
    p.add_argument("--n-reference", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--focal-alpha", type=float)
    p.add_argument("--prior-samples", type=int)
    p.add_argument("--freeze-prior", action="store_true", default=None)
    p.add_argument("--reference-mix", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--max-grad-norm", type=float)
    p.add_argument("--scales", type=float, nargs="+")


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plot", action="store_true", default=None, help="write a score histogram")
    p.add_argument("--no-timing", action="store_true", default=None,
                   help="leave the seconds column empty so result files are reproducible byte for byte")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dra", description="Open-set supervised anomaly detection with disentangled abnormality heads.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on one protocol split and write a checkpoint")
    _add_common(p), _add_data(p), _add_protocol(p), _add_train(p)

    p = sub.add_parser("eval", help="score the test split of a trained checkpoint")
    _add_common(p), _add_data(p), _add_eval(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("ablate", help="train and evaluate all five head presets over shared splits")
    _add_common(p), _add_data(p), _add_protocol(p), _add_train(p, preset=False), _add_eval(p)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("synth", help="write a procedurally generated dataset")
    _add_common(p)
    p.add_argument("--n-normal-train", type=int)
    p.add_argument("--n-normal-test", type=int)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--classes", nargs="+")
    p.add_argument("--image-size", type=int)
    p.add_argument("--contrast", type=float)

    p = sub.add_parser("selftest", help="run the built-in oracle and invariant checks")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _known_keys(parser: argparse.ArgumentParser) -> set[str]:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest for p in sub.choices.values() for a in p._actions} - {"help", "config"}


def _options(args: argparse.Namespace, known: set[str]) -> dict[str, object]:
    """Config-file values overridden by explicitly given flags."""
    opts: dict[str, object] = {}
    if getattr(args, "config", None):
        from_file = read_config(args.config)
        unknown = sorted(set(from_file) - known)
        if unknown:
            raise ConfigError(f"{args.config}: unknown option(s) {unknown}")
        opts.update(from_file)
    opts.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    return opts


def _train_config(opts: dict, **override):
    from .trainer import TrainConfig

    names = {f.name for f in dataclasses.fields(TrainConfig)}
    kw = {k: v for k, v in opts.items() if k in names}
    if "scales" in kw:
        kw["scales"] = tuple(kw["scales"])
    kw.update(override)
    return TrainConfig(**kw)


def _catalog(opts: dict):
    from .protocols import ingest_directory

    root = opts.get("dataset_root")
    if not root:
        raise ConfigError("--dataset-root is required")
    return ingest_directory(root, opts.get("image_size", 224), opts.get("dataset_name"))


def _split(catalog, opts: dict, seed: int):
    from .protocols import nest_one_from_ten, sample_general, sample_hard

    protocol = opts.get("protocol", "general")
    shots = int(opts.get("shots", 10))
    ratio = float(opts.get("normal_ratio", 0.75))
    if protocol == "hard":
        seen = opts.get("seen_class")
        if not seen:
            raise ConfigError("--seen-class is required for the hard protocol")
        ten = sample_hard(catalog, 10, seen, seed, ratio)
    else:
        ten = sample_general(catalog, 10, seed, ratio)
    return ten if shots == 10 else nest_one_from_ten(ten, seed)


def _pseudo(config, opts: dict):
    from .trainer import make_pseudo_source

    return make_pseudo_source(config, opts.get("outlier_dir"), opts.get("outlier_exclude"))


def _out_dir(opts: dict) -> Path:
    out = Path(opts.get("out_dir", "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(opts: dict) -> int:
    from .trainer import checkpoint_save, fit

    seed = int(opts.get("seed", 0))
    catalog = _catalog(opts)
    config = _train_config(opts, seed=seed, image_size=opts.get("image_size", 224))
    split = _split(catalog, opts, seed)
    out = _out_dir(opts)
    split.save(out / "split.json")
    model, history = fit(split, config, _pseudo(config, opts), log_path=out / "train_log.jsonl")
    digest = checkpoint_save(model, config, out / "checkpoint.npz")
    (out / "run.json").write_text(json.dumps({
        "dataset_root": str(opts["dataset_root"]), "dataset_name": catalog.name,
        "subset": opts.get("subset", ""), "protocol": split.setting, "shots": split.shots,
        "seen_class": split.seen_class, "seed": seed, "config_hash": digest}, indent=1, sort_keys=True) + "\n")
    print(f"trained {config.preset} for {config.epochs} epochs; checkpoint {out / 'checkpoint.npz'}")
    return 0


def _evaluate(model, config, split, run: dict, out: Path, opts: dict, seconds: float | None):
    from .evaluation import RunReport, auc, plot_score_distribution, score_dataset, write_scores

    t0 = time.perf_counter()
    scored = score_dataset(model, split)
    if seconds is not None:
        seconds += time.perf_counter() - t0
    write_scores(scored, out / "scores.csv")
    report = RunReport(run.get("dataset_name", split.catalog.name), split.setting, split.shots,
                       int(run.get("seed", config.seed)), config.preset, auc(scored), seconds,
                       run.get("subset", ""), config.hash())
    if opts.get("plot"):
        plot_score_distribution(scored, out / "scores.png", f"{config.preset} AUC {report.auc:.3f}")
    return report


def cmd_eval(opts: dict) -> int:
    from .evaluation import write_report_json, write_results
    from .protocols import SplitResult, ingest_directory
    from .trainer import checkpoint_load

    ckpt = opts.get("checkpoint")
    if ckpt is None and opts.get("out_dir"):
        ckpt = str(Path(opts["out_dir"]) / "checkpoint.npz")
    if ckpt is None or not Path(ckpt).is_file():
        print(f"dra eval: no trained model found (checkpoint {ckpt!r} missing); run `dra train` first",
              file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    model, config = checkpoint_load(ckpt)
    run_dir = Path(ckpt).parent
    run = json.loads((run_dir / "run.json").read_text()) if (run_dir / "run.json").is_file() else {}
    root = opts.get("dataset_root") or run.get("dataset_root")
    if not root:
        raise ConfigError("--dataset-root is required (no run.json next to the checkpoint)")
    catalog = ingest_directory(root, config.image_size, run.get("dataset_name"))
    split = SplitResult.load(run_dir / "split.json", catalog)
    out = Path(opts.get("out_dir", run_dir))
    out.mkdir(parents=True, exist_ok=True)
    timing = not opts.get("no_timing")
    report = _evaluate(model, config, split, run, out, opts, time.perf_counter() - t0 if timing else None)
    write_results([report], out / "results.csv", timing)
    write_report_json(report, out / "report.json")
    print(f"AUC {report.auc:.4f} ({config.preset}, {split.setting}, {split.shots}-shot)")
    return 0


def cmd_ablate(opts: dict) -> int:
    from .evaluation import aggregate_runs, write_results, write_summary
    from .trainer import checkpoint_save, fit

    catalog = _catalog(opts)
    seeds = opts.get("seeds") or [int(opts.get("seed", 0)) + k for k in range(3)]
    out = _out_dir(opts)
    timing = not opts.get("no_timing")
    reports = []
    for seed in seeds:
        split = _split(catalog, opts, seed)
        for preset in PRESETS:
            run_dir = out / f"seed{seed}" / preset
            run_dir.mkdir(parents=True, exist_ok=True)
            split.save(run_dir / "split.json")
            config = _train_config(opts, seed=seed, preset=preset, image_size=opts.get("image_size", 224))
            t0 = time.perf_counter()
            model, _ = fit(split, config, _pseudo(config, opts), log_path=run_dir / "train_log.jsonl")
            checkpoint_save(model, config, run_dir / "checkpoint.npz")
            run = {"dataset_name": catalog.name, "subset": opts.get("subset", ""), "seed": seed}
            report = _evaluate(model, config, split, run, run_dir, opts,
                               time.perf_counter() - t0 if timing else None)
            reports.append(report)
            print(f"seed {seed} {preset:7s} AUC {report.auc:.4f}", flush=True)
    write_results(reports, out / "results.csv", timing)
    write_summary(aggregate_runs(reports), out / "summary.csv")
    return 0


def cmd_synth(opts: dict) -> int:
    from .protocols import SynthSpec, synth_generate, write_dataset

    names = {f.name for f in dataclasses.fields(SynthSpec)}
    kw = {k: v for k, v in opts.items() if k in names}
    if "image_size" in opts:
        kw["size"] = opts["image_size"]
    if "classes" in kw:
        kw["classes"] = tuple(kw["classes"])
    spec = SynthSpec(**kw)
    out = _out_dir(opts)
    catalog = write_dataset(synth_generate(spec), out)
    (out / "synth_spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=1, sort_keys=True) + "\n")
    print(f"wrote {sum(catalog.counts().values())} images to {out}: {catalog.counts()}")
    return 0


def cmd_selftest(opts: dict) -> int:
    from .selftest import run_all

    return 0 if run_all(verbose=bool(opts.get("verbose"))) else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "synth": cmd_synth,
            "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = _options(args, _known_keys(parser))
        return COMMANDS[opts.pop("command")](opts)
    except DRAError as exc:
        print(f"dra {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
