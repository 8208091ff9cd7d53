"""Command-line entry point: ``sympkan generate|train|eval|reproduce|presets``.

Exit codes: 0 on success, 2 on usage or format errors, 1 on numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .errors import DivergenceError, FormatError, IntegrationError, NumericalError, SingularityError, UsageError
from .evaluation import evaluate_model, reproduce_table, write_plot_data, write_report_csv
from .models import TrueSystem, load_model
from .presets import MODEL_KINDS, PRESETS, get_preset, scaled
from .systems import build_dataset, read_dataset, write_dataset
from .training import train

log = logging.getLogger("sympkan")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
METRICS = ("train", "test", "energy")

_OVERRIDES_HELP = """\
presets: {presets}

overrides (train, reproduce):
  --steps N          optimizer steps for every model family
  --step-factor F    multiply each preset step count by F
  --trajectories N   total trajectories (split by the preset's train fraction)
  --clean            generate noise-free data

SYMPKAN_SEED sets the default --seed.
"""


class _Usage(Exception):
    """Command-line level usage problem (exit code 2)."""


def reference_rows():
    """Published per-model rows keyed by experiment name."""
    text = resources.files("sympkan").joinpath("data/reference.json").read_text(encoding="utf-8")
    data = json.loads(text)
    data.pop("_about", None)
    return data


def _default_seed():
    raw = os.environ.get("SYMPKAN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise _Usage(f"SYMPKAN_SEED must be an integer, got {raw!r}") from None


def _preset(name):
    if name not in PRESETS:
        raise _Usage(f"unknown preset {name!r}; available presets: {', '.join(PRESETS)}")
    return get_preset(name)


def _apply_overrides(preset, args):
    return scaled(preset, trajectories=getattr(args, "trajectories", None),
                  step_factor=getattr(args, "step_factor", None), steps=getattr(args, "steps", None))


def _write_manifest(out_dir, command, args, files, extra=None):
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    manifest = {
        "command": command,
        "flags": flags,
        "version": __version__,
        "files": sorted(str(Path(f).relative_to(out_dir)) for f in files),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def cmd_generate(args):
    preset = _apply_overrides(_preset(args.preset), args)
    out = Path(args.out)
    ds = build_dataset(preset, seed=args.seed, clean=args.clean)
    files = write_dataset(ds, out)
    _write_manifest(out, "generate", args, files)
    print(f"{preset.name}: {len(ds.train)} train + {len(ds.test)} test trajectories -> {files[0]}")
    return EXIT_OK


def _load_data(path, preset):
    path = Path(path)
    if not path.exists():
        raise _Usage(f"dataset not found: {path}")
    ds = read_dataset(path)
    if ds.system != preset.system:
        raise _Usage(f"dataset system {ds.system.kind} does not match preset {preset.name} ({preset.system.kind})")
    return ds


def cmd_train(args):
    preset = _apply_overrides(_preset(args.preset), args)
    if args.data is not None:
        ds = _load_data(args.data, preset)
    else:
        ds = build_dataset(preset, seed=args.seed, clean=args.clean)
    cfg = preset.config(args.model, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{preset.name}_{args.model}_seed{args.seed}"
    model_path = out / f"{stem}.khm"
    model, history = train(cfg, ds, out_path=model_path, checkpoint_path=out / f"{stem}.checkpoint.khm")
    history_path = out / f"{stem}.history.csv"
    history.write_csv(history_path)
    config_path = out / f"{stem}.config.json"
    config_path.write_text(cfg.to_json() + "\n", encoding="utf-8")
    _write_manifest(out, "train", args, [model_path, history_path, config_path],
                    {"train_loss": history.train_loss, "test_loss": history.test_loss})
    print(f"train loss {history.train_loss:.6g}  test loss {history.test_loss:.6g}  -> {model_path}")
    return EXIT_OK


def cmd_eval(args):
    data = Path(args.data)
    if not data.exists():
        raise _Usage(f"dataset not found: {data}")
    ds = read_dataset(data)
    if args.true_field:
        model, name = TrueSystem(ds.system), "true"
    else:
        if args.model_file is None:
            raise _Usage("eval needs --model-file or --true-field")
        path = Path(args.model_file)
        if not path.exists():
            raise _Usage(f"model file not found: {path}")
        model = load_model(path)
        name = model.kind
    if model.dim != ds.system.dim:
        raise _Usage(f"model dimension {model.dim} does not match dataset dimension {ds.system.dim}")
    preset = get_preset(ds.preset) if ds.preset in PRESETS else None
    report = evaluate_model(model, ds, preset, name=name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"{name}_report.csv"
    write_report_csv([report], report_path)
    plots = write_plot_data({name: model} if name != "true" else {}, ds, out / "plots", preset)
    _write_manifest(out, "eval", args, [report_path, *plots], {"n_diverged": report.n_diverged})
    row = report.scaled_row()
    print(f"{name}: train {row['train_mean']:.4g}  test {row['test_mean']:.4g}  "
          f"energy {row['energy_mean']:.4g}  (x1e-{report.scale})")
    return EXIT_OK


def compare_orderings(name, reports, reference=None):
    """Pairwise ordering of each metric, reproduced vs published.

    Returns a list of dicts with ``metric``, ``pair``, ``published`` and
    ``reproduced`` (each ``"<"`` or ``">="``) and ``agree``.
    """
    reference = reference_rows() if reference is None else reference
    ref = reference.get(name)
    if ref is None:
        return []
    ours = {r.model: r for r in reports}
    out = []
    kinds = [k for k in MODEL_KINDS if k in ours and k in ref]
    for metric in METRICS:
        for i, a in enumerate(kinds):
            for b in kinds[i + 1:]:
                pa, pb = ref[a][metric][0], ref[b][metric][0]
                ra, rb = getattr(ours[a], f"{metric}_mean"), getattr(ours[b], f"{metric}_mean")
                pub = "<" if pa < pb else ">="
                rep = "<" if ra < rb else ">="
                out.append({"metric": metric, "pair": f"{a} vs {b}", "published": pub, "reproduced": rep,
                            "agree": pub == rep})
    return out


def cmd_reproduce(args):
    names = list(PRESETS) if args.experiment == "all" else [args.experiment]
    presets = [_apply_overrides(_preset(n), args) for n in names]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files, summary = [], {}
    for preset in presets:
        data_root = out / "data" / preset.name

        def factory(seed, preset=preset, data_root=data_root):
            ds = build_dataset(preset, seed=seed, clean=args.clean)
            write_dataset(ds, data_root / f"seed{seed}")
            return ds

        reports = reproduce_table(preset, n_repeats=args.repeats, seed=args.seed, out_dir=out,
                                  dataset_factory=factory)
        orderings = compare_orderings(preset.name, reports)
        summary[preset.name] = {
            "rows": {r.model: r.scaled_row() for r in reports},
            "orderings": orderings,
            "agreement": f"{sum(o['agree'] for o in orderings)}/{len(orderings)}",
        }
        files += [out / f"{preset.name}_table.csv", out / f"{preset.name}_report.json"]
        print(f"== {preset.name} (x1e-{preset.scale}, "
              f"{args.repeats} repeat(s))")
        for r in reports:
            row = r.scaled_row()
            print(f"  {r.model:9s} train {row['train_mean']:10.4g} +- {row['train_std']:<10.3g}"
                  f" test {row['test_mean']:10.4g} +- {row['test_std']:<10.3g}"
                  f" energy {row['energy_mean']:10.4g} +- {row['energy_std']:.3g}")
        for o in orderings:
            mark = "agree" if o["agree"] else "DIFFER"
            print(f"  {o['metric']:6s} {o['pair']:16s} published {o['published']:2s}"
                  f" reproduced {o['reproduced']:2s} {mark}")
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(summary_path)
    _write_manifest(out, "reproduce", args, files)
    return EXIT_OK


def cmd_presets(args):
    names = list(PRESETS) if args.name is None else [args.name]
    dump = {n: _preset(n).to_dict() for n in names}
    print(json.dumps(dump, indent=2, sort_keys=True))
    return EXIT_OK


def _add_overrides(p):
    p.add_argument("--steps", type=int, help="override optimizer steps for every model")
    p.add_argument("--step-factor", type=float, help="scale every preset step count")
    p.add_argument("--trajectories", type=int, help="override the total number of trajectories")
    p.add_argument("--clean", action="store_true", help="generate noise-free data")


def build_parser():
    epilog = _OVERRIDES_HELP.format(presets=", ".join(PRESETS))
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="sympkan", description="Learn Hamiltonians with spline-edge networks.",
                                     epilog=epilog, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    seed_help = "random seed (default: $SYMPKAN_SEED or 0)"

    p = sub.add_parser("generate", help="generate a benchmark dataset", epilog=epilog, formatter_class=fmt)
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--clean", action="store_true", help="generate noise-free data")
    p.add_argument("--trajectories", type=int, help="override the total number of trajectories")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model family", epilog=epilog, formatter_class=fmt)
    p.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESETS)}")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--data", help="dataset (.jsonl, .meta.json or directory); generated from the preset if omitted")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--seed", type=int, help=seed_help)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a dataset", epilog=epilog, formatter_class=fmt)
    p.add_argument("--model-file", help="model file written by train")
    p.add_argument("--true-field", action="store_true", help="evaluate the ground-truth field instead of a model")
    p.add_argument("--data", required=True, help="dataset (.jsonl, .meta.json or directory)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="train and evaluate all model families on an experiment",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--experiment", default="all", help=f"one of: {', '.join(PRESETS)}, all (default: all)")
    p.add_argument("--repeats", type=int, default=3, help="seeds per model family (default: 3)")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--out", default="results", help="output directory (default: results)")
    _add_overrides(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("presets", help="print presets as JSON", epilog=epilog, formatter_class=fmt)
    p.add_argument("name", nargs="?", help="single preset to print")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        if getattr(args, "repeats", 1) < 1:
            raise _Usage("--repeats must be >= 1")
        return args.func(args)
    except (_Usage, UsageError, FormatError, FileNotFoundError, ValueError, KeyError, TypeError) as exc:
        print(f"sympkan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, IntegrationError, SingularityError, DivergenceError) as exc:
        print(f"sympkan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
