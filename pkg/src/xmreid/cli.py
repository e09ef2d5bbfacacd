"""Command-line entry point: generate | train | eval | ablate.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 training abort.
"""

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

from .checkpoint import load_model
from .config import load_experiment_config
from .datagen import GeneratorConfig, generate_dataset, load_manifest, save_manifest, split_train_test
from .errors import (ConfigurationError, ContractError, FormatError, ModelError,
                     NumericalError, ProtocolError, SamplingError, TrainingAbort)
from .evaluation import DIRECTIONS, evaluate
from .losses import MODES
from .trainer import fit

log = logging.getLogger("xmreid")


def _add_common(parser):
    parser.add_argument("--config", default=None, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override dataset and train seeds")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="dotted-path config override")


def build_parser():
    parser = argparse.ArgumentParser(prog="xmreid",
                                     description="Cross-modality retrieval experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="render a synthetic two-modality dataset")
    _add_common(p_gen)

    p_train = sub.add_parser("train", help="train one model")
    _add_common(p_train)
    p_train.add_argument("--data", required=True, help="dataset directory (holds manifest.json)")
    p_train.add_argument("--mode", default=None, choices=MODES)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--direction", default="both", choices=DIRECTIONS + ("both",))
    p_eval.add_argument("--ks", default="1,5,10,20", help="comma-separated rank cutoffs")

    p_abl = sub.add_parser("ablate", help="train and evaluate all four modes")
    _add_common(p_abl)
    p_abl.add_argument("--data", required=True)
    p_abl.add_argument("--seeds", default="1,2,3", help="comma-separated training seeds")
    return parser


def cmd_generate(args):
    config = load_experiment_config(args.config, args.overrides, args.seed)
    out = Path(args.out or "dataset")
    generator = GeneratorConfig(
        num_identities=config.dataset.num_identities,
        images_per_identity_per_modality=config.dataset.images_per_identity_per_modality,
        image_size=tuple(config.dataset.image_size),
        stripes=config.dataset.stripes,
        noise_level=config.dataset.noise_level,
        clutter_probability=config.dataset.clutter_probability,
        min_code_distance=config.dataset.min_code_distance,
        seed=config.dataset.seed,
    )
    manifest = generate_dataset(generator, out)
    manifest = split_train_test(manifest, config.dataset.train_fraction, config.dataset.seed)
    save_manifest(manifest, out / "manifest.json")
    config.save(out / "config.json")
    log.info("wrote %d records to %s", len(manifest.records), out)
    print(out / "manifest.json")
    return 0


def cmd_train(args):
    overrides = list(args.overrides)
    if args.mode:
        overrides.append("train.mode=%s" % args.mode)
    config = load_experiment_config(args.config, overrides, args.seed)
    out = Path(args.out or "run")
    result = fit(config, args.data, out, resume_from=args.resume)
    print(result.checkpoint_path)
    return 0


def _parse_ks(text):
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise ConfigurationError("invalid --ks value %r" % text) from exc
    if not ks or any(k < 1 for k in ks):
        raise ConfigurationError("rank cutoffs must be positive integers")
    return ks


def cmd_eval(args):
    ks = _parse_ks(args.ks)
    model, _header, _config = load_model(args.checkpoint)
    manifest = load_manifest(args.data)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    directions = DIRECTIONS if args.direction == "both" else (args.direction,)
    for direction in directions:
        report = evaluate(model, manifest, direction, ks)
        stem = out / ("eval_%s" % direction.replace("-", "_"))
        report.save_json(stem.with_suffix(".json"))
        report.save_csv(stem.with_suffix(".csv"))
        log.info("%s rank-1 %.4f mAP %.4f", direction, report.ranks[min(ks)], report.mean_ap)
        print(stem.with_suffix(".json"))
    return 0


def cmd_ablate(args):
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigurationError("invalid --seeds value %r" % args.seeds) from exc
    if not seeds:
        raise ConfigurationError("at least one seed is required")
    out = Path(args.out or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.data)
    rows = []
    for mode in MODES:
        for seed in seeds:
            overrides = list(args.overrides) + ["train.mode=%s" % mode]
            config = load_experiment_config(args.config, overrides, seed)
            run_dir = out / ("%s_seed%d" % (mode.replace("+", ""), seed))
            result = fit(config, args.data, run_dir)
            model, _, _ = load_model(result.checkpoint_path)
            for direction in DIRECTIONS:
                report = evaluate(model, manifest, direction, config.eval.ks)
                rows.append({
                    "mode": mode, "seed": seed, "direction": direction,
                    **{("rank%d" % k): v for k, v in sorted(report.ranks.items())},
                    "mAP": report.mean_ap,
                })
            log.info("finished %s seed %d", mode, seed)
    summary = _summarize(rows)
    (out / "ablation.json").write_text(json.dumps({"runs": rows, "summary": summary}, indent=2) + "\n")
    _write_ablation_csv(out / "ablation.csv", rows, summary)
    print(out / "ablation.csv")
    return 0


def _summarize(rows):
    grouped = {}
    for row in rows:
        grouped.setdefault((row["mode"], row["direction"]), []).append(row)
    summary = []
    for (mode, direction), group in grouped.items():
        entry = {"mode": mode, "direction": direction, "runs": len(group)}
        for key in group[0]:
            if key.startswith("rank") or key == "mAP":
                values = [g[key] for g in group]
                entry["%s_mean" % key] = statistics.fmean(values)
                entry["%s_std" % key] = statistics.pstdev(values) if len(values) > 1 else 0.0
        summary.append(entry)
    return summary


def _write_ablation_csv(path, rows, summary):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        keys = list(rows[0].keys())
        writer.writerow(keys)
        for row in rows:
            writer.writerow([row[k] for k in keys])
        writer.writerow([])
        skeys = list(summary[0].keys())
        writer.writerow(skeys)
        for entry in summary:
            writer.writerow([entry[k] for k in skeys])


_COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, ContractError, ProtocolError, SamplingError) as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2
    except (OSError, FormatError, ModelError) as exc:
        print("i/o error: %s" % exc, file=sys.stderr)
        return 3
    except (TrainingAbort, NumericalError) as exc:
        print("training aborted: %s" % exc, file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
