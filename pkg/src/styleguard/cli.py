"""Command-line surface: protect, attack, mimic, evaluate, plot.

Every run directory is self-describing: the resolved configuration and
seed written next to the outputs are sufficient to reproduce it
bit-exactly. Exit codes: 0 success, 2 configuration error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import torch

from styleguard.config import (
    build_mimicry_spec,
    build_protection_config,
    dump_resolved,
    load_config,
)
from styleguard.data import load_image_batch, save_image_batch, synthetic_style_images
from styleguard.errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    VocabularyError,
)
from styleguard.evaluate import evaluate_protection, generate_set, mimic_finetune, preprocess_images
from styleguard.models import save_checkpoint
from styleguard.protect import ProtectionRunError, RunArtifacts, run_styleguard
from styleguard.rng import derive_seed, make_generator
from styleguard.transforms import PurifierSpec, TransformSpec
from styleguard.zoo import Zoo, build_zoo

TRANSFORM_ATTACKS = ("identity", "gaussian_noise", "center_crop_resize", "horizontal_flip",
                     "gaussian_blur")


# ---------------------------------------------------------------------------
# Shared helpers


def _load_data(cfg: dict) -> tuple[torch.Tensor, torch.Tensor]:
    d = cfg["data"]
    if d["source"] == "synthetic":
        x_clean = synthetic_style_images(
            d["style"], d["n_images"], d["image_size"], d["palette_seed"]
        )
        x_target = synthetic_style_images(
            d["target_style"], d["n_target"], d["image_size"], d["palette_seed"] + 1
        )
        return x_clean, x_target
    if d["source"] == "folder":
        if not d["folder"] or not d["target_folder"]:
            raise ConfigError("folder source needs both data.folder and data.target_folder")
        return load_image_batch(d["folder"]), load_image_batch(d["target_folder"])
    raise ConfigError(f"unknown data source {d['source']!r}")


def _attack_entry(cfg: dict, name: str) -> dict:
    for entry in cfg["attack"]:
        if entry["name"] == name:
            return entry
    raise ConfigError(f"unknown attack {name!r}; configured: {[a['name'] for a in cfg['attack']]}")


def _attack_spec(entry: dict, zoo: Zoo):
    kind = entry["kind"]
    if kind in TRANSFORM_ATTACKS:
        params = {k: v for k, v in entry.items() if k in ("noise_sigma", "crop_ratio", "blur_kernel")}
        return TransformSpec(kind=kind, **params)
    if kind in ("diffpure", "noise_upscale"):
        which = entry.get("purifier", "craft")
        if which == "craft":
            model = zoo.purifier_craft
        elif which == "heldout":
            model = zoo.purifier_heldout
        else:
            raise ConfigError(f"attack purifier must be 'craft' or 'heldout', got {which!r}")
        return PurifierSpec(
            kind=kind,
            model=model,
            steps=entry.get("steps", 5),
            noise_sigma=entry.get("noise_sigma", 0.1),
        )
    raise ConfigError(f"unknown attack kind {kind!r}")


def _preprocessing_for(cfg: dict, zoo: Zoo):
    name = cfg["mimic"]["preprocessing"]
    if name in ("", "none"):
        entry = {"name": "none", "kind": "identity"}
    else:
        entry = _attack_entry(cfg, name)
    spec = _attack_spec(entry, zoo)
    if isinstance(spec, TransformSpec) and spec.kind == "identity":
        return None
    return spec


def _write_trace_csv(trace: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "denoise", "upscale", "style", "total"])
        writer.writeheader()
        for row in trace:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in writer.fieldnames})


def _write_run_meta(out: Path, cfg: dict, complete: bool, extra: dict | None = None) -> None:
    meta = {"seed": cfg["seed"], "complete": complete}
    if extra:
        meta.update(extra)
    with open(out / "run.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_config(run_dir: Path) -> dict:
    path = run_dir / "resolved_config.json"
    if not path.is_file():
        raise DataError(f"{run_dir} has no resolved_config.json (not a run directory?)")
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Commands


def cmd_protect(args) -> int:
    cfg = load_config(args.config, overrides={"seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x_clean, x_target = _load_data(cfg)
    zoo = build_zoo(cfg["models"], log=lambda msg: print(msg))
    pcfg = build_protection_config(cfg)

    def write_artifacts(art: RunArtifacts) -> None:
        save_image_batch(out / "clean", x_clean, "clean")
        save_image_batch(out / "target", x_target, "target")
        save_image_batch(out / "protected", art.x_protected, "protected")
        _write_trace_csv(art.loss_trace, out / "loss_trace.csv")
        dump_resolved(cfg, out / "resolved_config.json")
        _write_run_meta(out, cfg, art.complete, {"n_images": int(x_clean.shape[0])})

    try:
        artifacts = run_styleguard(pcfg, x_clean, x_target, zoo.crafting_ensembles(), zoo.sched)
    except ProtectionRunError as exc:
        write_artifacts(exc.artifacts)
        print(f"protect: run aborted, partial artifacts in {out}: {exc}", file=sys.stderr)
        raise
    write_artifacts(artifacts)
    print(f"protect: {x_clean.shape[0]} images -> {out}")
    return 0


def cmd_attack(args) -> int:
    run_dir = Path(args.run)
    cfg = _run_config(run_dir) if args.config is None else load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    entry = _attack_entry(cfg, args.attack)
    zoo = build_zoo(cfg["models"])
    spec = _attack_spec(entry, zoo)

    x = load_image_batch(run_dir / "protected")
    rng = make_generator(seed, "attack", args.attack)
    purified = preprocess_images(x, spec, rng, zoo.sched)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image_batch(out / "purified", purified, "purified")
    with open(out / "attack.json", "w") as fh:
        json.dump(
            {"source_run": str(run_dir), "attack": entry, "seed": seed},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(f"attack: {entry['name']} on {x.shape[0]} images -> {out}")
    return 0


def cmd_mimic(args) -> int:
    images_dir = Path(args.images)
    cfg = load_config(args.config, overrides={"seed": args.seed})
    zoo = build_zoo(cfg["models"])
    x_train = load_image_batch(images_dir)
    spec = build_mimicry_spec(cfg, preprocessing=_preprocessing_for(cfg, zoo))
    seed = cfg["seed"]

    fit = mimic_finetune(
        copy.deepcopy(zoo.attacker_base), x_train, spec, zoo.sched, make_generator(seed, "mimic")
    )
    generated = generate_set(
        fit.model,
        spec.instance_token,
        cfg["report"]["n_generate"],
        zoo.sched,
        derive_seed(seed, "generate"),
        size=tuple(x_train.shape[-2:]),
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(fit.model, zoo.sched, out / "model.ckpt")
    save_image_batch(out / "generated", generated, "gen")
    with open(out / "mimic.json", "w") as fh:
        json.dump(
            {
                "method": spec.method,
                "steps": spec.steps,
                "seed": seed,
                "final_loss": fit.loss_trace[-1],
                "first_loss": fit.loss_trace[0],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(f"mimic: {spec.method} on {x_train.shape[0]} images -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    cfg = load_config(args.config) if args.config else _run_config(run_dirs[0])
    seed = args.seed if args.seed is not None else cfg["seed"]
    zoo = build_zoo(cfg["models"])

    warnings = []
    run_seeds = {}
    for rd in run_dirs:
        meta_path = rd / "run.json"
        if meta_path.is_file():
            with open(meta_path) as fh:
                run_seeds[rd.name] = json.load(fh).get("seed")
    if len(set(run_seeds.values())) > 1:
        warnings.append(f"runs crafted with mismatched seeds: {run_seeds}")

    rows = []
    for rd in run_dirs:
        x_clean = load_image_batch(rd / "clean")
        x_prot = load_image_batch(rd / "protected")
        for entry in cfg["attack"]:
            spec = _attack_spec(entry, zoo)
            preprocessing = None if (isinstance(spec, TransformSpec) and spec.kind == "identity") else spec
            mim = build_mimicry_spec(cfg, preprocessing=preprocessing)
            report = evaluate_protection(
                x_clean,
                x_prot,
                mim,
                eval_prompts=(mim.instance_token,),
                seeds=seed,
                base_model=zoo.attacker_base,
                sched=zoo.sched,
                n_generate=cfg["report"]["n_generate"],
                knn_k=cfg["report"]["knn_k"],
                include_ims=cfg["report"]["include_ims"],
            )
            rows.append(report.csv_row(run_id=rd.name, method=mim.method,
                                       preprocessing=entry["name"]))
            print(
                f"evaluate: {rd.name} / {entry['name']}: "
                f"fid={report.fid:.3f} precision={report.precision:.3f}"
            )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fieldnames = ["run_id", "method", "preprocessing", "fid", "precision", "ims",
                  "success_rate", "seeds"]
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "report.txt", "w") as fh:
        fh.write(_format_report(rows, warnings))
    print(f"evaluate: report -> {out}")
    return 0


def _format_report(rows: list[dict], warnings: list[str]) -> str:
    lines = ["protection evaluation", "=" * 60]
    for warning in warnings:
        lines.append(f"WARNING: {warning}")
    attacks = sorted({r["preprocessing"] for r in rows})
    runs = sorted({r["run_id"] for r in rows})
    lines.append(f"{'run':<24}{'attack':<18}{'FID':>9}{'Prec.':>8}")
    for run in runs:
        for attack in attacks:
            for r in rows:
                if r["run_id"] == run and r["preprocessing"] == attack:
                    lines.append(
                        f"{run:<24}{attack:<18}{float(r['fid']):>9.3f}{float(r['precision']):>8.3f}"
                    )
    lines.append("")
    return "\n".join(lines)


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report = Path(args.report)
    if not report.is_file():
        raise DataError(f"report not found: {report}")
    with open(report, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"report {report} is empty")

    attacks = sorted({r["preprocessing"] for r in rows})
    runs = sorted({r["run_id"] for r in rows})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    manifest = {"figures": []}
    for metric in ("fid", "precision"):
        fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(attacks), 3.6))
        width = 0.8 / max(len(runs), 1)
        for j, run in enumerate(runs):
            values = []
            for attack in attacks:
                cell = [float(r[metric]) for r in rows
                        if r["run_id"] == run and r["preprocessing"] == attack]
                values.append(sum(cell) / len(cell) if cell else 0.0)
            positions = [i + j * width for i in range(len(attacks))]
            ax.bar(positions, values, width=width, label=run)
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(attacks))])
        ax.set_xticklabels(attacks, rotation=30, ha="right")
        ax.set_ylabel(metric.upper() if metric == "fid" else "precision")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        manifest["figures"].append({"file": path.name, "metric": metric,
                                    "attacks": attacks, "runs": runs})
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"plot: {len(manifest['figures'])} figures -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="styleguard",
        description="Craft, attack and evaluate anti-mimicry image protection at toy scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protect", help="craft protected images")
    p.add_argument("--config", default=None, help="TOML config (defaults apply if omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="run directory to write")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("attack", help="apply a preprocessing attack to a protected set")
    p.add_argument("--run", required=True, help="protect run directory")
    p.add_argument("--attack", required=True, help="attack name from the config")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("mimic", help="fine-tune a fresh model on an image set")
    p.add_argument("--images", required=True, help="directory of training PNGs")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mimic)

    p = sub.add_parser("evaluate", help="score protection of one or more runs")
    p.add_argument("--runs", nargs="+", required=True, help="protect run directories")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="bar charts from an evaluation report")
    p.add_argument("--report", required=True, help="report.csv path")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ProtectionRunError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
