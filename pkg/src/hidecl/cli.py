"""Command-line entry points: experiment runner, ablation grid, theorem
checks, and offline report regeneration.

Config files are flat JSON with one section per subsystem; every run
echoes its resolved config next to the outputs so results can be
reproduced exactly. A status file marks whether outputs are complete.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, PromptInjectionPlan, pretrain_backbone
from .engine import AblationConfig, HidePrompt, TrainConfig
from .harness import (
    accuracy_matrix,
    embedding_dataset,
    load_embeddings,
    make_stream,
    metrics,
    synth_dataset,
)
from .statistics import MODES as STATS_MODES
from .theory import run_all_checks

DEFAULT_CONFIG = {
    "backbone": {
        "image_size": 32, "patch_size": 4, "channels": 3, "dim": 64,
        "depth": 4, "heads": 4, "pretrain_classes": 8,
        "pretrain_per_class": 40, "pretrain_epochs": 10,
        "pretrain_lr": 0.001, "pretrain_seed": 1000,
    },
    "injection": {"mode": "PreT", "layers": [0, 1], "prompt_len": 20},
    "stream": {
        "setting": "CIL", "tasks": 5, "dataset": "synthetic",
        "n_classes": 50, "per_class": 30, "noise": 0.08, "shift": 2,
        "seed": 0,
    },
    "optimizer": {"lr": 0.005, "epochs": 20, "batch_size": 32,
                  "pseudo_batch": 64, "head_steps": 4},
    "hyper": {"alpha": 0.1, "tau": 0.8, "lambda": 0.1},
    "stats": {"mode": "full-gaussian", "cr_sample": False},
    "ablation": {"pe": True, "tii": True, "tap": True, "cr": True},
    "out_dir": "runs/default",
}


class ConfigError(ValueError):
    """Invalid experiment config; `field` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


def _merge(defaults: dict, override: dict, prefix="") -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in override and isinstance(dval, dict):
            out[key] = _merge(dval, override[key], f"{prefix}{key}.")
        elif key in override:
            out[key] = override[key]
        else:
            out[key] = dval
    for key in override:
        if key not in defaults:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    return out


def load_config(path: str | Path) -> dict:
    """Parse and validate an experiment config against the defaults."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("(config path)", f"no such file: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("(config json)", str(exc))
    cfg = _merge(DEFAULT_CONFIG, raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    st = cfg["stream"]
    if st["setting"] not in ("CIL", "DIL", "TIL"):
        raise ConfigError("stream.setting", f"unknown setting {st['setting']!r}")
    if st["tasks"] < 1:
        raise ConfigError("stream.tasks", "need at least one task")
    if st["dataset"] != "synthetic" and not Path(st["dataset"]).exists():
        raise ConfigError("stream.dataset", f"no such file: {st['dataset']}")
    if st["dataset"] == "synthetic" and st["setting"] != "DIL" \
            and st["tasks"] > st["n_classes"]:
        raise ConfigError("stream.tasks", "more tasks than classes")
    bb = cfg["backbone"]
    if bb["image_size"] % bb["patch_size"] != 0:
        raise ConfigError("backbone.patch_size",
                          "image_size must be divisible by patch_size")
    if bb["dim"] % bb["heads"] != 0:
        raise ConfigError("backbone.heads", "dim must be divisible by heads")
    inj = cfg["injection"]
    if inj["mode"] not in ("ProT", "PreT"):
        raise ConfigError("injection.mode", f"unknown mode {inj['mode']!r}")
    if inj["mode"] == "PreT" and inj["prompt_len"] % 2 != 0:
        raise ConfigError("injection.prompt_len", "PreT needs an even length")
    for l in inj["layers"]:
        if not 0 <= l < bb["depth"]:
            raise ConfigError("injection.layers", f"layer {l} outside depth")
    hy = cfg["hyper"]
    if not 0.0 <= hy["alpha"] <= 1.0:
        raise ConfigError("hyper.alpha", "must lie in [0, 1]")
    if hy["tau"] <= 0:
        raise ConfigError("hyper.tau", "must be positive")
    if cfg["stats"]["mode"] not in STATS_MODES:
        raise ConfigError("stats.mode", f"unknown mode {cfg['stats']['mode']!r}")
    if cfg["optimizer"]["epochs"] < 0 or cfg["optimizer"]["batch_size"] < 1:
        raise ConfigError("optimizer.epochs", "bad optimizer settings")


# -- experiment assembly -------------------------------------------------------


def build_backbone(cfg: dict, seed: int) -> Backbone:
    bcfg = cfg["backbone"]
    if cfg["stream"]["dataset"] != "synthetic":
        vectors, _ = load_embeddings(cfg["stream"]["dataset"])
        return Backbone.embedding_mode(vectors.shape[1])
    config = BackboneConfig(
        image_size=bcfg["image_size"], patch_size=bcfg["patch_size"],
        channels=bcfg["channels"], dim=bcfg["dim"], depth=bcfg["depth"],
        heads=bcfg["heads"])
    aux = synth_dataset(
        bcfg["pretrain_classes"], bcfg["pretrain_per_class"],
        image_size=bcfg["image_size"], channels=bcfg["channels"],
        noise=cfg["stream"]["noise"],
        seed=bcfg["pretrain_seed"] + seed)
    return pretrain_backbone(aux.train_x, aux.train_y, config,
                             epochs=bcfg["pretrain_epochs"], seed=seed,
                             lr=bcfg["pretrain_lr"])


def build_stream(cfg: dict, seed: int):
    st = cfg["stream"]
    if st["dataset"] == "synthetic":
        data = synth_dataset(st["n_classes"], st["per_class"],
                             image_size=cfg["backbone"]["image_size"],
                             channels=cfg["backbone"]["channels"],
                             noise=st["noise"], shift=st["shift"],
                             seed=seed)
    else:
        vectors, labels = load_embeddings(st["dataset"])
        data = embedding_dataset(vectors, labels, seed=seed)
    return make_stream(data, st["setting"], st["tasks"], seed=seed)


def build_train_config(cfg: dict, seed: int,
                       ablation: AblationConfig | None = None) -> TrainConfig:
    st, opt, hy = cfg["stream"], cfg["optimizer"], cfg["hyper"]
    if st["dataset"] == "synthetic":
        n_classes = st["n_classes"]
    else:
        _, labels = load_embeddings(st["dataset"])
        n_classes = int(labels.max()) + 1
    abl = ablation if ablation is not None else AblationConfig(**cfg["ablation"])
    return TrainConfig(
        max_tasks=st["tasks"], max_classes=n_classes,
        alpha=hy["alpha"], tau=hy["tau"], lam=hy["lambda"],
        lr=opt["lr"], epochs=opt["epochs"], batch_size=opt["batch_size"],
        pseudo_batch=opt["pseudo_batch"], head_steps=opt["head_steps"],
        stats_mode=cfg["stats"]["mode"], cr_sample=cfg["stats"]["cr_sample"],
        seed=seed, ablation=abl)


def build_plan(cfg: dict) -> PromptInjectionPlan:
    inj = cfg["injection"]
    return PromptInjectionPlan(mode=inj["mode"], layers=tuple(inj["layers"]),
                               prompt_len=inj["prompt_len"])


# -- output writers ------------------------------------------------------------


def _write_status(out: Path, state: str, error: str | None = None) -> None:
    payload = {"state": state}
    if error:
        payload["error"] = error
    (out / "status.json").write_text(json.dumps(payload, sort_keys=True))


def write_accuracy_csv(a: np.ndarray, path: Path) -> None:
    T = a.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task"] + [f"after_{t}" for t in range(1, T + 1)])
        for i in range(T):
            row = [str(i + 1)]
            for t in range(T):
                # repr round-trips exactly, so `report` can rebuild metrics
                row.append("" if np.isnan(a[i, t]) else repr(float(a[i, t])))
            writer.writerow(row)


def read_accuracy_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    T = len(rows) - 1
    a = np.full((T, T), np.nan)
    for i, row in enumerate(rows[1:]):
        for t, cell in enumerate(row[1:]):
            if cell:
                a[i, t] = float(cell)
    return a


def write_metrics_json(a: np.ndarray, path: Path) -> dict:
    faa, caa, ffm = metrics(a)
    T = a.shape[0]
    per_task_aa = [float(np.mean(a[: t + 1, t])) for t in range(T)]
    payload = {"faa": faa, "caa": caa, "ffm": ffm, "per_task_aa": per_task_aa}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return payload


def plot_aa_curve(per_task_aa: list[float], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(1, len(per_task_aa) + 1)
    ax.plot(xs, per_task_aa, marker="o")
    ax.set_xlabel("tasks learned")
    ax.set_ylabel("average accuracy")
    ax.set_xticks(xs)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- subcommands ----------------------------------------------------------------


def cmd_run(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _write_status(out, "running")
    try:
        seed = cfg["stream"]["seed"]
        backbone = build_backbone(cfg, seed)
        stream = build_stream(cfg, seed)
        model = HidePrompt(backbone, None if backbone.is_embedding_mode
                           else build_plan(cfg), build_train_config(cfg, seed))
        a = accuracy_matrix(model, stream)
        write_accuracy_csv(a, out / "accuracy_matrix.csv")
        payload = write_metrics_json(a, out / "metrics.json")
        (out / "config_echo.json").write_text(
            json.dumps(cfg, sort_keys=True, indent=2) + "\n")
        plot_aa_curve(payload["per_task_aa"], out / "aa_curve.png")
        model.save(out / "model.hide")
    except Exception as exc:  # noqa: BLE001 - status file must record failures
        _write_status(out, "failed", repr(exc))
        raise
    _write_status(out, "ok")
    print(f"faa={payload['faa']:.4f} caa={payload['caa']:.4f} "
          f"ffm={payload['ffm'] if payload['ffm'] is not None else 'n/a'}")
    return 0


ABLATION_GRID = [
    AblationConfig(pe=False, tii=False, tap=False, cr=False),
    AblationConfig(pe=True, tii=False, tap=False, cr=False),
    AblationConfig(pe=True, tii=True, tap=True, cr=False),
    AblationConfig(pe=True, tii=True, tap=True, cr=True),
]


def _ablation_cell(cfg: dict, abl_kwargs: dict, seed: int) -> float:
    """One (row, seed) training cell; top level so process pools can run it."""
    abl = AblationConfig(**abl_kwargs)
    backbone = build_backbone(cfg, seed)
    stream = build_stream(cfg, seed)
    model = HidePrompt(backbone, None if backbone.is_embedding_mode
                       else build_plan(cfg),
                       build_train_config(cfg, seed, ablation=abl))
    faa, _, _ = metrics(accuracy_matrix(model, stream))
    return faa


def cmd_ablate(cfg: dict, out: Path, seeds: list[int]) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _write_status(out, "running")
    try:
        workers = int(os.environ.get("HIDECL_THREADS", "1"))
        cells = [(row, abl, seed) for row, abl in enumerate(ABLATION_GRID)
                 for seed in seeds]
        results: dict[tuple[int, int], float] = {}
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {
                    pool.submit(_ablation_cell, cfg, asdict(abl), seed): (row, seed)
                    for row, abl, seed in cells}
                for fut, key in futures.items():
                    results[key] = fut.result()
        else:
            for row, abl, seed in cells:
                results[(row, seed)] = _ablation_cell(cfg, asdict(abl), seed)
        rows = []
        for row, abl in enumerate(ABLATION_GRID):
            faas = [results[(row, seed)] for seed in seeds]
            rows.append({"label": abl.label(), "faa_per_seed": faas,
                         "mean_faa": float(np.mean(faas))})
        (out / "ablation.json").write_text(
            json.dumps({"seeds": seeds, "rows": rows}, sort_keys=True,
                       indent=2) + "\n")
        with open(out / "ablation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "mean_faa"]
                            + [f"seed_{s}" for s in seeds])
            for r in rows:
                writer.writerow([r["label"], f"{r['mean_faa']:.6f}"]
                                + [f"{v:.6f}" for v in r["faa_per_seed"]])
        (out / "config_echo.json").write_text(
            json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    except Exception as exc:  # noqa: BLE001
        _write_status(out, "failed", repr(exc))
        raise
    _write_status(out, "ok")
    for r in rows:
        print(f"{r['label']:>24}: mean FAA {r['mean_faa']:.4f}")
    return 0


def cmd_pretrain(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _write_status(out, "running")
    try:
        seed = cfg["stream"]["seed"]
        backbone = build_backbone(cfg, seed)
        from . import container
        entries = {f"backbone/{k}": v for k, v in backbone.params.items()}
        c = backbone.config
        entries["backbone/meta"] = np.array(
            [c.image_size, c.patch_size, c.channels, c.dim, c.depth,
             c.heads, c.mlp_ratio, 0.0 if c.dtype == "float32" else 1.0])
        container.save_container(out / "backbone.hide", entries)
        (out / "config_echo.json").write_text(
            json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    except Exception as exc:  # noqa: BLE001
        _write_status(out, "failed", repr(exc))
        raise
    _write_status(out, "ok")
    print(f"frozen backbone checksum {backbone.frozen_checksum}")
    return 0


def cmd_theory_check(trials: int, seed: int, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    reports = run_all_checks(trials=trials, seed=seed)
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    (out / "theory_report.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    ok = True
    for name, rep in reports.items():
        print(f"{name:>14}: {rep.verdict} (max violation {rep.max_violation:.3e})")
        ok = ok and rep.verdict == "pass"
    return 0 if ok else 1


def cmd_report(out: Path) -> int:
    matrix_path = out / "accuracy_matrix.csv"
    if not matrix_path.exists():
        print(f"error: no accuracy_matrix.csv under {out}", file=sys.stderr)
        return 2
    a = read_accuracy_csv(matrix_path)
    payload = write_metrics_json(a, out / "metrics.json")
    plot_aa_curve(payload["per_task_aa"], out / "aa_curve.png")
    T = a.shape[0]
    print("task accuracies after each step:")
    for i in range(T):
        cells = ["  .   " if np.isnan(a[i, t]) else f"{a[i, t]:.3f}"
                 for t in range(T)]
        print(f"  task {i + 1}: " + " ".join(cells))
    ffm = payload["ffm"]
    print(f"FAA {payload['faa']:.4f}  CAA {payload['caa']:.4f}  "
          f"FFM {ffm if ffm is not None else 'n/a'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="hidecl",
        description="desk-scale continual learning with task-specific prompts")
    sub = parser.add_subparsers(dest="command")

    for name in ("pretrain", "run", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    sub.choices["ablate"].add_argument(
        "--seeds", type=int, nargs="*", default=None,
        help="seeds for the grid (default: config seed, +1, +2)")

    p = sub.add_parser("theory-check")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/theory")

    p = sub.add_parser("report")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    try:
        if args.command == "theory-check":
            return cmd_theory_check(args.trials, args.seed, Path(args.out))
        if args.command == "report":
            return cmd_report(Path(args.out))
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["stream"]["seed"] = args.seed
        out = Path(args.out) if args.out else Path(cfg["out_dir"])
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "ablate":
            seeds = args.seeds if args.seeds else \
                [cfg["stream"]["seed"] + k for k in range(3)]
            return cmd_ablate(cfg, out, seeds)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    parser.print_usage(sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
