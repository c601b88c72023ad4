"""Command-line pipeline: gen, train-source, adapt, tta, eval.

Every subcommand takes an optional JSON config file (``--config``) whose
keys mirror the flags; flags given on the command line win over the file,
and the ``SFSA_SEED`` environment variable overrides the file's seed (an
explicit ``--seed`` still wins). Each run writes ``report.json`` (the
resolved config plus metrics) and, where models are scored, ``metrics.csv``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or format error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .adapt import AdaptConfig, AdaptState, TtaConfig, adapt, history_csv, prepare_source, tta_episode
from .bench import (
    DEFAULT_GROUPS,
    BenchmarkSizes,
    ConfusionMatrix,
    DomainSpec,
    TrainConfig,
    accumulate_confusion,
    default_source_spec,
    default_target_spec,
    evaluate,
    group_miou,
    load_split,
    make_benchmark,
    miou,
    read_manifest,
    save_dataset,
    train_source,
)
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .segmodel import ArchConfig, load_checkpoint, predict, save_checkpoint

log = logging.getLogger("sfseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
SEED_ENV = "SFSA_SEED"

REPORT_SCHEMA = {
    "type": "object",
    "required": ["command", "config", "metrics"],
    "properties": {
        "command": {"enum": ["gen", "train-source", "adapt", "tta", "eval"]},
        "config": {"type": "object"},
        "metrics": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["variant", "split", "miou", "per_class_iou", "groups"],
                "properties": {
                    "variant": {"type": "string"},
                    "split": {"type": "string"},
                    "miou": {"type": "number"},
                    "per_class_iou": {"type": "array", "items": {"type": ["number", "null"]}},
                    "groups": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
                },
            },
        },
    },
}

# defaults per subcommand; nested sections are validated by their dataclasses
DEFAULTS: dict[str, dict[str, Any]] = {
    "gen": {
        "seed": 7,
        "out": None,
        "source_spec": asdict(default_source_spec()),
        "target_spec": asdict(default_target_spec()),
        "sizes": asdict(BenchmarkSizes()),
    },
    "train-source": {"seed": 0, "data": None, "out": None, "split": "source_train", "eval_splits": ["source_test", "target_test"],
                     "arch": {}, "train": {}},
    "adapt": {"seed": 0, "data": None, "source": None, "out": None, "train_split": "target_train",
              "eval_split": "target_test", "norm_only": False, "adapt": {}},
    "tta": {"seed": 0, "data": None, "source": None, "out": None, "split": "target_test", "tta": {}},
    "eval": {"data": None, "checkpoint": None, "out": None, "split": "target_test", "dump_preds": False},
}

REQUIRED = {
    "gen": ["out"],
    "train-source": ["data", "out"],
    "adapt": ["data", "source", "out"],
    "tta": ["data", "source", "out"],
    "eval": ["data", "checkpoint", "out"],
}


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged = dict(base[key])
            merged.update(value)
            out[key] = merged
        else:
            out[key] = value
    return out


def resolve_config(command: str, file_cfg: dict, flag_cfg: dict, environ=os.environ) -> dict:
    """defaults < config file < SFSA_SEED < command-line flags."""
    cfg = _merge(DEFAULTS[command], file_cfg, "")
    if SEED_ENV in environ and "seed" in cfg:
        try:
            cfg["seed"] = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from exc
    for key, value in flag_cfg.items():
        if isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required setting(s) {', '.join('--' + m.replace('_', '-') for m in missing)}")
    _check_sections(command, cfg)
    return cfg


def _check_sections(command: str, cfg: dict) -> None:
    """Reject bad nested settings before any file is touched."""
    try:
        if command == "gen":
            for key in ("source_spec", "target_spec"):
                DomainSpec.from_dict(cfg[key]).validate()
            BenchmarkSizes(**cfg["sizes"])
        elif command == "train-source":
            ArchConfig.from_dict({"n_classes": 2, **cfg["arch"]}).validate()
            TrainConfig.from_dict(cfg["train"])
        elif command == "adapt":
            AdaptConfig.from_dict(cfg["adapt"]).validate()
        elif command == "tta":
            TtaConfig.from_dict(cfg["tta"]).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# reports


def _num(x: float):
    return None if isinstance(x, float) and math.isnan(x) else x


def metric_row(variant: str, split: str, cm: ConfusionMatrix) -> dict:
    iou, mean = miou(cm)
    groups = {k: v for k, v in DEFAULT_GROUPS.items() if max(v) < cm.n_classes}
    return {
        "variant": variant,
        "split": split,
        "miou": mean,
        "per_class_iou": [_num(float(v)) for v in iou],
        "groups": {k: _num(v) for k, v in group_miou(iou, groups).items()},
    }


def metrics_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    n = len(rows[0]["per_class_iou"])
    groups = list(rows[0]["groups"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "split", "miou"] + [f"iou_{c}" for c in range(n)] + [f"miou_{g}" for g in groups])
    fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
    for r in rows:
        w.writerow([r["variant"], r["split"], fmt(r["miou"])] + [fmt(v) for v in r["per_class_iou"]]
                   + [fmt(r["groups"][g]) for g in groups])
    return buf.getvalue()


def write_report(out: Path, command: str, cfg: dict, rows: list[dict], extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": command, "config": {k: v for k, v in cfg.items() if k != "out"}, "metrics": rows}
    if extra:
        report.update(extra)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n")
    if rows:
        (out / "metrics.csv").write_text(metrics_csv(rows))


def _print_table(rows: Sequence[dict]) -> None:
    for r in rows:
        print(f"{r['variant']:<16} {r['split']:<14} mIoU {100 * r['miou']:6.2f}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: dict) -> list[dict]:
    src = DomainSpec.from_dict(cfg["source_spec"])
    tgt = DomainSpec.from_dict(cfg["target_spec"])
    unknown = set(cfg["sizes"]) - set(BenchmarkSizes.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown sizes keys: {sorted(unknown)}")
    sizes = BenchmarkSizes(**cfg["sizes"])
    if min(asdict(sizes).values()) < 1:
        raise ConfigError("every split needs at least one image")
    splits = make_benchmark(int(cfg["seed"]), src, tgt, sizes)
    out = Path(cfg["out"])
    save_dataset(out, splits, src.n_classes, {"source": src, "target": tgt}, extra={"seed": int(cfg["seed"])})
    cfg = {**cfg, "source_spec": asdict(src), "target_spec": asdict(tgt), "sizes": asdict(sizes)}
    write_report(out, "gen", cfg, [], {"splits": {k: len(v) for k, v in splits.items()}})
    return []


def _load_data(cfg: dict, *names: str):
    manifest = read_manifest(cfg["data"])
    return manifest, {n: load_split(cfg["data"], n, manifest) for n in names}


def _check_classes(manifest: dict, model) -> None:
    if int(manifest["n_classes"]) != model.n_classes:
        raise FormatError(f"dataset has {manifest['n_classes']} classes but the model predicts {model.n_classes}")


def cmd_train_source(cfg: dict) -> list[dict]:
    manifest, data = _load_data(cfg, cfg["split"], *cfg["eval_splits"])
    arch_dict = {"n_classes": int(manifest["n_classes"]), **cfg["arch"]}
    arch = ArchConfig.from_dict(arch_dict)
    train = TrainConfig.from_dict({**cfg["train"], "seed": int(cfg["seed"])})
    history: list[dict] = []
    model = train_source(data[cfg["split"]], arch, train, history=history)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "source.ckpt")
    (out / "train_log.csv").write_text(history_csv(history))
    rows = [metric_row("source", s, evaluate(model, data[s])) for s in cfg["eval_splits"]]
    resolved = {**cfg, "arch": asdict(arch), "train": asdict(train)}
    write_report(out, "train-source", resolved, rows)
    return rows


def cmd_adapt(cfg: dict) -> list[dict]:
    manifest, data = _load_data(cfg, cfg["train_split"], cfg["eval_split"])
    source = load_checkpoint(cfg["source"])
    _check_classes(manifest, source)
    train_images = data[cfg["train_split"]].images
    test = data[cfg["eval_split"]]
    split = cfg["eval_split"]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    if cfg["norm_only"]:
        normed = prepare_source(source, train_images)
        save_checkpoint(normed, out / "adapted.ckpt")
        rows = [metric_row("update-norm", split, evaluate(normed, test))]
        write_report(out, "adapt", cfg, rows)
        return rows

    acfg = AdaptConfig.from_dict({**cfg["adapt"], "seed": int(cfg["seed"])})
    state = AdaptState()
    target = adapt(source, train_images, acfg, state=state)
    save_checkpoint(target, out / "adapted.ckpt")
    (out / "train_log.csv").write_text(history_csv(state.history))
    rows = [
        metric_row("no-adapt", split, evaluate(source, test)),
        metric_row("update-norm", split, evaluate(state.source_model, test)),
        metric_row("adapted", split, evaluate(target, test)),
    ]
    resolved = {**cfg, "adapt": acfg.to_dict()}
    extra = {"source_thresholds": [float(v) for v in state.source_thresholds],
             "final_thresholds": [float(v) for v in state.thresholds]}
    write_report(out, "adapt", resolved, rows, extra)
    return rows


def cmd_tta(cfg: dict) -> list[dict]:
    manifest, data = _load_data(cfg, cfg["split"])
    digest = _sha256(cfg["source"])
    source = load_checkpoint(cfg["source"])
    _check_classes(manifest, source)
    tcfg = TtaConfig.from_dict({**cfg["tta"], "seed": int(cfg["seed"])})
    tcfg.validate()
    test = data[cfg["split"]]
    baseline = evaluate(source, test)
    cm = ConfusionMatrix(source.n_classes)
    all_restored = True
    for img, lab in zip(test.images, test.labels):
        pred, restored = tta_episode(source, img, tcfg)
        all_restored &= restored
        accumulate_confusion(cm, pred, lab)
    rows = [
        metric_row("no-adapt", cfg["split"], baseline),
        metric_row(f"tta-{tcfg.loss_kind}-{tcfg.iters_per_image}", cfg["split"], cm),
    ]
    unchanged_on_disk = _sha256(cfg["source"]) == digest
    if not (all_restored and unchanged_on_disk):
        raise RuntimeError("source model changed during test-time adaptation")
    resolved = {**cfg, "tta": tcfg.to_dict()}
    write_report(Path(cfg["out"]), "tta", resolved, rows,
                 {"source_unchanged": {"in_memory": bool(all_restored), "on_disk": bool(unchanged_on_disk)}})
    return rows


def _color_map(manifest: dict, n_classes: int) -> np.ndarray:
    specs = manifest.get("domain_specs") or {}
    palette = next((s["palette"] for s in specs.values() if len(s.get("palette", [])) == n_classes), None)
    if palette is None:
        # evenly spaced greys when the manifest carries no usable palette
        palette = [[i / max(n_classes - 1, 1)] * 3 for i in range(n_classes)]
    return np.round(np.asarray(palette) * 255).astype(np.uint8)


def cmd_eval(cfg: dict) -> list[dict]:
    manifest, data = _load_data(cfg, cfg["split"])
    model = load_checkpoint(cfg["checkpoint"])
    _check_classes(manifest, model)
    split = data[cfg["split"]]
    preds = [predict(model, img) for img in split.images]
    rows = [metric_row("model", cfg["split"], evaluate(model, split, predictions=preds))]
    out = Path(cfg["out"])
    if cfg["dump_preds"]:
        colors = _color_map(manifest, model.n_classes)
        pred_dir = out / "preds"
        pred_dir.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(preds):
            Image.fromarray(colors[p], mode="RGB").save(pred_dir / f"{i:04d}_pred.png", optimize=False)
    write_report(out, "eval", cfg, rows)
    return rows


COMMANDS = {
    "gen": cmd_gen,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "tta": cmd_tta,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with settings for this subcommand")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory written by 'gen'")

    parser = argparse.ArgumentParser(prog="sfseg", description="Source-free segmentation adaptation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common, seeded], help="generate the synthetic two-domain benchmark")
    g.add_argument("--n-source-train", type=int)
    g.add_argument("--n-source-test", type=int)
    g.add_argument("--n-target-train", type=int)
    g.add_argument("--n-target-test", type=int)

    t = sub.add_parser("train-source", parents=[common, seeded, data], help="supervised training on the source split")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    a = sub.add_parser("adapt", parents=[common, seeded, data], help="source-free adaptation on target images")
    a.add_argument("--source", help="source checkpoint")
    a.add_argument("--epochs", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--no-collage", action="store_true")
    a.add_argument("--no-soft", action="store_true")
    a.add_argument("--no-hard", action="store_true")
    a.add_argument("--uniform-threshold", type=float)
    a.add_argument("--finetune", action="store_true", help="start the target model from the source weights")
    a.add_argument("--norm-only", action="store_true", help="only refresh norm statistics on the target images")
    a.add_argument("--pl-only", action="store_true", help="plain pseudo-label training (no collage, no consistency)")
    a.add_argument("--pl-augment", action="store_true", help="baseline that pseudo-labels transformed images")

    tt = sub.add_parser("tta", parents=[common, seeded, data], help="episodic test-time adaptation")
    tt.add_argument("--source", help="source checkpoint")
    tt.add_argument("--loss", choices=["consistency", "entropy"])
    tt.add_argument("--iters", type=int)
    tt.add_argument("--lr", type=float)
    tt.add_argument("--param-subset", choices=["all", "norm_affine"])

    e = sub.add_parser("eval", parents=[common, data], help="score a checkpoint on a split")
    e.add_argument("--checkpoint")
    e.add_argument("--split")
    e.add_argument("--dump-preds", action="store_true", help="write one colour-mapped PNG per prediction")
    return parser


def flags_to_config(ns: argparse.Namespace) -> dict:
    """Only flags the user actually gave; unset flags must not mask the config file."""
    cfg: dict[str, Any] = {}

    def put(key, value):
        if value is not None and value is not False:
            cfg[key] = value

    put("out", ns.out)
    put("seed", getattr(ns, "seed", None))
    put("data", getattr(ns, "data", None))
    if ns.command == "gen":
        sizes = {k: getattr(ns, "n_" + k) for k in ("source_train", "source_test", "target_train", "target_test")}
        sizes = {k: v for k, v in sizes.items() if v is not None}
        if sizes:
            cfg["sizes"] = sizes
    elif ns.command == "train-source":
        train = {k: v for k, v in (("epochs", ns.epochs), ("base_lr", ns.lr)) if v is not None}
        if train:
            cfg["train"] = train
    elif ns.command == "adapt":
        put("source", ns.source)
        put("norm_only", ns.norm_only)
        sec: dict[str, Any] = {}
        for key, value in (("epochs", ns.epochs), ("base_lr", ns.lr), ("uniform_threshold", ns.uniform_threshold)):
            if value is not None:
                sec[key] = value
        if ns.pl_only:
            sec.update(collage=False, soft=False, hard=False)
        if ns.no_collage:
            sec["collage"] = False
        if ns.no_soft:
            sec["soft"] = False
        if ns.no_hard:
            sec["hard"] = False
        if ns.finetune:
            sec["init_mode"] = "finetune"
        if ns.pl_augment:
            sec["pl_augment"] = True
        if sec:
            cfg["adapt"] = sec
    elif ns.command == "tta":
        put("source", ns.source)
        sec = {k: v for k, v in (("loss_kind", ns.loss), ("iters_per_image", ns.iters), ("lr", ns.lr),
                                 ("param_subset", ns.param_subset)) if v is not None}
        if sec:
            cfg["tta"] = sec
    elif ns.command == "eval":
        put("checkpoint", ns.checkpoint)
        put("split", ns.split)
        put("dump_preds", ns.dump_preds)
    return cfg


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None, environ=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    environ = os.environ if environ is None else environ
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(ns.command, _load_config_file(ns.config), flags_to_config(ns), environ)
        with _thread_limit(ns.threads):
            rows = COMMANDS[ns.command](cfg)
    except (ConfigError, UsageError) as exc:
        print(f"sfseg {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, OSError) as exc:
        print(f"sfseg {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        # dataclass constructors reject bad value types this way
        print(f"sfseg {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _print_table(rows)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
