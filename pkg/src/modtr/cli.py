"""``modtr`` command line: convert, pretrain, train, evaluate, translate, serve, report.

Each command reads an optional flat JSON config, applies flag overrides
(flags win), and writes ``manifest.json`` into its output directory with the
resolved config, seed and sha256 digests of every input file.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core import (
    DetectorTrainConfig,
    TrainConfig,
    TrainingDiverged,
    TrainMode,
    build_model,
    load_model,
    train,
    train_detector,
    train_joint,
)
from .data import (
    SYNTHETIC_VERSION,
    DataError,
    convert_flir_aligned,
    convert_llvip,
    filter_classes,
    load_coco_annotations,
    split_train_val,
    synth_shapes_dataset,
    to_pil,
)
from .detector import DetectorLoadError, load_detector
from .fusion import FusionKind
from .metrics import APReport, evaluate_dataset, format_mean_std_table, format_table
from .translator import Backbone, TranslatorConfig

log = logging.getLogger("modtr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

DATASETS = ("llvip", "flir", "synthetic", "coco-generic")

_DATA_KEYS = {
    "dataset": "synthetic",
    "data_root": None,
    "modality": "ir",
    "train_annotations": None,
    "test_annotations": None,
    "image_root": None,
    "drop_classes": None,  # None -> ["dog"] for flir, [] otherwise
    "resize": None,
    "train_fraction": 0.8,
    "n_images": 250,
    "image_size": 96,
    "max_boxes": 3,
    "synthetic_seed": 0,
}

_DETECTOR_KEYS = {
    "detector": None,
    "detector_architecture": "TinyAnchorFree",
    "detector_config": None,
}

DEFAULTS: dict[str, dict] = {
    "convert": {"dataset": "llvip", "data_root": None},
    "pretrain": {
        **_DATA_KEYS, **_DETECTOR_KEYS, "modality": "rgb", "init": None, "width": 64,
        "steps": 800, "batch_size": 16, "learning_rate": 2e-3, "jitter": True,
    },
    "train": {
        **_DATA_KEYS, **_DETECTOR_KEYS, "fusion": "hadamard", "mode": "translator", "backbone": "tiny",
        "base_width": 16, "depth": 3, "steps": 1000, "batch_size": 8, "learning_rate": 1e-4,
        "detector_learning_rate": None, "val_every": 0, "checkpoint_every": 0, "hflip": False,
    },
    "evaluate": {
        **_DATA_KEYS, **_DETECTOR_KEYS, "split": "test", "checkpoints": [], "run_dirs": [],
        "score_threshold": 0.05, "nms_iou": 0.5,
    },
    "translate": {
        **_DATA_KEYS, **_DETECTOR_KEYS, "split": "test", "checkpoint": None, "n_images": 250,
        "n_dump": 8, "score_threshold": 0.3,
    },
    "serve": {
        **_DETECTOR_KEYS, "class_map": None, "routes": [{"modality_id": "rgb"}], "bind": "127.0.0.1:8000",
        "score_threshold": 0.05, "nms_iou": 0.5, "max_image_pixels": 4096 * 4096, "workers": 2,
    },
    "report": {"run_dirs": [], "title": "ModTr"},
}

# flags shared by every command; value None means "not given"
_FLAG_KEYS = ("seed", "dataset", "fusion", "backbone", "mode", "bind", "steps", "detector", "data_root",
              "checkpoint", "modality")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modtr", description="Modality translation for frozen object detectors.")
    p.add_argument("--version", action="version", version=f"modtr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in DEFAULTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="flat JSON config; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir", type=Path, dest="output_dir")
        sp.add_argument("--dataset", choices=DATASETS)
        sp.add_argument("--data-root", dest="data_root")
        sp.add_argument("--modality")
        sp.add_argument("--fusion", choices=[k.value for k in FusionKind])
        sp.add_argument("--backbone", choices=[b.value for b in Backbone])
        sp.add_argument("--mode", choices=[m.value for m in TrainMode])
        sp.add_argument("--steps", type=int)
        sp.add_argument("--detector", help="detector weights path or random:<seed>")
        sp.add_argument("--checkpoint", help="translator manifest (translate)")
        if name == "serve":
            sp.add_argument("--bind", help="HOST:PORT")
        else:
            sp.set_defaults(bind=None)
        if name in ("evaluate", "report"):
            sp.add_argument("run_dirs", nargs="*", type=Path)
        sp.set_defaults(handler=globals()[f"cmd_{name}"])
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    cfg["seed"] = 0
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg) - {"output_dir"})
        if unknown:
            raise UsageError(f"unknown config keys for '{command}': {unknown}")
        cfg.update(loaded)
    for key in _FLAG_KEYS:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key not in cfg:
            raise UsageError(f"--{key.replace('_', '-')} does not apply to '{command}'")
        cfg[key] = value
    if getattr(args, "run_dirs", None):
        cfg["run_dirs"] = [str(p) for p in args.run_dirs]
    out = args.output_dir if args.output_dir is not None else cfg.get("output_dir")
    cfg["output_dir"] = str(out) if out is not None else f"runs/{command}"
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: list) -> Path:
    digests = {}
    for item in inputs:
        p = Path(item)
        if p.is_file():
            digests[str(p)] = _digest_file(p)
            sidecar = p.with_suffix(".pt")
            if p.suffix == ".json" and sidecar.is_file():
                digests[str(sidecar)] = _digest_file(sidecar)
    manifest = {
        "command": command,
        "modtr_version": __version__,
        "torch_version": torch.__version__,
        "seed": cfg.get("seed"),
        "config": cfg,
        "inputs": digests,
    }
    if cfg.get("dataset") == "synthetic":
        manifest["synthetic_version"] = SYNTHETIC_VERSION
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _resize(cfg):
    r = cfg.get("resize")
    if r in (None, "none"):
        return None
    if isinstance(r, (list, tuple)) and len(r) == 2:
        return int(r[0]), int(r[1])
    raise UsageError(f"resize must be null, 'none' or [height, width], got {r!r}")


def load_splits(cfg: dict) -> dict:
    """Resolve ``train``/``val``/``test`` datasets for ``cfg['modality']``; also lists input files."""
    name = cfg["dataset"]
    modality = cfg["modality"]
    seed = cfg["seed"]
    if name == "synthetic":
        rgb, ir = synth_shapes_dataset(cfg["n_images"], cfg["image_size"], cfg["max_boxes"], cfg["synthetic_seed"])
        if modality not in ("rgb", "ir"):
            raise DataError(f"synthetic data has modalities 'rgb' and 'ir', not {modality!r}")
        data = rgb if modality == "rgb" else ir
        train_ds, val_ds = split_train_val(data, cfg["train_fraction"], seed=cfg["synthetic_seed"])
        return {"train": train_ds, "val": val_ds, "test": val_ds, "inputs": []}

    if name == "coco-generic":
        train_path, test_path = cfg.get("train_annotations"), cfg.get("test_annotations")
        if not train_path:
            raise DataError("coco-generic needs 'train_annotations' in the config")
    else:
        root = cfg.get("data_root")
        if not root or not Path(root).is_dir():
            raise DataError(f"dataset root does not exist: {root}")
        train_path = Path(root) / f"annotations_train_{modality}.json"
        test_path = Path(root) / f"annotations_test_{modality}.json"
    for p in (train_path, test_path):
        if p and not Path(p).is_file():
            raise DataError(f"annotation file not found: {p}")
    resize = _resize(cfg)
    full = load_coco_annotations(train_path, cfg.get("image_root"), modality, resize)
    test = load_coco_annotations(test_path, cfg.get("image_root"), modality, resize) if test_path else None
    drop = cfg.get("drop_classes")
    if drop is None:
        drop = ["dog"] if name == "flir" else []
    if drop:
        full, _ = filter_classes(full, drop)
        if test is not None:
            test, _ = filter_classes(test, drop)
    train_ds, val_ds = split_train_val(full, cfg["train_fraction"], seed=seed)
    return {"train": train_ds, "val": val_ds, "test": test if test is not None else val_ds,
            "inputs": [p for p in (train_path, test_path) if p]}


def _detector(cfg: dict, class_map: dict, source: str | None = None):
    source = source or cfg.get("detector")
    if not source:
        raise UsageError("no detector given; pass --detector PATH (or random:<seed>)")
    if not source.startswith("random:") and not Path(source).is_file():
        raise DataError(f"detector weights not found: {source}")
    handle = load_detector(cfg["detector_architecture"], source, class_map, cfg.get("detector_config"))
    if handle.class_map != {int(k): v for k, v in class_map.items()}:
        raise DataError(f"detector class map {handle.class_map} does not match dataset {class_map}")
    return handle


def _eval_record(label: str, strategy: str, cfg: dict, split: str, report: APReport, **extra) -> dict:
    rec = {"label": label, "strategy": strategy, "dataset": cfg.get("dataset"), "modality": cfg.get("modality"),
           "split": split, "seed": cfg.get("seed"), "report": report.to_dict()}
    rec.update(extra)
    return rec


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_convert(cfg: dict) -> int:
    root, out = cfg.get("data_root"), Path(cfg["output_dir"])
    if not root:
        raise UsageError("convert needs --data-root")
    if cfg["dataset"] == "llvip":
        written = convert_llvip(root, out)
    elif cfg["dataset"] == "flir":
        written = convert_flir_aligned(root, out)
    else:
        raise UsageError("convert supports --dataset llvip or flir")
    write_manifest(out, "convert", cfg, written)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    """Train a detector's own weights; from scratch, or fine-tuned from ``init`` (the FT baseline)."""
    out = Path(cfg["output_dir"])
    splits = load_splits(cfg)
    class_map = splits["train"].class_map
    init = cfg.get("init")
    det_cfg = cfg.get("detector_config")
    if init is None and cfg["detector_architecture"] == "TinyAnchorFree" and det_cfg is None:
        cfg["detector_config"] = {"width": cfg["width"]}
    det = _detector(cfg, class_map, init or f"random:{cfg['seed']}")
    tcfg = DetectorTrainConfig(cfg["steps"], cfg["batch_size"], cfg["learning_rate"], cfg["seed"], cfg["jitter"])
    history = train_detector(det, splits["train"], tcfg)
    history.write(out / "history.jsonl")
    det.save(out / "detector.pt")
    report = evaluate_dataset(det.predict, _rgb_view(splits["val"]), class_map)
    strategy = "FT" if init else "Detector"
    _write_json(out / "eval.json", _eval_record(strategy, strategy, cfg, "val", report,
                                                final_loss=history.losses[-1],
                                                detector_fingerprint=det.fingerprint()))
    write_manifest(out, "pretrain", cfg, splits["inputs"] + ([init] if init else []))
    print(format_table([(strategy, report)], title=f"{cfg['dataset']} {cfg['modality']} val"), end="")
    return EXIT_OK


class _RgbView:
    """Presents 1-channel samples to a detector by channel replication."""

    def __init__(self, data):
        self.data = data
        self.class_map = data.class_map

    def __len__(self):
        return len(self.data)

    def __iter__(self):
        for s in self.data:
            yield _ReplicatedSample(s)


class _ReplicatedSample:
    def __init__(self, sample):
        self.sample = sample
        self.annotations = sample.annotations

    def load_image(self):
        x = self.sample.load_image()
        return x.expand(3, -1, -1) if x.shape[0] == 1 else x


def _rgb_view(data):
    return _RgbView(data) if len(data) and data[0].channels == 1 else data


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["output_dir"])
    splits = load_splits(cfg)
    class_map = splits["train"].class_map
    det = _detector(cfg, class_map).freeze()
    channels = splits["train"][0].channels
    backbone = Backbone(cfg["backbone"])
    if backbone is Backbone.TINY:
        tcfg = TranslatorConfig(backbone, channels, cfg["base_width"], cfg["depth"])
    else:
        tcfg = TranslatorConfig.standard(backbone, channels)
    model = build_model(tcfg, det, cfg["fusion"], cfg["modality"], seed=cfg["seed"])
    mode = TrainMode(cfg["mode"])
    config = TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], seed=cfg["seed"],
        mode=mode, checkpoint_every=cfg["checkpoint_every"], val_every=cfg["val_every"], output_dir=str(out),
        hflip=cfg["hflip"], detector_learning_rate=cfg["detector_learning_rate"],
    )
    write_manifest(out, "train", cfg, splits["inputs"] + [cfg["detector"]])
    if mode is TrainMode.JOINT:
        model, history = train_joint(model, splits["train"], splits["val"], config)
        label = f"ModTr+FT-{model.fusion.value}"
    else:
        model, history = train(model, splits["train"], splits["val"], config)
        label = f"ModTr-{model.fusion.value}"
    report = evaluate_dataset(model.forward, splits["val"], class_map)
    _write_json(out / "eval.json", _eval_record(
        label, "ModTr+FT" if mode is TrainMode.JOINT else "ModTr", cfg, "val", report,
        final_loss=history.losses[-1], detector_fingerprint=model.detector.fingerprint(),
    ))
    print(format_table([(label, report)], title=f"{cfg['dataset']} {cfg['modality']} val"), end="")
    return EXIT_OK


def _load_route(cfg: dict, det, manifest_path: Path, data_channels: int):
    """Rebuild a ModTr model from a run's translator manifest, using the run's own detector for joint runs."""
    if not manifest_path.is_file():
        raise DataError(f"translator checkpoint not found: {manifest_path}")
    meta = json.loads(manifest_path.read_text())
    if meta.get("in_channels") != data_channels:
        raise DataError(f"{manifest_path} expects {meta.get('in_channels')}-channel input, data has {data_channels}")
    arch = meta.get("detector_architecture")
    if arch and arch != det.architecture.value:
        raise DataError(f"{manifest_path} was trained for {arch}, not {det.architecture.value}")
    route_det = det
    if meta.get("mode") == "joint":
        joint_path = manifest_path.parent / "detector.pt"
        route_det = load_detector(det.architecture, str(joint_path), det.class_map).freeze()
    elif meta.get("detector_fingerprint") not in (None, det.fingerprint()):
        raise DataError(f"{manifest_path} was trained against a different detector "
                        f"(fingerprint {meta['detector_fingerprint'][:12]}...)")
    try:
        model = load_model(manifest_path, route_det)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    label = f"{'ModTr+FT' if meta.get('mode') == 'joint' else 'ModTr'}-{model.fusion.value}"
    return model, label


def cmd_evaluate(cfg: dict) -> int:
    out = Path(cfg["output_dir"])
    splits = load_splits(cfg)
    data = splits[cfg["split"]]
    class_map = data.class_map
    det = _detector(cfg, class_map).freeze()
    thr, nms = cfg["score_threshold"], cfg["nms_iou"]
    channels = data[0].channels if len(data) else 3
    targets: list[tuple[str, Path | None]] = [("identity", None) if c == "identity" else (str(c), Path(c))
                                              for c in cfg["checkpoints"]]
    for run_dir in cfg["run_dirs"]:
        targets.append((str(run_dir), Path(run_dir) / "last" / "translator.json"))
    if not targets:
        targets = [("identity", None)]
    records, groups = [], {}
    for name, path in targets:
        if path is None:
            report = evaluate_dataset(lambda b: det.predict(b, thr, nms), _rgb_view(data), class_map)
            label = "Detector (zero-shot)" if channels == 1 else "Detector"
            strategy = "Detector"
        else:
            model, label = _load_route(cfg, det, path, channels)
            report = evaluate_dataset(lambda b, m=model: m.forward(b, thr, nms), data, class_map)
            strategy = label.split("-")[0]
        records.append(_eval_record(label, strategy, cfg, cfg["split"], report, source=name))
        groups.setdefault(label, []).append(report)
    _write_json(out / "eval.json", {"rows": records})
    if any(len(v) > 1 for v in groups.values()):
        text = format_mean_std_table(list(groups.items()), title=f"{cfg['dataset']} {cfg['modality']} "
                                                                 f"{cfg['split']} (mean ± std over runs)")
    else:
        text = format_table([(r["label"], APReport.from_dict(r["report"])) for r in records],
                            title=f"{cfg['dataset']} {cfg['modality']} {cfg['split']}")
    (out / "table.txt").write_text(text)
    write_manifest(out, "evaluate", cfg, splits["inputs"] + [cfg["detector"]]
                   + [str(p) for _, p in targets if p is not None])
    print(text, end="")
    return EXIT_OK


def _draw_boxes(img, boxes, color, width=1):
    from PIL import ImageDraw

    draw = ImageDraw.Draw(img)
    for b in boxes:
        x1, y1, x2, y2 = b.xyxy
        draw.rectangle([x1, y1, max(x1, x2 - 1), max(y1, y2 - 1)], outline=color, width=width)
    return img


def cmd_translate(cfg: dict) -> int:
    """Dump fused images plus a grid: input | fused | fused with GT (yellow) and predictions (red)."""
    from PIL import Image

    out = Path(cfg["output_dir"])
    if not cfg.get("checkpoint"):
        raise UsageError("translate needs --checkpoint <translator manifest>")
    splits = load_splits(cfg)
    data = splits[cfg["split"]]
    det = _detector(cfg, data.class_map).freeze()
    channels = data[0].channels if len(data) else 3
    model, label = _load_route(cfg, det, Path(cfg["checkpoint"]), channels)
    n = min(cfg["n_dump"], len(data))
    if n == 0:
        raise DataError("no images to translate")
    out.mkdir(parents=True, exist_ok=True)
    tiles, means = [], []
    for i in range(n):
        sample = data[i]
        x = sample.load_image()
        with torch.no_grad():
            fused = model.intermediate_representation(x)
        dets = det.predict(fused, cfg["score_threshold"])
        fused_img = to_pil(fused)
        fused_img.save(out / f"fused_{i:03d}.png")
        means.append(float(fused.mean()))
        raw = to_pil(x.expand(3, -1, -1) if x.shape[0] == 1 else x)
        overlay = _draw_boxes(fused_img.copy(), sample.annotations, (255, 255, 0))
        overlay = _draw_boxes(overlay, [d.box for d in dets], (255, 0, 0))
        tiles.append((raw, fused_img, overlay))
    w, h = tiles[0][0].size
    grid = Image.new("RGB", (3 * w, n * h))
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            grid.paste(tile.convert("RGB"), (c * w, r * h))
    grid.save(out / "grid.png")
    _write_json(out / "translate.json", {"label": label, "n_images": n, "mean_intensity": float(np.mean(means)),
                                         "per_image_mean": means})
    write_manifest(out, "translate", cfg, splits["inputs"] + [cfg["detector"], cfg["checkpoint"]])
    print(f"wrote {n} fused images and grid.png to {out}")
    return EXIT_OK


def cmd_serve(cfg: dict) -> int:
    from .gateway import GatewayConfig, serve

    if not cfg.get("detector"):
        raise UsageError("serve needs --detector")
    gcfg = GatewayConfig(
        detector_source=cfg["detector"], detector_architecture=cfg["detector_architecture"],
        class_map=cfg.get("class_map"), routes=cfg["routes"], bind_address=cfg["bind"],
        score_threshold=cfg["score_threshold"], nms_iou=cfg["nms_iou"],
        max_image_pixels=cfg["max_image_pixels"], workers=cfg["workers"],
    )
    write_manifest(Path(cfg["output_dir"]), "serve", cfg,
                   [cfg["detector"]] + [r.translator_checkpoint for r in gcfg.routes if not r.identity])
    serve(gcfg)
    return EXIT_OK


def _svg_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "modtr"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def cmd_report(cfg: dict) -> int:
    """Grouped bar chart of AP50 per strategy and dataset, loss curves, and a text table."""
    out = Path(cfg["output_dir"])
    run_dirs = [Path(p) for p in cfg["run_dirs"]]
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    runs = []
    for d in run_dirs:
        missing = [name for name in ("eval.json", "history.jsonl") if not (d / name).is_file()]
        if missing:
            raise DataError(f"{d} is missing {missing}; each run dir needs eval.json and history.jsonl")
        rec = json.loads((d / "eval.json").read_text())
        if "rows" in rec:
            raise DataError(f"{d}/eval.json is an evaluate summary; report takes train/pretrain run dirs")
        losses = [json.loads(line)["loss"] for line in (d / "history.jsonl").read_text().splitlines() if line]
        runs.append({"dir": d, "eval": rec, "losses": losses})

    groups: dict[tuple[str, str], list[APReport]] = {}
    for r in runs:
        key = (r["eval"].get("dataset") or "?", r["eval"]["strategy"])
        groups.setdefault(key, []).append(APReport.from_dict(r["eval"]["report"]))
    datasets = sorted({k[0] for k in groups})
    strategies = sorted({k[1] for k in groups})

    plt = _svg_setup()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(strategies), 1)
    for j, strat in enumerate(strategies):
        xs, means, stds = [], [], []
        for i, ds in enumerate(datasets):
            reports = groups.get((ds, strat))
            if not reports:
                continue
            vals = [100 * rep.ap50 for rep in reports]
            xs.append(i + (j - (len(strategies) - 1) / 2) * width)
            means.append(float(np.mean(vals)))
            stds.append(float(np.std(vals)))
        ax.bar(xs, means, width, yerr=stds, label=strat, capsize=3)
    ax.set_xticks(range(len(datasets)), datasets)
    ax.set_ylabel("AP50 (%)")
    ax.set_title(cfg["title"])
    ax.legend()
    fig.tight_layout()
    out.mkdir(parents=True, exist_ok=True)
    fig.savefig(out / "strategies.svg", format="svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in runs:
        ax.plot(range(1, len(r["losses"]) + 1), r["losses"], label=f"{r['eval']['label']} ({r['dir'].name})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "loss_curves.svg", format="svg", metadata={"Date": None})
    plt.close(fig)

    rows = [(f"{strat} [{ds}]", reps) for (ds, strat), reps in sorted(groups.items())]
    text = format_mean_std_table(rows, title=cfg["title"])
    (out / "report.txt").write_text(text)
    _write_json(out / "report.json", {
        "groups": [{"dataset": ds, "strategy": st, "ap50": [rep.ap50 for rep in reps]}
                   for (ds, st), reps in sorted(groups.items())],
    })
    write_manifest(out, "report", cfg, [d / "eval.json" for d in run_dirs] + [d / "history.jsonl" for d in run_dirs])
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.command, args)
        return args.handler(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DetectorLoadError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
