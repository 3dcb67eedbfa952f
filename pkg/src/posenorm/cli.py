"""Command-line driver: keypoints to warped regions to features to classifier.

Every command reads one TOML config (optional) plus flag overrides and writes
its artifacts under ``--out``.  JSON outputs embed the effective config and
its hash, and are byte-identical across reruns with unchanged inputs.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 infeasible optimization.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .classify import TrainConfig, evaluate, load_model, save_model, train_ova
from .dataset import (
    CUB_HEAD_BODY,
    TEST,
    TRAIN,
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_cub,
    load_native,
    save_native,
)
from .errors import LayoutMismatch, MissingFile, PoseNormError
from .features import Layout, load_external_features, make_extractor
from .geometry import WarpFamily
from .imaging import read_image, write_png
from .pipeline import RegionPlan, dataset_features, feature_matrix
from .prototypes import (
    CubKeypoints,
    HeadBody,
    PrototypeLearnConfig,
    RandPairs,
    baseline_regions,
    cost_matrix,
    learn_prototypes,
    load_prototypes,
    save_prototypes,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("posenorm")

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": "out",
    "data": {"annotations": "", "predicted": "", "images": ""},
    "synth": {
        "n_classes": 5,
        "images_per_class": 40,
        "K": 7,
        "image_size": 128,
        "pose_clusters": 1,
        "noise_sigma": 2.0,
        "occlusion": 0.2,
        "test_fraction": 0.5,
    },
    "prototypes": {
        "scheme": "learned",
        "lambda": 64.0,
        "neighbors": 5,
        "family": "similarity",
        "box_expansion": 0.5,
        "canonical_size": 224.0,
        "anchor_subsample": 0,
        "min_box_side": 8.0,
        "pairs": 10,
        "groups": {},
    },
    "features": {"region": ["hog"], "whole": ["raw:8"], "whole_size": 64, "external": [], "color": False},
    "train": {"C": 1.0, "epochs": 200, "solver": "sdca", "tol": 1e-4},
}

SCHEMES = ("learned", "head-body", "rand-pairs", "cub-keypoints")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict) and key != "groups":
            if not isinstance(value, dict):
                raise UsageError(f"config key {where}{key} must be a table")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | None, args) -> dict:
    user = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            user = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    cfg = _merge(DEFAULTS, user)
    for flag in ("seed", "workers", "out"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = value
    if cfg["prototypes"]["scheme"] not in SCHEMES:
        raise UsageError(f"prototypes.scheme must be one of {', '.join(SCHEMES)}")
    if int(cfg["workers"]) < 1:
        raise UsageError("workers must be at least 1")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _stamp(cfg: dict, body: dict) -> dict:
    return {**body, "config": cfg, "config_hash": config_hash(cfg), "tool_version": __version__}


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _annotations(cfg: dict) -> Path:
    return Path(cfg["data"]["annotations"] or Path(cfg["out"]) / "dataset.jsonl")


def _load_dataset(cfg: dict) -> Dataset:
    path = _annotations(cfg)
    if not path.is_file():
        raise MissingFile(f"annotation file {path} not found")
    return load_native(path)


def _image_root(cfg: dict) -> Path:
    return Path(cfg["data"]["images"]) if cfg["data"]["images"] else _annotations(cfg).parent


def _image_loader(cfg: dict, ds: Dataset):
    root = _image_root(cfg)
    mode = "RGB" if cfg["features"]["color"] else "L"

    def load(image_id: str):
        path = root / ds.record(image_id).path
        if not path.is_file():
            raise MissingFile(f"image {path} not found")
        return read_image(path, mode)

    return load


def _learn_config(cfg: dict) -> PrototypeLearnConfig:
    p = cfg["prototypes"]
    try:
        return PrototypeLearnConfig(
            lambda_=float(p["lambda"]),
            neighbors=int(p["neighbors"]),
            box_expansion=float(p["box_expansion"]),
            canonical_size=float(p["canonical_size"]),
            family=WarpFamily.parse(p["family"]),
            anchor_subsample=int(p["anchor_subsample"]) or None,
            rng_seed=int(cfg["seed"]),
            min_box_side=float(p["min_box_side"]),
            workers=int(cfg["workers"]),
        )
    except (ValueError, KeyError) as exc:
        raise UsageError(f"prototypes: {exc}") from None


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(C=float(t["C"]), epochs=int(t["epochs"]), solver=t["solver"], tol=float(t["tol"]),
                           rng_seed=int(cfg["seed"]))
    except ValueError as exc:
        raise UsageError(f"train: {exc}") from None


def _prototypes_path(cfg: dict) -> Path:
    path = Path(cfg["out"]) / "prototypes.json"
    if not path.is_file():
        raise MissingFile(f"{path} not found; run learn-prototypes first")
    return path


def _plan(cfg: dict, protos) -> RegionPlan:
    f = cfg["features"]
    try:
        region = tuple(make_extractor(s) for s in f["region"])
        whole = tuple(make_extractor(s) for s in f["whole"])
    except ValueError as exc:
        raise UsageError(f"features: {exc}") from None
    externals = tuple(load_external_features(p) for p in f["external"])
    return RegionPlan(tuple(protos), region, whole, externals, int(f["whole_size"]), 3 if f["color"] else 1)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: dict, args) -> int:
    root = Path(args.root)
    ds = load_cub(root) if args.format == "cub" else load_native(root)
    out = _out(cfg)
    save_native(ds, out / "dataset.jsonl")
    _write_json(out / "ingest_report.json", _stamp(cfg, {
        "source": str(root),
        "format": args.format,
        "n_images": len(ds),
        "n_classes": ds.n_classes,
        "K": ds.K,
        "n_train": ds.split.count(TRAIN),
        "n_test": ds.split.count(TEST),
    }))
    print(f"ingested {len(ds)} images, {ds.n_classes} classes, K={ds.K}")
    return 0


def cmd_synth(cfg: dict, args) -> int:
    s = cfg["synth"]
    try:
        scfg = SyntheticConfig(
            n_classes=int(s["n_classes"]),
            images_per_class=int(s["images_per_class"]),
            K=int(s["K"]),
            image_size=int(s["image_size"]),
            pose_clusters=int(s["pose_clusters"]),
            noise_sigma=float(s["noise_sigma"]),
            occlusion=float(s["occlusion"]),
            test_fraction=float(s["test_fraction"]),
            rng_seed=int(cfg["seed"]),
            workers=int(cfg["workers"]),
        )
    except ValueError as exc:
        raise UsageError(f"synth: {exc}") from None
    data = generate_synthetic(scfg)
    out = _out(cfg)
    for image_id, raster in data.images.items():
        write_png(raster, out / "images" / f"{image_id}.png")
    ds = data.dataset
    ds = Dataset(
        [type(r)(r.id, f"images/{r.path}", r.width, r.height) for r in ds.images],
        ds.keypoints, ds.labels, ds.split, ds.K, ds.class_names, ds.part_names,
    )
    save_native(ds, out / "dataset.jsonl")
    _write_json(out / "synth_report.json", _stamp(cfg, {
        "n_images": len(ds),
        "pose_clusters": [int(c) for c in data.clusters],
    }))
    print(f"wrote {len(ds)} synthetic images to {out}")
    return 0


def _regions(cfg: dict, train: Dataset):
    lcfg = _learn_config(cfg)
    scheme = cfg["prototypes"]["scheme"]
    if scheme == "learned":
        res = learn_prototypes(train, lcfg)
        return res.prototypes, res.report()
    if scheme == "head-body":
        groups = cfg["prototypes"]["groups"] or CUB_HEAD_BODY
        protos = baseline_regions(HeadBody(groups), train, lcfg)
    elif scheme == "rand-pairs":
        protos = baseline_regions(RandPairs(int(cfg["prototypes"]["pairs"]), int(cfg["seed"])), train, lcfg)
    else:
        protos = baseline_regions(CubKeypoints(), train, lcfg)
    return protos, {"n_prototypes": len(protos)}


def cmd_learn_prototypes(cfg: dict, args) -> int:
    train = _load_dataset(cfg).train()
    protos, report = _regions(cfg, train)
    out = _out(cfg)
    stamped = _stamp(cfg, {"scheme": cfg["prototypes"]["scheme"], "report": report})
    save_prototypes(out / "prototypes.json", protos, stamped)
    _write_json(out / "prototypes_report.json", stamped)
    print(f"{len(protos)} prototypes; " + ", ".join(f"{k}={v}" for k, v in report.items() if not isinstance(v, list)))
    return 0


def cmd_warp_regions(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    protos = load_prototypes(_prototypes_path(cfg))
    out = _out(cfg)
    costs, cities = cost_matrix(protos, ds, int(cfg["workers"]))
    rows = []
    train_errors = []
    uncovered = 0
    for (i, k), row in zip(cities, costs):
        if not np.isfinite(row).any():
            uncovered += 1
            continue
        p = int(np.argmin(row))
        rows.append((ds.images[i].id, ds.split[i], k, p, float(row[p])))
        if ds.split[i] == TRAIN:
            train_errors.append(float(row[p]))
    with open(out / "alignment_errors.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "split", "part", "prototype", "sq_error"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(r[4])])

    plan = RegionPlan(tuple(protos), whole_size=int(cfg["features"]["whole_size"]))
    load = _image_loader(cfg, ds)
    written = 0
    if not args.no_images:
        region_dir = out / "regions"
        for rec, kp in zip(ds.images, ds.keypoints):
            crops = plan.crops(load(rec.id), kp)
            for p, crop in enumerate(crops[1:]):
                if crop is not None:
                    write_png(crop.raster, region_dir / f"{rec.id}_{p}.png")
                    written += 1
    mean = float(np.mean(train_errors)) if train_errors else 0.0
    lam = float(cfg["prototypes"]["lambda"])
    _write_json(out / "warp_report.json", _stamp(cfg, {
        "n_prototypes": len(protos),
        "n_rows": len(rows),
        "uncovered_keypoints": uncovered,
        "train_sum_sq_error": float(np.sum(train_errors)),
        "train_mean_sq_error": mean,
        "train_objective": lam * len(protos) + mean,
        "region_images": written,
    }))
    print(f"{len(rows)} alignment rows, {written} region images, train mean error {mean:.6g}")
    return 0


def _extract(cfg: dict, ds: Dataset, plan: RegionPlan, load, path: Path) -> None:
    feats = dataset_features(plan, ds, load, int(cfg["workers"]))
    np.savez_compressed(
        path,
        X=feature_matrix(feats),
        ids=np.array(ds.ids),
        labels=ds.labels,
        split=np.array(ds.split),
        layout=np.array(json.dumps(plan.layout.to_json())),
        fingerprint=np.array(plan.layout.fingerprint),
    )


def cmd_extract(cfg: dict, args) -> int:
    ds = _load_dataset(cfg)
    protos = load_prototypes(_prototypes_path(cfg))
    plan = _plan(cfg, protos)
    out = _out(cfg)
    load = _image_loader(cfg, ds)
    _extract(cfg, ds, plan, load, out / "features.npz")
    report = {"n_images": len(ds), "dimension": plan.layout.total, "layout_fingerprint": plan.layout.fingerprint,
              "layout": plan.layout.to_json()}
    if cfg["data"]["predicted"]:
        pred_path = Path(cfg["data"]["predicted"])
        if not pred_path.is_file():
            raise MissingFile(f"predicted keypoint file {pred_path} not found")
        pred = ds.with_keypoints(load_native(pred_path))
        _extract(cfg, pred, plan, load, out / "features_predicted.npz")
        report["predicted"] = str(pred_path)
    _write_json(out / "extract_report.json", _stamp(cfg, report))
    print(f"extracted {plan.layout.total}-dimensional features for {len(ds)} images")
    return 0


def _load_features(path: Path):
    if not path.is_file():
        raise MissingFile(f"{path} not found; run extract first")
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def cmd_train(cfg: dict, args) -> int:
    out = _out(cfg)
    f = _load_features(out / "features.npz")
    mask = f["split"] == TRAIN
    layout = Layout.from_json(json.loads(str(f["layout"])))
    n_classes = len(_load_dataset(cfg).class_names)
    model = train_ova(f["X"][mask], f["labels"][mask], _train_config(cfg), n_classes=n_classes)
    model.layout_fingerprint = layout.fingerprint
    model.train_config = {**model.train_config, "config_hash": config_hash(cfg)}
    save_model(model, out / "model.json")
    _write_json(out / "train_report.json", _stamp(cfg, {
        "n_train": int(mask.sum()),
        "dimension": int(f["X"].shape[1]),
        "objective_history": model.objective_history,
    }))
    print(f"trained {model.n_classes} one-vs-all classifiers on {int(mask.sum())} images")
    return 0


def _eval_split(model, f) -> dict:
    mask = f["split"] == TEST
    if not mask.any():
        raise MissingFile("no test images in feature file")
    if str(f["fingerprint"]) != model.layout_fingerprint:
        raise LayoutMismatch(f"features layout {f['fingerprint']} differs from model layout {model.layout_fingerprint}")
    return evaluate(model, f["X"][mask], f["labels"][mask]).to_dict()


def cmd_eval(cfg: dict, args) -> int:
    out = _out(cfg)
    model_path = out / "model.json"
    if not model_path.is_file():
        raise MissingFile(f"{model_path} not found; run train first")
    model = load_model(model_path)
    results = {"ground_truth_keypoints": _eval_split(model, _load_features(out / "features.npz"))}
    pred_path = out / "features_predicted.npz"
    if cfg["data"]["predicted"]:
        results["predicted_keypoints"] = _eval_split(model, _load_features(pred_path))
    _write_json(out / "eval.json", _stamp(cfg, results))
    lines = [f"config {config_hash(cfg)}", f"{'keypoints':<24}{'accuracy':>10}{'n':>8}"]
    for name, r in results.items():
        lines.append(f"{name:<24}{r['accuracy']:>10.4f}{r['n']:>8d}")
    (out / "eval.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "learn-prototypes": cmd_learn_prototypes,
    "warp-regions": cmd_warp_regions,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diagnose("UsageError", message, 1)
        raise SystemExit(1)


def _diagnose(kind: str, message: str, code: int, **extra) -> None:
    doc = {"error": kind, "message": message, "exit_code": code, **extra}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--workers", type=int, help="worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="posenorm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"posenorm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("ingest", parents=[common], help="convert a dataset to the native format")
    p.add_argument("root", help="CUB root directory or native file")
    p.add_argument("--format", choices=("cub", "native"), default="cub")
    sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    sub.add_parser("learn-prototypes", parents=[common], help="choose pose regions")
    p = sub.add_parser("warp-regions", parents=[common], help="write normalized crops and alignment errors")
    p.add_argument("--no-images", action="store_true", help="skip writing region PNGs")
    sub.add_parser("extract", parents=[common], help="compute assembled feature vectors")
    sub.add_parser("train", parents=[common], help="train one-vs-all linear SVMs")
    sub.add_parser("eval", parents=[common], help="report test accuracy")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        _diagnose("UsageError", str(exc), 1)
        return 1
    except PoseNormError as exc:
        extra = {}
        if getattr(exc, "uncovered", None):
            extra["uncovered"] = [list(c) if isinstance(c, tuple) else c for c in exc.uncovered]
        _diagnose(type(exc).__name__, str(exc), exc.exit_code, **extra)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
