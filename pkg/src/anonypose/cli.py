"""Command-line entry points: train, anonymize, recover, report.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. The experiment
config is one JSON document validated fully before any work starts; unknown
keys are rejected.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .datasets import load_coco_keypoints, split, synth_generate
from .domain import BoundingBox, ImageBuffer
from .guidance import GuidanceSpec
from .metrics import psnr
from .nets import generator_forward, images_to_tensor, tensor_to_images
from .pipeline import evaluate_run, run_scenes
from .scene import resize_bilinear
from .trainer import TrainConfig, fit, load_checkpoint

CONFIG_SCHEMA_VERSION = 1

REPORT_COLUMNS = [
    "run", "guidance_method", "guidance_strength", "backbone",
    "PSNR(o,p)", "SSIM(o,p)",
    "mAP@0.5_{pre,o}", "mAR@0.5_{pre,o}",
    "mAP@0.5_{pre,p}", "mAR@0.5_{pre,p}",
    "mAP@0.5_{joint,p}", "mAR@0.5_{joint,p}",
    "mAP@0.5_{joint,r}", "mAR@0.5_{joint,r}",
    "PSNR(o,r)", "SSIM(o,r)",
]

_METRIC_KEYS = {
    "PSNR(o,p)": "psnr_op", "SSIM(o,p)": "ssim_op",
    "mAP@0.5_{pre,o}": "map50_pre_o", "mAR@0.5_{pre,o}": "mar50_pre_o",
    "mAP@0.5_{pre,p}": "map50_pre_p", "mAR@0.5_{pre,p}": "mar50_pre_p",
    "mAP@0.5_{joint,p}": "map50_joint_p", "mAR@0.5_{joint,p}": "mar50_joint_p",
    "mAP@0.5_{joint,r}": "map50_joint_r", "mAR@0.5_{joint,r}": "mar50_joint_r",
    "PSNR(o,r)": "psnr_or", "SSIM(o,r)": "ssim_or",
}


class ConfigError(ValueError):
    pass


def _reject_unknown(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_experiment_config(path):
    """Parse and fully validate the experiment config document."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config JSON: {e}") from e
    _reject_unknown(doc, ["schema_version", "train", "dataset", "output_dir",
                          "run_name"], "config")
    if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version must be {CONFIG_SCHEMA_VERSION}")
    for key in ("train", "dataset", "output_dir"):
        if key not in doc:
            raise ConfigError(f"config is missing required key {key!r}")
    try:
        train_config = TrainConfig.from_dict(doc["train"])
    except (TypeError, KeyError, ValueError) as e:
        raise ConfigError(f"invalid train section: {e}") from e
    ds = doc["dataset"]
    _reject_unknown(ds, ["kind", "count", "canvas", "seed", "scale_range",
                         "max_figures", "annotations", "images", "split"],
                    "dataset")
    kind = ds.get("kind")
    if kind not in ("synthetic", "coco"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'coco'")
    if kind == "coco" and ("annotations" not in ds or "images" not in ds):
        raise ConfigError("coco dataset needs 'annotations' and 'images' paths")
    return {"train": train_config, "dataset": ds,
            "output_dir": doc["output_dir"],
            "run_name": doc.get("run_name", "run")}


def build_dataset(ds):
    if ds["kind"] == "synthetic":
        scenes = synth_generate(
            count=ds.get("count", 100),
            canvas=tuple(ds.get("canvas", [64, 64])),
            seed=ds.get("seed", 0),
            scale_range=tuple(ds.get("scale_range", [0.2, 0.6])),
            max_figures=ds.get("max_figures", 3),
        )
    else:
        scenes = load_coco_keypoints(ds["annotations"], ds["images"])
    fractions = ds.get("split", [0.8, 0.1, 0.1])
    return split(scenes, tuple(fractions), ds.get("seed", 0))


def cmd_train(config_path, dry_run=False, seed=None):
    try:
        exp = load_experiment_config(config_path)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if dry_run:
        print("config OK (dry run)")
        return 0
    config = exp["train"]
    if seed is not None:
        config.seed = seed
    try:
        train, val, test = build_dataset(exp["dataset"])
        out_dir = exp["output_dir"]
        state, history = fit(config, train, out_dir)
        eval_scenes = val or test or train
        schema = "synth-13" if exp["dataset"]["kind"] == "synthetic" else "coco-17"
        metrics = evaluate_run(state, eval_scenes, history=history, schema=schema)
        payload = {
            "run": exp["run_name"],
            "guidance": config.guidance.to_dict(),
            "backbone": config.generator.backbone,
            "metrics": metrics,
        }
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump(payload, f, indent=2)
        print(json.dumps(payload["metrics"], indent=2))
        return 0
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


def _load_scene_dir(input_dir):
    ann = os.path.join(input_dir, "annotations.json")
    if not os.path.exists(ann):
        raise FileNotFoundError(f"missing annotations.json in {input_dir}")
    return load_coco_keypoints(ann, os.path.join(input_dir, "images"))


def cmd_anonymize(checkpoint_path, input_dir, output_dir):
    try:
        state = load_checkpoint(checkpoint_path)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        os.makedirs(output_dir, exist_ok=True)
        if not os.path.exists(os.path.join(input_dir, "annotations.json")):
            # empty input is a no-op success
            empty = not os.path.isdir(input_dir) or not os.listdir(input_dir)
            if empty:
                with open(os.path.join(output_dir, "boxes.json"), "w") as f:
                    json.dump({}, f)
                return 0
            raise FileNotFoundError(f"missing annotations.json in {input_dir}")
        scenes = _load_scene_dir(input_dir)
        records = run_scenes(state.bundle, state.config, scenes)
        sidecar = {}
        for r in records:
            r.enhanced.save_png(os.path.join(output_dir, f"{r.scene.id}.png"))
            sidecar[r.scene.id] = [[b.x_min, b.y_min, b.x_max, b.y_max]
                                   for b in r.boxes]
        with open(os.path.join(output_dir, "boxes.json"), "w") as f:
            json.dump(sidecar, f)
        return 0
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


def cmd_recover(checkpoint_path, input_dir, output_dir, original_dir=None):
    try:
        state = load_checkpoint(checkpoint_path)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    sidecar_path = os.path.join(input_dir, "boxes.json")
    if not os.path.exists(sidecar_path):
        print(f"error: sidecar boxes.json missing in {input_dir}", file=sys.stderr)
        return 2
    try:
        import torch
        with open(sidecar_path) as f:
            sidecar = json.load(f)
        originals = {}
        if original_dir is not None:
            for s in _load_scene_dir(original_dir):
                originals[s.id] = s.image
        os.makedirs(output_dir, exist_ok=True)
        cfg = state.config
        g_recover = state.bundle.models["g_recover"]
        g_recover.eval()
        summary = {}
        for scene_id, boxes in sidecar.items():
            img = ImageBuffer.load_png(os.path.join(input_dir, f"{scene_id}.png"))
            out = img.data.copy()
            hp, wp = cfg.portrait_size
            for bx in boxes:
                box = BoundingBox(*bx).clamp(img.width, img.height)
                patch = img.data[box.y_min:box.y_max, box.x_min:box.x_max, :]
                t = images_to_tensor([ImageBuffer(
                    resize_bilinear(patch, hp, wp))])
                with torch.no_grad():
                    rec = generator_forward(g_recover, cfg.generator, t)
                rec_img = tensor_to_images(rec)[0]
                out[box.y_min:box.y_max, box.x_min:box.x_max, :] = \
                    resize_bilinear(rec_img.data, box.height, box.width)
            recovered = ImageBuffer(out)
            recovered.save_png(os.path.join(output_dir, f"{scene_id}.png"))
            entry = {"boxes": boxes}
            if scene_id in originals:
                entry["psnr_or"] = psnr(originals[scene_id], recovered)
            summary[scene_id] = entry
        with open(os.path.join(output_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2, default=str)
        return 0
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


def _fmt(v):
    if v is None:
        return "—"
    if isinstance(v, float):
        if v != v:  # nan
            return "—"
        return f"{v:.4g}"
    return str(v)


def collect_report_rows(run_dirs):
    rows = []
    for d in run_dirs:
        path = os.path.join(d, "metrics.json")
        row = {c: None for c in REPORT_COLUMNS}
        row["run"] = os.path.basename(os.path.normpath(d))
        if os.path.exists(path):
            with open(path) as f:
                payload = json.load(f)
            row["run"] = payload.get("run", row["run"])
            g = payload.get("guidance", {})
            row["guidance_method"] = g.get("method")
            row["guidance_strength"] = g.get("strength")
            row["backbone"] = payload.get("backbone")
            m = payload.get("metrics", {})
            for col, key in _METRIC_KEYS.items():
                row[col] = m.get(key)
        rows.append(row)
    return rows


def cmd_report(run_dirs, csv_path=None):
    try:
        rows = collect_report_rows(run_dirs)
        widths = {c: max(len(c), *(len(_fmt(r[c])) for r in rows))
                  for c in REPORT_COLUMNS}
        header = "  ".join(c.ljust(widths[c]) for c in REPORT_COLUMNS)
        print(header)
        print("-" * len(header))
        for r in rows:
            print("  ".join(_fmt(r[c]).ljust(widths[c]) for c in REPORT_COLUMNS))
        if csv_path:
            with open(csv_path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
                writer.writeheader()
                for r in rows:
                    writer.writerow({c: ("" if r[c] is None else r[c])
                                     for c in REPORT_COLUMNS})
        return 0
    except Exception as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anonypose",
        description="Recoverable anonymization for pose estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the joint training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--dry-run", action="store_true")

    p_anon = sub.add_parser("anonymize", help="emit privacy-enhanced scenes")
    p_anon.add_argument("--checkpoint", required=True)
    p_anon.add_argument("--input", required=True)
    p_anon.add_argument("--output", required=True)

    p_rec = sub.add_parser("recover", help="recover scenes from enhanced output")
    p_rec.add_argument("--checkpoint", required=True)
    p_rec.add_argument("--input", required=True)
    p_rec.add_argument("--output", required=True)
    p_rec.add_argument("--original", default=None)

    p_rep = sub.add_parser("report", help="render result tables from run dirs")
    p_rep.add_argument("runs", nargs="+")
    p_rep.add_argument("--csv", default=None)
    return parser


def main(argv=None):
    threads = os.environ.get("ANONYPOSE_THREADS")
    if threads:
        import torch
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    if args.command == "train":
        return cmd_train(args.config, dry_run=args.dry_run, seed=args.seed)
    if args.command == "anonymize":
        return cmd_anonymize(args.checkpoint, args.input, args.output)
    if args.command == "recover":
        return cmd_recover(args.checkpoint, args.input, args.output,
                           original_dir=args.original)
    if args.command == "report":
        return cmd_report(args.runs, csv_path=args.csv)
    return 2


if __name__ == "__main__":
    sys.exit(main())
