#!/usr/bin/env python3
"""Reduced-scale OSCD run with a threshold ordering check.

Converts the Onera Satellite Change Detection training cities into the
deltascope raster format, builds a dataset, cross-validates a narrow EF-bce
model for a few epochs, then evaluates every fold checkpoint at thresholds
0.3 and 0.7. Exits 0 when recall at 0.3 is at least recall at 0.7 on every
validation fold, 1 otherwise.

This is a sanity check of the pipeline on real imagery, not a reproduction of
the published scores.

Expected layout (as distributed):
    <images>/<city>/imgs_1_rect/B01.tif ... B12.tif, B8A.tif
    <images>/<city>/imgs_2_rect/...
    <labels>/<city>/cm/cm.png

Requires numpy and Pillow.
"""

import argparse
import json
import pathlib
import subprocess
import sys

import numpy as np
from PIL import Image

TRAIN_CITIES = [
    "aguasclaras", "bercy", "bordeaux", "nantes", "paris", "rennes", "saclay_e",
    "abudhabi", "cupertino", "pisa", "beihai", "hongkong", "beirut", "mumbai",
]
BANDS = [
    ("B01", 442.7, 60), ("B02", 492.4, 10), ("B03", 559.8, 10), ("B04", 664.6, 10),
    ("B05", 704.1, 20), ("B06", 740.5, 20), ("B07", 782.8, 20), ("B08", 832.8, 10),
    ("B8A", 864.7, 20), ("B09", 945.1, 60), ("B10", 1373.5, 60), ("B11", 1613.7, 20),
    ("B12", 2202.4, 20),
]


def write_raster(stack, header):
    """stack: bands x H x W uint16."""
    payload = header.with_suffix(".raw")
    stack.astype("<u2").tofile(payload)
    meta = {
        "width": int(stack.shape[2]),
        "height": int(stack.shape[1]),
        "dtype": "u16",
        "bands": [{"id": b, "wavelength_nm": w, "native_res_m": r} for b, w, r in BANDS],
        "data": payload.name,
    }
    header.write_text(json.dumps(meta, indent=2) + "\n")


def load_stack(folder):
    planes = [np.array(Image.open(folder / f"{band}.tif"), dtype=np.uint16) for band, _, _ in BANDS]
    h = min(p.shape[0] for p in planes)
    w = min(p.shape[1] for p in planes)
    return np.stack([p[:h, :w] for p in planes])


def convert(images, labels, city, out):
    pre = load_stack(images / city / "imgs_1_rect")
    post = load_stack(images / city / "imgs_2_rect")
    gt = np.array(Image.open(labels / city / "cm" / "cm.png").convert("L")) > 127
    h = min(pre.shape[1], post.shape[1], gt.shape[0])
    w = min(pre.shape[2], post.shape[2], gt.shape[1])
    write_raster(pre[:, :h, :w], out / f"{city}_pre.json")
    write_raster(post[:, :h, :w], out / f"{city}_post.json")
    with open(out / f"{city}_gt.pgm", "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write((gt[:h, :w] * 255).astype(np.uint8).tobytes())
    return {"id": city, "pre": f"{city}_pre.json", "post": f"{city}_post.json", "gt": f"{city}_gt.pgm"}


def run(cli, *args):
    print("+", cli, " ".join(args), flush=True)
    subprocess.run([cli, *args], check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=pathlib.Path, required=True)
    ap.add_argument("--labels", type=pathlib.Path, required=True)
    ap.add_argument("--work", type=pathlib.Path, default=pathlib.Path("oscd_work"))
    ap.add_argument("--cli", default="build/tools/deltascope")
    ap.add_argument("--cities", nargs="*", default=TRAIN_CITIES)
    ap.add_argument("--crops", type=int, default=40)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    scenes_dir = args.work / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    scenes = [convert(args.images, args.labels, c, scenes_dir) for c in args.cities]
    (scenes_dir / "scenes.json").write_text(json.dumps({"scenes": scenes}, indent=2))

    ds, runs = args.work / "dataset", args.work / "runs"
    seed = str(args.seed)
    run(args.cli, "build-dataset", "--scenes", str(scenes_dir / "scenes.json"), "--out", str(ds),
        "--crops", str(args.crops), "--kfold", "5", "--seed", seed)
    run(args.cli, "train", "--dataset", str(ds / "manifest.json"), "--folds", str(ds / "folds.json"),
        "--model", "EF-bce", "--out", str(runs), "--epochs", str(args.epochs), "--depth", str(args.depth),
        "--base-width", str(args.base_width), "--threshold", "0.3", "--seed", seed)

    checkpoints = sorted(runs.glob("EF-bce_fold*[0-9].json"))
    recalls = {}
    for t in ("0.3", "0.7"):
        out = args.work / f"metrics_{t}.json"
        ck_args = [a for c in checkpoints for a in ("--checkpoint", str(c))]
        run(args.cli, "evaluate", *ck_args, "--dataset", str(ds / "manifest.json"),
            "--folds", str(ds / "folds.json"), "--threshold", t, "--out", str(out))
        recalls[t] = [f["metrics"]["recall"] for f in json.loads(out.read_text())["folds"]]

    ok = True
    for fold, (low, high) in enumerate(zip(recalls["0.3"], recalls["0.7"])):
        ordered = low is not None and high is not None and low >= high
        ok &= ordered
        print(f"fold {fold}: recall@0.3={low} recall@0.7={high} {'ok' if ordered else 'VIOLATED'}")
    print("ordering check", "passed" if ok else "failed")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
