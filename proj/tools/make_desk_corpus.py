#!/usr/bin/env python3
"""Build the small desk-scale corpus used by the tests and the README examples.

Images come from the sample data bundled with scikit-image and scikit-learn.
Writes PNGs, two corpus manifests (train/test) and a JSONL annotation file
with seeded random object boxes on the test images.
"""
import argparse
import hashlib
import json
import os

import numpy as np
import skimage
import skimage.io
import sklearn.datasets

TRAIN = ["camera.png", "rocket.jpg", "brick.png", "grass.png", "gravel.png",
         "coins.png", "moon.png", "motorcycle_right.png", "page.png",
         "sklearn:china.jpg"]
TEST = {"astronaut.png": "person", "chelsea.png": "cat",
        "coffee.png": "cup", "motorcycle_left.png": "motorbike",
        "sklearn:flower.jpg": "flower"}
BOXES_PER_IMAGE = 24


def source_path(name):
    if name.startswith("sklearn:"):
        base = os.path.join(os.path.dirname(sklearn.datasets.__file__), "images")
        return os.path.join(base, name.split(":", 1)[1])
    return os.path.join(os.path.dirname(skimage.__file__), "data", name)


def export(name, out_dir):
    img = skimage.io.imread(source_path(name))
    stem = os.path.splitext(name.split(":")[-1])[0]
    rel = os.path.join("images", stem + ".png")
    skimage.io.imsave(os.path.join(out_dir, rel), img, check_contrast=False)
    with open(os.path.join(out_dir, rel), "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    return {"path": rel, "sha256": digest,
            "width": int(img.shape[1]), "height": int(img.shape[0])}, img


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    os.makedirs(os.path.join(args.out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(args.seed)

    train = [export(n, args.out_dir)[0] for n in TRAIN]
    with open(os.path.join(args.out_dir, "train.json"), "w") as f:
        json.dump({"root": ".", "entries": train}, f, indent=1)

    test, records = [], []
    for name, category in TEST.items():
        entry, img = export(name, args.out_dir)
        test.append(entry)
        h, w = img.shape[:2]
        for _ in range(BOXES_PER_IMAGE):
            side = int(rng.integers(150, min(231, h - 8, w - 8)))
            bw = int(np.clip(side * rng.uniform(0.85, 1.15), 120, w - 8))
            bh = int(np.clip(side * rng.uniform(0.85, 1.15), 120, h - 8))
            x = int(rng.integers(0, w - bw + 1))
            y = int(rng.integers(0, h - bh + 1))
            records.append({"image": entry["path"], "x": x, "y": y,
                            "w": bw, "h": bh, "category": category})
    with open(os.path.join(args.out_dir, "test.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    with open(os.path.join(args.out_dir, "test.json"), "w") as f:
        json.dump({"root": ".", "entries": test,
                   "annotations": "test.jsonl"}, f, indent=1)


if __name__ == "__main__":
    main()
