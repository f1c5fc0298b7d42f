#!/usr/bin/env python3
"""Wrap a raw HOG array (for example DPM root or part filter weights) in a
descriptor container that `fvtb invert --descriptor` and `fvtb glyph
--descriptor` accept.

Input is a .npy file, an .npz file (first array, or --key), or a whitespace
text file with --shape. The array must be laid out [rows, cols, channels].
"""
import argparse
import json
import struct
import sys

import numpy as np

MAGIC = b"FVTB"
VERSION = 1


def align64(n):
    return (n + 63) & ~63


def container_bytes(hog, cell_size):
    payload = np.ascontiguousarray(hog, dtype="<f8").tobytes()
    start = 0
    while True:
        header = {
            "metadata": {"type": "hog_descriptor", "cell_size": cell_size},
            "tensors": [{
                "name": "hog",
                "dtype": "f64",
                "shape": list(hog.shape),
                "byte_offset": start,
                "byte_length": len(payload),
            }],
        }
        text = json.dumps(header, separators=(",", ":")).encode()
        need = align64(16 + len(text))
        if need == start:
            break
        start = need
    out = MAGIC + struct.pack("<IQ", VERSION, len(text)) + text
    out += b"\0" * (start - len(out))
    return out + payload


def load(path, key, shape):
    if path.endswith(".npy"):
        return np.load(path)
    if path.endswith(".npz"):
        z = np.load(path)
        return z[key] if key else z[z.files[0]]
    if not shape:
        sys.exit("text input needs --shape rows,cols,channels")
    return np.loadtxt(path).reshape([int(s) for s in shape.split(",")])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("input")
    ap.add_argument("output")
    ap.add_argument("--key", help="array name inside an .npz")
    ap.add_argument("--shape", help="rows,cols,channels for text input")
    ap.add_argument("--channels", type=int, default=31,
                    help="keep the first N channels (DPM filters carry a 32nd truncation channel)")
    ap.add_argument("--cell-size", type=int, default=8)
    args = ap.parse_args()

    hog = np.asarray(load(args.input, args.key, args.shape), dtype=np.float64)
    if hog.ndim != 3:
        sys.exit(f"expected a 3-d array, got shape {hog.shape}")
    if hog.shape[2] < args.channels:
        sys.exit(f"array has {hog.shape[2]} channels, fewer than {args.channels}")
    hog = hog[:, :, :args.channels]
    with open(args.output, "wb") as f:
        f.write(container_bytes(hog, args.cell_size))
    print(f"wrote {args.output} ({hog.shape[0]}x{hog.shape[1]} cells, {hog.shape[2]} channels)")


if __name__ == "__main__":
    main()
