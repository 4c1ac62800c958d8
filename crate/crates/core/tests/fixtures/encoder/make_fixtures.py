"""Builds the toy encoder graph and parity fixtures used by the Rust tests.

The graph has the same interface as an exported CLIP image tower
(`pixel_values` -> `features_penultimate`, `features_final`) but random
weights and a handful of layers, so it can be committed.

Run from this directory:  python3 make_fixtures.py
"""

import hashlib
import json
import math
import os

import numpy as np
import torch
from PIL import Image
from torch import nn

SIDE = 224
MEANS = [0.48145466, 0.4578275, 0.40821073]
STDS = [0.26862954, 0.26130258, 0.27577711]
WIDTH = 64
PROJ = 32
PATCH = 32
SIZES = [(256, 256), (300, 200), (180, 320), (224, 224), (97, 150)]


def keys_kernel(x, a=-0.5):
    x = abs(x)
    if x < 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return (((x - 5.0) * x + 8.0) * x - 4.0) * a
    return 0.0


def axis_weights(n_in, n_out):
    scale = n_in / n_out
    fscale = max(scale, 1.0)
    support = 2.0 * fscale
    out = []
    for i in range(n_out):
        center = (i + 0.5) * scale
        lo = max(int(math.floor(center - support + 0.5)), 0)
        hi = min(int(math.floor(center + support + 0.5)), n_in)
        w = np.array([keys_kernel((j - center + 0.5) / fscale) for j in range(lo, hi)])
        out.append((lo, w / w.sum()))
    return out


def resize(plane, new_w, new_h):
    h, w = plane.shape
    tmp = np.zeros((h, new_w))
    for x, (lo, wt) in enumerate(axis_weights(w, new_w)):
        tmp[:, x] = plane[:, lo:lo + len(wt)] @ wt
    out = np.zeros((new_h, new_w))
    for y, (lo, wt) in enumerate(axis_weights(h, new_h)):
        out[y, :] = wt @ tmp[lo:lo + len(wt), :]
    return out


def preprocess(rgb):
    h, w = rgb.shape[:2]
    if w <= h:
        new_w, new_h = SIDE, int(math.floor(h * SIDE / w + 0.5))
    else:
        new_w, new_h = int(math.floor(w * SIDE / h + 0.5)), SIDE
    left, top = (new_w - SIDE) // 2, (new_h - SIDE) // 2
    chans = []
    for c in range(3):
        plane = resize(rgb[:, :, c].astype(np.float64) / 255.0, new_w, new_h)
        plane = plane[top:top + SIDE, left:left + SIDE]
        chans.append((plane - MEANS[c]) / STDS[c])
    return np.stack(chans).astype(np.float32)


class Block(nn.Module):
    def __init__(self):
        super().__init__()
        self.ln1 = nn.LayerNorm(WIDTH)
        self.attn = nn.MultiheadAttention(WIDTH, 4, batch_first=True)
        self.ln2 = nn.LayerNorm(WIDTH)
        self.mlp = nn.Sequential(nn.Linear(WIDTH, 4 * WIDTH), nn.GELU(), nn.Linear(4 * WIDTH, WIDTH))

    def forward(self, x):
        y = self.ln1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class ToyVit(nn.Module):
    def __init__(self):
        super().__init__()
        tokens = (SIDE // PATCH) ** 2
        self.patch = nn.Conv2d(3, WIDTH, PATCH, PATCH, bias=False)
        self.cls = nn.Parameter(torch.randn(1, 1, WIDTH) * 0.5)
        self.pos = nn.Parameter(torch.randn(1, tokens + 1, WIDTH) * 0.1)
        self.ln_pre = nn.LayerNorm(WIDTH)
        self.blocks = nn.Sequential(Block(), Block())
        self.ln_post = nn.LayerNorm(WIDTH)
        self.proj = nn.Linear(WIDTH, PROJ, bias=False)

    def forward(self, pixel_values):
        x = self.patch(pixel_values).flatten(2).transpose(1, 2)
        cls = self.cls.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos
        x = self.blocks(self.ln_pre(x))
        pen = self.ln_post(x[:, 0, :])
        return pen, self.proj(pen)


def fixture_image(i, w, h):
    rng = np.random.default_rng(100 + i)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for c in range(3):
        fx, fy, ph = rng.uniform(0.01, 0.08, 2).tolist() + [rng.uniform(0, 6)]
        img[:, :, c] = 128 + 60 * np.sin(fx * xx + ph) * np.cos(fy * yy) + 30 * (xx / w - yy / h)
    for _ in range(4):
        cx, cy, r = rng.uniform(0, w), rng.uniform(0, h), rng.uniform(8, 40)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img[mask] = rng.uniform(0, 255, 3)
    img += rng.normal(0, 6, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_f32(path, arr):
    np.asarray(arr, dtype="<f4").tofile(path)


def main():
    torch.manual_seed(0)
    model = ToyVit().eval()
    name = "toy_vit"
    dummy = torch.zeros(1, 3, SIDE, SIDE)
    torch.onnx.export(
        model, (dummy,), f"{name}.onnx", input_names=["pixel_values"],
        output_names=["features_penultimate", "features_final"],
        dynamic_axes={"pixel_values": {0: "batch"}, "features_penultimate": {0: "batch"}, "features_final": {0: "batch"}},
        opset_version=17, dynamo=False,
    )
    import onnx
    graph = onnx.load(f"{name}.onnx")
    # Pin the feature widths so consumers can read them from the graph.
    for out, width in zip(graph.graph.output, (WIDTH, PROJ)):
        out.type.tensor_type.shape.dim[1].ClearField("dim_param")
        out.type.tensor_type.shape.dim[1].dim_value = width
    onnx.checker.check_model(graph)
    onnx.save(graph, f"{name}.onnx")

    os.makedirs("images", exist_ok=True)
    os.makedirs("fixtures", exist_ok=True)
    fixtures = []
    for i, (w, h) in enumerate(SIZES):
        img_path = f"images/fx{i}.png"
        Image.fromarray(fixture_image(i, w, h)).save(img_path)
        rgb = np.asarray(Image.open(img_path).convert("RGB"))
        tensor = preprocess(rgb)
        with torch.no_grad():
            pen, fin = model(torch.from_numpy(tensor)[None])
        stem = f"fixtures/fx{i}"
        write_f32(f"{stem}.tensor.f32", tensor)
        write_f32(f"{stem}.penultimate.f32", pen[0].numpy())
        write_f32(f"{stem}.final.f32", fin[0].numpy())
        record = {
            "image": img_path,
            "tensor": f"{stem}.tensor.f32",
            "tensor_sha256": hashlib.sha256(tensor.astype("<f4").tobytes()).hexdigest(),
            "penultimate": f"{stem}.penultimate.f32",
            "final": f"{stem}.final.f32",
        }
        with open(f"{stem}.json", "w") as f:
            json.dump(record, f, indent=2)
        fixtures.append(f"{stem}.json")

    manifest = {
        "checkpoint": "toy-vit-random-seed0",
        "pretrain_tag": "toy",
        "graph": f"{name}.onnx",
        "preprocess": {
            "target_side": SIDE, "interpolation": "bicubic", "crop": "center",
            "channel_means": MEANS, "channel_stds": STDS,
        },
        "dims": {"penultimate": WIDTH, "final": PROJ},
        "fixtures": fixtures,
    }
    with open(f"{name}.export.json", "w") as f:
        json.dump(manifest, f, indent=2)


if __name__ == "__main__":
    main()
