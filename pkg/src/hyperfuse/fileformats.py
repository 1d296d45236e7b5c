"""On-disk formats: FDT tensors, PPM images, model/adapter manifests, CSV and SVG reports.

FDT layout (all little-endian)::

    b"FDT1" | rank: u32 | dims: rank * u32 | payload: prod(dims) * f64, row-major
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .lora_ensemble import Layer, LoraAdapter, ToyModel, merge

MAGIC = b"FDT1"


class FormatError(ValueError):
    pass


def fdt_bytes(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def fdt_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not an FDT1 tensor")
    (rank,) = struct.unpack_from("<I", data, 4)
    end = 8 + 4 * rank
    if len(data) < end:
        raise FormatError("truncated FDT header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - end != 8 * count:
        raise FormatError(f"payload holds {len(data) - end} bytes, expected {8 * count}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=end).astype(np.float64).reshape(dims)


def write_fdt(path, array) -> None:
    Path(path).write_bytes(fdt_bytes(array))


def read_fdt(path) -> np.ndarray:
    return fdt_from_bytes(Path(path).read_bytes())


def write_ppm(path, image) -> None:
    """Binary P6, 8 bits per channel; ``image`` holds floats in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    h, w, _ = img.shape
    pix = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError("only 8-bit P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# adapters and models


def save_adapters(directory, adapters, **extra) -> Path:
    """One FDT per factor plus ``adapters.json`` (target_layer, rank, scale, files)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ad in enumerate(adapters):
        b_file, a_file = f"adapter{i}_B.fdt", f"adapter{i}_A.fdt"
        write_fdt(d / b_file, ad.b_factor)
        write_fdt(d / a_file, ad.a_factor)
        entries.append({
            "target_layer": ad.target_layer, "rank": ad.rank, "scale": ad.scale,
            "b_file": b_file, "a_file": a_file,
        })
    manifest = d / "adapters.json"
    manifest.write_text(json.dumps({**extra, "adapters": entries}, indent=2, sort_keys=True))
    return manifest


def load_adapters(directory):
    """Return ``(adapters, manifest_dict)``."""
    d = Path(directory)
    meta = json.loads((d / "adapters.json").read_text())
    adapters = []
    for e in meta["adapters"]:
        ad = LoraAdapter(e["target_layer"], read_fdt(d / e["b_file"]), read_fdt(d / e["a_file"]), float(e["scale"]))
        if ad.rank != e["rank"]:
            raise FormatError(f"manifest rank {e['rank']} disagrees with factor shape")
        adapters.append(ad)
    return adapters, meta


def save_model(directory, model: ToyModel) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for stage, group in (("text", model.text_encoder_layers), ("unet", model.unet_layers)):
        for l in group:
            fname = f"{l.name}.fdt"
            write_fdt(d / fname, l.weight)
            layers.append({"name": l.name, "stage": stage, "activation": l.activation, "file": fname})
    labels = sorted(model.embedding_table)
    write_fdt(d / "embeddings.fdt", np.stack([model.embedding_table[k] for k in labels]))
    manifest = d / "model.json"
    manifest.write_text(json.dumps({"layers": layers, "embedding_labels": labels}, indent=2))
    return manifest


def load_model(directory) -> ToyModel:
    d = Path(directory)
    meta = json.loads((d / "model.json").read_text())
    text, unet = [], []
    for e in meta["layers"]:
        layer = Layer(e["name"], read_fdt(d / e["file"]), e["activation"])
        (text if e["stage"] == "text" else unet).append(layer)
    emb = read_fdt(d / "embeddings.fdt")
    return ToyModel(text, unet, {k: emb[i] for i, k in enumerate(meta["embedding_labels"])})


def load_model_or_adapters(directory, base: ToyModel) -> ToyModel:
    """A saved model directory, or an adapter directory merged onto ``base``."""
    d = Path(directory)
    if (d / "model.json").exists():
        return load_model(d)
    if (d / "adapters.json").exists():
        return merge(base, load_adapters(d)[0])
    raise FileNotFoundError(f"{d} holds neither model.json nor adapters.json")


# --------------------------------------------------------------------------
# reports


def csv_text(columns, rows, config=None) -> str:
    """CSV with an optional ``# config: {...}`` header line echoing the effective config."""
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, columns, rows, config=None) -> None:
    Path(path).write_text(csv_text(columns, rows, config))


def read_csv(path):
    """Return ``(config_or_None, header, rows)`` with rows as lists of strings."""
    lines = Path(path).read_text().splitlines()
    config = None
    body = []
    for line in lines:
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: "):])
        elif not line.startswith("#"):
            body.append(line)
    rows = list(csv.reader(body))
    return config, rows[0], rows[1:]


def scatter_svg(points, labels, kinds, size: int = 400, margin: int = 40) -> str:
    """Minimal SVG scatter plot; one ``<circle>`` per adapter, one ``<rect>`` per fused model."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 1:
        raise ValueError("points must be (n, >=1)")
    if pts.shape[1] == 1:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    lo = pts.min(axis=0)
    span = np.where(pts.max(axis=0) - lo > 0, pts.max(axis=0) - lo, 1.0)
    scaled = margin + (pts[:, :2] - lo) / span * (size - 2 * margin)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]
    for (x, y), label, kind in zip(scaled, labels, kinds):
        y = size - y
        if kind == "adapter":
            out.append(f'<circle class="adapter" cx="{x:.2f}" cy="{y:.2f}" r="5" fill="steelblue"/>')
        else:
            out.append(f'<rect class="model" x="{x - 5:.2f}" y="{y - 5:.2f}" width="10" height="10" fill="firebrick"/>')
        out.append(f'<text x="{x + 7:.2f}" y="{y - 7:.2f}" font-size="10">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
