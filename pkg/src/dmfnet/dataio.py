"""Synthetic dataset generation and the on-disk formats.

Formats: ASCII PLY point clouds, plain-text PNM images (P2/P3), a binary
checkpoint (``DMFN`` magic, sorted text manifest, little-endian float32
payload) and a JSON dataset manifest.

The synthetic shapes stand in for scanned meshes: area-uniform samples of a
sphere, box or cylinder, normalized to the unit ball. Partial clouds come from
a half-space cut perpendicular to one of 24 fixed view directions; images are
binary orthographic silhouettes from an independently drawn view.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dmfnet.errors import (CheckpointError, CountMismatchError, FormatError, HeaderError,
                           ValueParseError)

KINDS = ("sphere", "box", "cylinder")
SPLAT_RADIUS = 1.5
RENDER_SCALE = 0.9
MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"DMFN"
CHECKPOINT_VERSION = 1
TEST_EVERY = 5  # every fifth sample is held out


def _viewpoints():
    dirs = []
    for elev in (30.0, 0.0, -30.0):
        for az in range(0, 360, 45):
            e, a = math.radians(elev), math.radians(az)
            dirs.append((math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)))
    return np.array(dirs)


# three elevation rings (+30, 0, -30 degrees) x eight azimuths (every 45 degrees)
VIEWPOINTS = _viewpoints()


@dataclass
class CloudSample:
    partial: np.ndarray
    image: np.ndarray
    gt: np.ndarray
    category: str
    viewpoint: np.ndarray
    image_viewpoint: np.ndarray = None


# shapes --------------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def gen_primitive(kind, n, rng):
    """Area-uniform surface samples of a primitive, scaled into the unit ball."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind == "sphere":
        return _unit(rng.normal(size=(n, 3)))
    if kind == "box":
        ext = rng.uniform(0.3, 1.0, size=3)
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * ext
        sign = rng.choice([-1.0, 1.0], size=n)
        pts[np.arange(n), axis] = sign * ext[axis]
        return pts / np.linalg.norm(ext)
    if kind == "cylinder":
        rad, half = rng.uniform(0.3, 1.0, size=2)
        side, cap = 2 * math.pi * rad * 2 * half, math.pi * rad * rad
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0.0, 2 * math.pi, size=n)
        # caps: sqrt of a uniform radius gives area-uniform discs
        r = np.where(part == 0, rad, rad * np.sqrt(rng.uniform(size=n)))
        z = np.where(part == 0, rng.uniform(-half, half, size=n), np.where(part == 1, half, -half))
        pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
        return pts / math.hypot(rad, half)
    raise ValueError(f"unknown primitive kind {kind!r}; expected one of {KINDS}")


def occlude(gt, viewpoint, fraction, rng):
    """Drop the ``fraction`` of points farthest along ``viewpoint``, resample back to N.

    Every survivor is kept once; the shortfall is drawn from the survivors with
    replacement and appended.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    gt = np.asarray(gt, dtype=np.float64)
    n = gt.shape[0]
    n_drop = min(max(1, int(round(fraction * n))), n - 1)
    proj = gt @ _unit(np.asarray(viewpoint, dtype=np.float64))
    order = np.lexsort((np.arange(n), -proj))
    survivors = np.sort(order[n_drop:])
    extra = rng.choice(survivors, size=n - survivors.size, replace=True)
    return gt[np.concatenate([survivors, extra])]


def _view_basis(viewpoint):
    v = np.asarray(viewpoint, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("viewpoint must be a nonzero finite vector")
    v = v / norm
    helper = np.array([0.0, 0.0, 1.0]) if abs(v[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = _unit(np.cross(helper, v))
    w = np.cross(v, u)
    return u, w


def render_silhouette(gt, viewpoint, h, w):
    """Binary orthographic silhouette (H x W x 3, values 0/1) seen from ``viewpoint``.

    Each point is splatted as a disc of radius 1.5 px. Unit length maps to
    ``0.9 * min(H, W) / 2 - 1.5`` pixels, so the splatted unit sphere fills a
    centered disc of radius ``0.9 * min(H, W) / 2``.
    """
    if h < 8 or w < 8:
        raise ValueError(f"image must be at least 8x8, got {h}x{w}")
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[0] == 0:
        raise ValueError("cannot render an empty cloud")
    u, v = _view_basis(viewpoint)
    unit_px = RENDER_SCALE * min(h, w) / 2.0 - SPLAT_RADIUS
    cx = (w - 1) / 2.0 + (gt @ u) * unit_px
    cy = (h - 1) / 2.0 - (gt @ v) * unit_px
    mask = np.zeros((h, w), dtype=bool)
    reach = int(math.ceil(SPLAT_RADIUS))
    rows, cols = np.arange(h), np.arange(w)
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            py = np.rint(cy).astype(np.int64) + dy
            px = np.rint(cx).astype(np.int64) + dx
            ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
            near = (px - cx) ** 2 + (py - cy) ** 2 <= SPLAT_RADIUS ** 2
            sel = ok & near
            mask[rows[py[sel]], cols[px[sel]]] = True
    img = mask.astype(np.float64)
    return np.repeat(img[:, :, None], 3, axis=2)


# PLY -----------------------------------------------------------------------

def save_ply(path, cloud):
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"cloud must be n x 3, got {cloud.shape}")
    buf = io.StringIO()
    buf.write(f"ply\nformat ascii 1.0\nelement vertex {cloud.shape[0]}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    for x, y, z in cloud:
        buf.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    Path(path).write_bytes(buf.getvalue().encode("ascii"))


def load_ply(path):
    lines = Path(path).read_text(encoding="ascii").split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def expect(i, text):
        if i >= len(lines) or lines[i].strip() != text:
            got = lines[i].strip() if i < len(lines) else "end of file"
            raise HeaderError(f"expected {text!r}, got {got!r}", line=i + 1)

    expect(0, "ply")
    expect(1, "format ascii 1.0")
    parts = lines[2].split() if len(lines) > 2 else []
    if len(parts) != 3 or parts[:2] != ["element", "vertex"] or not parts[2].isdigit():
        raise HeaderError("expected 'element vertex <count>'", line=3)
    count = int(parts[2])
    for i, axis in enumerate("xyz"):
        expect(3 + i, f"property float {axis}")
    expect(6, "end_header")
    body = lines[7:]
    if len(body) != count:
        where = 8 + min(len(body), count)
        raise CountMismatchError(f"header declares {count} vertices, file has {len(body)} rows",
                                 line=where)
    out = np.empty((count, 3))
    for i, row in enumerate(body):
        fields = row.split()
        try:
            if len(fields) != 3:
                raise ValueError
            out[i] = [float(f) for f in fields]
        except ValueError:
            raise ValueParseError(f"expected three numbers, got {row!r}", line=8 + i) from None
    return out


# PNM images ----------------------------------------------------------------

def save_image(path, image, maxval=255):
    """Write a plain PNM: P3 for H x W x 3 arrays, P2 for H x W arrays (values in [0, 1])."""
    image = np.asarray(image, dtype=np.float64)
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)
    h, w = image.shape[:2]
    magic = "P3" if image.ndim == 3 else "P2"
    rows = [" ".join(map(str, q[r].reshape(-1))) for r in range(h)]
    text = f"{magic}\n{w} {h}\n{maxval}\n" + "\n".join(rows) + "\n"
    Path(path).write_bytes(text.encode("ascii"))


def load_image(path):
    """Read a plain PNM into an H x W x 3 float array in [0, 1] (graymaps are replicated)."""
    tokens = []
    for i, raw in enumerate(Path(path).read_text(encoding="ascii").split("\n")):
        for tok in raw.split("#", 1)[0].split():
            tokens.append((tok, i + 1))
    if not tokens or tokens[0][0] not in ("P2", "P3"):
        raise HeaderError("expected P2 or P3 magic", line=1)
    channels = 3 if tokens[0][0] == "P3" else 1
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:4])
    except ValueError:
        raise HeaderError("bad width/height/maxval", line=tokens[1][1] if len(tokens) > 1 else 1) from None
    data = tokens[4:]
    if len(data) != w * h * channels:
        raise CountMismatchError(f"expected {w * h * channels} samples, found {len(data)}",
                                 line=data[-1][1] if data else tokens[-1][1])
    vals = np.empty(len(data))
    for i, (tok, line) in enumerate(data):
        if not tok.isdigit() or int(tok) > maxval:
            raise ValueParseError(f"bad sample {tok!r}", line=line)
        vals[i] = int(tok)
    img = vals.reshape(h, w, channels) / maxval
    return np.repeat(img, 3, axis=2) if channels == 1 else img


# checkpoints ---------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)


def _entries(ckpt: Checkpoint):
    out = {}
    for prefix, group in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in group.items():
            out[f"{prefix}/{name}"] = np.asarray(arr)
    return dict(sorted(out.items()))


def save_checkpoint(path, ckpt: Checkpoint):
    entries = _entries(ckpt)
    lines = [f"epoch {ckpt.epoch}", f"step {ckpt.step}",
             "config " + json.dumps(ckpt.config, sort_keys=True, separators=(",", ":"))]
    for name, arr in entries.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"entry name contains whitespace: {name!r}")
        lines.append(f"{name} f32 {','.join(map(str, arr.shape))}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for arr in entries.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    lines = raw[12:12 + mlen].decode("utf-8").splitlines()
    ckpt = Checkpoint({})
    offset = 12 + mlen
    groups = {"param": ckpt.params, "adam_m": ckpt.adam_m, "adam_v": ckpt.adam_v}
    for line in lines:
        key, _, rest = line.partition(" ")
        if key == "epoch":
            ckpt.epoch = int(rest)
        elif key == "step":
            ckpt.step = int(rest)
        elif key == "config":
            ckpt.config = json.loads(rest)
        else:
            dtype, dims = rest.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"{key}: unsupported dtype {dtype}")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            nbytes = 4 * int(np.prod(shape))
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: payload truncated at {key}")
            arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset)
            group, _, name = key.partition("/")
            groups[group][name] = arr.reshape(shape).astype(np.float64)
            offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return ckpt


def check_compatible(ckpt: Checkpoint, params):
    """Raise naming the first entry where the checkpoint and the model disagree."""
    names = set(params.names())
    for name in sorted(names | set(ckpt.params)):
        if name not in ckpt.params:
            raise CheckpointError(f"model parameter {name!r} missing from checkpoint")
        if name not in names:
            raise CheckpointError(f"checkpoint entry {name!r} has no model parameter")
        if ckpt.params[name].shape != params[name].shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint "
                                  f"{ckpt.params[name].shape}, model {params[name].shape}")


def quantize(arr):
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


# datasets ------------------------------------------------------------------

def make_sample(kind, n, h, w, rng, fraction=0.5):
    gt = gen_primitive(kind, n, rng)
    occ_view = VIEWPOINTS[rng.integers(len(VIEWPOINTS))]
    img_view = VIEWPOINTS[rng.integers(len(VIEWPOINTS))]
    partial = occlude(gt, occ_view, fraction, rng)
    image = render_silhouette(gt, img_view, h, w)
    return CloudSample(partial, image, gt, kind, occ_view, img_view)


def _kind_order(counts):
    left = dict(counts)
    order = []
    while any(left.values()):
        for kind in counts:
            if left[kind]:
                order.append(kind)
                left[kind] -= 1
    return order


def gen_dataset(counts, n, h, w, seed, out_dir, fraction=0.5):
    """Write a reproducible synthetic dataset and return its manifest dict."""
    for kind in counts:
        if kind not in KINDS:
            raise ValueError(f"unknown primitive kind {kind!r}")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for i, kind in enumerate(_kind_order(counts)):
        s = make_sample(kind, n, h, w, np.random.default_rng([seed, i]), fraction)
        stem = f"samples/{i:05d}_{kind}"
        save_ply(out / f"{stem}_partial.ply", s.partial)
        save_ply(out / f"{stem}_gt.ply", s.gt)
        save_image(out / f"{stem}_image.ppm", s.image)
        records.append({
            "partial": f"{stem}_partial.ply",
            "gt": f"{stem}_gt.ply",
            "image": f"{stem}_image.ppm",
            "category": kind,
            "viewpoint": [float(x) for x in s.viewpoint],
            "image_viewpoint": [float(x) for x in s.image_viewpoint],
            "split": "test" if i % TEST_EVERY == TEST_EVERY - 1 else "train",
        })
    manifest = {"version": MANIFEST_VERSION, "n_points": n, "image_size": [h, w],
                "seed": seed, "samples": records}
    write_manifest(out / "manifest.json", manifest)
    return manifest


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path):
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("version", "n_points", "image_size", "samples"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest lacks {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {manifest['version']}")
    return manifest


def load_samples(manifest_path, split=None):
    """Load (and validate) every sample listed in a manifest, optionally one split only."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    n = manifest["n_points"]
    h, w = manifest["image_size"]
    out = []
    for rec in manifest["samples"]:
        if split is not None and rec.get("split", "train") != split:
            continue
        partial = load_ply(root / rec["partial"])
        gt = load_ply(root / rec["gt"])
        image = load_image(root / rec["image"])
        if partial.shape != (n, 3) or gt.shape != (n, 3):
            raise FormatError(f"{rec['partial']}: expected {n} points")
        if image.shape != (h, w, 3):
            raise FormatError(f"{rec['image']}: expected {h}x{w} image, got {image.shape[:2]}")
        out.append(CloudSample(partial, image, gt, rec["category"],
                               np.asarray(rec["viewpoint"]),
                               np.asarray(rec.get("image_viewpoint", rec["viewpoint"]))))
    return out


def validate_manifest(manifest_path):
    return len(load_samples(manifest_path))
