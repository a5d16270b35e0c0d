"""Synthetic labeled shape-glyph images plus the file formats around them.

Images are 16x16x3 float32 in [0,1]: one antialiased shape (circle, square,
triangle, cross) in one of four colors, centered in one of the four image
quadrants with small position jitter. Labels are exact by construction and
the joint class id is shape*16 + color*4 + position. Generation is a pure
function of (n, seed, split).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("tl", "tr", "bl", "br")
COLOR_RGB = np.array(
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
    dtype=np.float32)
N_CLASSES = 64

_SPLIT_CODES = {"train": 0, "val": 1}


def class_id(shape: int, color: int, pos: int) -> int:
    return shape * 16 + color * 4 + pos


def decompose_class(cid: int) -> tuple[int, int, int]:
    return cid // 16, (cid // 4) % 4, cid % 4


# ---------------------------------------------------------------- rendering


def _box_sdf(dx, dy, bx, by):
    qx = np.abs(dx) - bx
    qy = np.abs(dy) - by
    outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2)
    return outside + np.minimum(np.maximum(qx, qy), 0.0)


def _shape_sdf(shape: int, dx, dy, r: float):
    if shape == 0:  # circle
        return np.sqrt(dx * dx + dy * dy) - r
    if shape == 1:  # square
        return np.maximum(np.abs(dx), np.abs(dy)) - 0.82 * r
    if shape == 2:  # triangle, apex up: intersection of three half-planes
        verts = np.array([[0.0, -r], [-0.95 * r, 0.78 * r], [0.95 * r, 0.78 * r]])
        sd = np.full_like(dx, -np.inf)
        for i in range(3):
            a, b = verts[i], verts[(i + 1) % 3]
            e = b - a
            # Outward normal for clockwise vertices in y-down image coords.
            n = np.array([-e[1], e[0]]) / np.hypot(e[0], e[1])
            sd = np.maximum(sd, (dx - a[0]) * n[0] + (dy - a[1]) * n[1])
        return sd
    if shape == 3:  # cross: union of two bars
        return np.minimum(_box_sdf(dx, dy, r, 0.36 * r),
                          _box_sdf(dx, dy, 0.36 * r, r))
    raise ValueError(f"unknown shape id {shape}")


def render_glyph(shape: int, color: int, pos: int, rng, size: int = 16) -> np.ndarray:
    """One antialiased glyph in its quadrant with jittered center and radius."""
    half = size // 2
    qr, qc = pos // 2, pos % 2
    jitter = rng.uniform(-0.6, 0.6, size=2)
    cy = qr * half + half / 2 + jitter[0]
    cx = qc * half + half / 2 + jitter[1]
    # Radius range keeps the four shapes visually separable at this
    # resolution while holding >80% of the glyph's mass in its quadrant
    # at worst-case jitter.
    r = rng.uniform(0.42 * half, 0.55 * half)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    sd = _shape_sdf(shape, xs - cx, ys - cy, r)
    cov = np.clip(0.5 - sd, 0.0, 1.0)  # one-pixel antialiasing band
    return (cov[:, :, None] * COLOR_RGB[color]).astype(np.float32)


# ----------------------------------------------------------------- dataset


@dataclass
class ShapeDataset:
    images: np.ndarray      # (n, size, size, 3) float32
    shape_ids: np.ndarray   # (n,) int64
    color_ids: np.ndarray
    pos_ids: np.ndarray
    class_ids: np.ndarray
    seed: int
    split: str

    def __len__(self) -> int:
        return self.images.shape[0]


def _block_labels(n: int, seed: int, split_code: int) -> np.ndarray:
    """Stratified labels: every block of four samples sees each value of each
    attribute exactly once (independent seeded permutation per attribute), so
    any class count over n samples is within +-1 of n/4."""
    labels = np.empty((n, 3), dtype=np.int64)
    for block in range((n + 3) // 4):
        take = min(4, n - block * 4)
        for attr in range(3):
            rng = np.random.default_rng([seed, split_code, 7, block, attr])
            labels[block * 4:block * 4 + take, attr] = rng.permutation(4)[:take]
    return labels


def generate_dataset(n: int, seed: int, split: str = "train", size: int = 16) -> ShapeDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in _SPLIT_CODES:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(_SPLIT_CODES)}")
    code = _SPLIT_CODES[split]
    labels = _block_labels(n, seed, code)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, code, 11, i])
        images[i] = render_glyph(labels[i, 0], labels[i, 1], labels[i, 2], rng, size)
    sh, co, po = labels[:, 0], labels[:, 1], labels[:, 2]
    return ShapeDataset(images, sh, co, po, sh * 16 + co * 4 + po, seed, split)


# ---------------------------------------------------------------- PPM I/O


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6, maxval 255. Float images in [0,1] are rounded to bytes."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _read_header_token(f) -> bytes:
    """Next whitespace-delimited token, skipping # comments."""
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("truncated header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path: str) -> np.ndarray:
    """Read binary P6 into float32 (H,W,3) in [0,1]."""
    with open(path, "rb") as f:
        if _read_header_token(f) != b"P6":
            raise ValueError(f"{path}: not a binary P6 file")
        w = int(_read_header_token(f))
        h = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0


# ---------------------------------------------------------------- manifest


def write_manifest(path: str, rows) -> None:
    """Tab-separated: index, shape, color, position, filename."""
    with open(path, "w", encoding="ascii") as f:
        for idx, sh, co, po, name in rows:
            f.write(f"{idx}\t{sh}\t{co}\t{po}\t{name}\n")


def read_manifest(path: str):
    rows = []
    with open(path, encoding="ascii") as f:
        for ln, line in enumerate(f):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln + 1}: expected 5 tab-separated fields")
            rows.append((int(parts[0]), parts[1], parts[2], parts[3], parts[4]))
    return rows


def export_dataset(ds: ShapeDataset, out_dir: str) -> None:
    """Write every image as PPM plus a manifest.tsv."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        name = f"img_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), ds.images[i])
        rows.append((i, SHAPES[ds.shape_ids[i]], COLORS[ds.color_ids[i]],
                     POSITIONS[ds.pos_ids[i]], name))
    write_manifest(os.path.join(out_dir, "manifest.tsv"), rows)


# ----------------------------------------------------------------- metrics


def psnr(x: np.ndarray, y: np.ndarray, cap: float = 99.0) -> float:
    """Peak SNR in dB for [0,1] images; capped so identical inputs are finite."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("psnr requires equal shapes")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(x: np.ndarray, y: np.ndarray, window: int = 8, stride: int = 4) -> float:
    """Mean local SSIM over channel-mean grayscale with sliding windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("ssim requires equal shapes")
    gx = x.mean(axis=2) if x.ndim == 3 else x
    gy = y.mean(axis=2) if y.ndim == 3 else y
    H, W = gx.shape
    if H < window or W < window:
        raise ValueError("image smaller than ssim window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(0, H - window + 1, stride):
        for j in range(0, W - window + 1, stride):
            a = gx[i:i + window, j:j + window]
            b = gy[i:i + window, j:j + window]
            ma, mb = a.mean(), b.mean()
            va, vb = a.var(), b.var()
            cov = ((a - ma) * (b - mb)).mean()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))
