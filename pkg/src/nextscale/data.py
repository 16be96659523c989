"""Toy dataset generation, image file I/O, and the degradation pipeline.

Images are (channels, H, W) float arrays in [0, 1]. The synthetic
generators (oriented gradients, Gaussian blobs, checkerboards, stroke
sketches) keep the acceptance suite free of external data; a folder
loader ingests PGM/PNG corpora.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .codec import bilinear_resize
from .ndcore import Rng

GENERATOR_KINDS = ("gradient", "blobs", "checker", "strokes")


# -- elementary image ops -------------------------------------------------------


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate padding; identity for sigma <= 0."""
    if sigma <= 0:
        return image
    rad = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-rad, rad + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    squeeze = image.ndim == 2
    img = image[None] if squeeze else image
    padded = np.pad(img, ((0, 0), (rad, rad), (rad, rad)), mode="edge")
    # horizontal then vertical pass
    tmp = None
    for i, w in enumerate(k):
        part = padded[:, :, i : i + img.shape[2]] * w
        tmp = part if tmp is None else tmp + part
    out = None
    for i, w in enumerate(k):
        part = tmp[:, i : i + img.shape[1], :] * w
        out = part if out is None else out + part
    return out[0] if squeeze else out


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


# -- synthetic generators --------------------------------------------------------


def gradient_image(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    theta = float(rng.uniform((), 0, 2 * np.pi))
    img = 0.5 + 0.45 * ((xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta))
    return np.clip(img, 0, 1)[None]


def blob_image(rng: Rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 6))):
        cx, cy = rng.uniform((2,), 0.15, 0.85)
        s = float(rng.uniform((), 0.08, 0.25))
        amp = float(rng.uniform((), 0.4, 1.0))
        img += amp * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s)))
    img /= max(img.max(), 1e-9)
    return np.clip(img, 0, 1)[None]


def checker_image(rng: Rng, size: int) -> np.ndarray:
    period = int(2 ** rng.integers(3, 5))  # 8 or 16 px, axis aligned
    idx = np.arange(size)
    img = (((idx[:, None] // period) + (idx[None, :] // period)) % 2).astype(np.float64)
    img = 0.15 + 0.7 * img
    img = gaussian_blur(img, 0.8)
    return np.clip(img, 0, 1)[None]


def stroke_image(rng: Rng, size: int) -> np.ndarray:
    """Dark pen strokes on a light background, antialiased by a distance field."""
    img = np.full((size, size), 0.9)
    py, px = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(4, 7))):
        x0, y0, x1, y1 = rng.uniform((4,), 4, size - 5)
        dx, dy = x1 - x0, y1 - y0
        norm2 = dx * dx + dy * dy + 1e-9
        t = np.clip(((px - x0) * dx + (py - y0) * dy) / norm2, 0, 1)
        dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
        img = np.minimum(img, 0.1 + 0.8 * np.clip(dist - 1.0, 0, 3) / 3)
    return np.clip(img, 0, 1)[None]


_GENERATORS = {
    "gradient": gradient_image,
    "blobs": blob_image,
    "checker": checker_image,
    "strokes": stroke_image,
}


def toy_image(rng: Rng, kind: str, size: int) -> np.ndarray:
    return _GENERATORS[kind](rng, size)


def make_toyset(n: int, size: int, seed: int, out_dir, fmt: str = "pgm") -> Path:
    """Write n synthetic HR images plus a manifest CSV; byte-identical
    for identical arguments. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    rows = []
    for i in range(n):
        kind = GENERATOR_KINDS[i % len(GENERATOR_KINDS)]
        img = toy_image(root.child(100 + i), kind, size)
        name = f"toy_{i:04d}_{kind}.{fmt}"
        save_image(out / name, img)
        rows.append((name, kind, seed))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "generator", "seed"])
        w.writerows(rows)
    return manifest


# -- degradation -----------------------------------------------------------------


def degrade(
    hr: np.ndarray,
    rng: Rng,
    factor: int = 4,
    blur_range: tuple[float, float] = (0.2, 1.5),
    noise_range: tuple[float, float] = (0.0, 0.05),
) -> np.ndarray:
    """HR -> LR: Gaussian blur (sigma drawn from blur_range), bilinear
    1/factor downsample, additive Gaussian noise (std drawn from
    noise_range, relative to unit range), clipped to [0, 1]. Degenerate
    zero ranges reduce to a pure bilinear downsample."""
    hr = np.asarray(hr, dtype=np.float64)
    c, h, w = hr.shape
    sigma = float(rng.uniform((), *blur_range)) if blur_range[1] > 0 else 0.0
    out = gaussian_blur(hr, sigma)
    out = bilinear_resize(out, (h // factor, w // factor))
    noise_std = float(rng.uniform((), *noise_range)) if noise_range[1] > 0 else 0.0
    if noise_std > 0:
        out = out + noise_std * rng.normal(out.shape)
    return np.clip(out, 0.0, 1.0)


# -- file I/O --------------------------------------------------------------------


def save_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (single channel)."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"PGM is single-channel, got {img.shape[0]} channels")
        img = img[0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    if magic == b"P5":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    elif magic == b"P2":
        data = np.array(raw[pos:].split()[: w * h], dtype=np.float64).reshape(h, w)
    else:
        raise ValueError(f"not a PGM file: magic {magic!r}")
    return (np.asarray(data, dtype=np.float64) / maxval)[None]


def save_png(path, image: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    from matplotlib import image as mpimg

    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    img = np.clip(img, 0, 1)
    if img.ndim == 2:
        # write gray as explicit RGB; the colormap path quantizes twice
        img = np.repeat(img[:, :, None], 3, axis=2)
    mpimg.imsave(path, img, vmin=0.0, vmax=1.0)


def load_png(path, channels: int = 1) -> np.ndarray:
    from matplotlib import image as mpimg

    arr = np.asarray(mpimg.imread(path), dtype=np.float64)
    if arr.ndim == 2:
        img = arr[None]
    else:
        img = arr[:, :, :3].transpose(2, 0, 1)
    if channels == 1 and img.shape[0] == 3:
        img = img.mean(axis=0, keepdims=True)
    elif channels == 3 and img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return np.clip(img, 0, 1)


def save_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        save_pgm(path, image)
    elif path.suffix.lower() == ".png":
        save_png(path, image)
    else:
        raise ValueError(f"unsupported image format: {path.suffix}")


def load_image(path, channels: int = 1) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        img = load_pgm(path)
        return np.repeat(img, 3, axis=0) if channels == 3 else img
    if path.suffix.lower() == ".png":
        return load_png(path, channels)
    raise ValueError(f"unsupported image format: {path.suffix}")


def load_folder(folder, channels: int = 1) -> tuple[list[np.ndarray], list[str]]:
    """All PGM/PNG images in a directory, sorted by filename."""
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"dataset folder not found: {folder}")
    names = sorted(
        p.name for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".png")
    )
    if not names:
        raise FileNotFoundError(f"no .pgm/.png images in {folder}")
    return [load_image(folder / n, channels) for n in names], names
