"""Synthetic cross-modal paired neuron images, PGM/manifest I/O, and
train/validation/test splitting.

Each pair renders one geometry (a soma ellipse, wandering fibers, and a
few neighbor somas) twice: modality A gets a contrast drop and heavier
additive noise, modality B gets a smooth spatial warp plus blur. The warp
is what makes raw pixel-space metrics degrade across modalities while the
structure itself stays recoverable.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 150

# split ratio the 273-pair reference dataset uses
_SPLIT_WEIGHTS = (190, 30, 53)

_SOMA_INTENSITY = 0.9
_FIBER_INTENSITY = 0.62
_NEIGHBOR_INTENSITY = 0.55
_FIBER_STEP = 2.0
_FIBER_MAX_STEPS = 95


class DataError(ValueError):
    """Malformed dataset input: bad manifest, bad image, bad params."""


@dataclass(frozen=True)
class SynthesisParams:
    """Knobs of the paired-image generator.

    ``modality_warp`` is the RMS displacement (pixels) of the smooth warp
    applied to modality B; together with blur/noise/contrast it defines
    the modality gap. All-zero gap values with ``contrast_gap=1`` make
    the two modalities identical.
    """

    soma_radius_range: tuple[float, float] = (6.0, 14.0)
    fiber_count_range: tuple[int, int] = (2, 6)
    fiber_wander: float = 0.35
    neighbor_count_range: tuple[int, int] = (0, 5)
    modality_a_noise: float = 0.10
    modality_b_noise: float = 0.02
    modality_b_blur: float = 1.5
    contrast_gap: float = 0.8
    modality_warp: float = 2.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("soma_radius_range", "fiber_count_range", "neighbor_count_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise DataError(f"{name} is empty: {lo}..{hi}")
        if self.soma_radius_range[0] <= 0:
            raise DataError("soma radius must be positive")
        for name in ("modality_a_noise", "modality_b_noise", "modality_b_blur",
                     "fiber_wander", "modality_warp"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if self.contrast_gap <= 0:
            raise DataError("contrast_gap must be positive")


@dataclass
class PairedSample:
    pair_id: int
    image_a: np.ndarray  # 150x150 float64 in [0,1], "two-photon-like"
    image_b: np.ndarray  # 150x150 float64 in [0,1], "fMOST-like"


@dataclass
class DatasetSplit:
    train: list[PairedSample] = field(default_factory=list)
    validation: list[PairedSample] = field(default_factory=list)
    test: list[PairedSample] = field(default_factory=list)

    def all_pairs(self) -> list[PairedSample]:
        return [*self.train, *self.validation, *self.test]


# ---------------------------------------------------------------------------
# geometry rendering


def _soft_ellipse(yy, xx, cy, cx, r1, r2, theta, edge=0.25):
    dy, dx = yy - cy, xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / r1
    v = (-dx * st + dy * ct) / r2
    d = np.sqrt(u * u + v * v)
    return np.clip((1.0 + edge - d) / edge, 0.0, 1.0)


def _render_geometry(params: SynthesisParams, rng: np.random.Generator) -> np.ndarray:
    s = IMAGE_SIZE
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    canvas = np.zeros((s, s))

    # main soma near the image center (jitter <= 10 px)
    cy, cx = s / 2.0 + rng.uniform(-10, 10, size=2)
    r1 = rng.uniform(*params.soma_radius_range)
    r2 = rng.uniform(*params.soma_radius_range)
    theta = rng.uniform(0.0, math.pi)
    np.maximum(canvas, _SOMA_INTENSITY * _soft_ellipse(yy, xx, cy, cx, r1, r2, theta), out=canvas)

    # fibers: smoothed random walks leaving the soma boundary
    lo, hi = params.fiber_count_range
    n_fibers = int(rng.integers(lo, hi + 1))
    stamps = np.zeros((s, s))
    for _ in range(n_fibers):
        phi = rng.uniform(0.0, 2.0 * math.pi)
        rad = max(r1, r2) * 1.05
        py, px = cy + rad * math.sin(phi), cx + rad * math.cos(phi)
        heading = phi + rng.normal(0.0, 0.3)
        for _ in range(_FIBER_MAX_STEPS):
            heading += rng.normal(0.0, params.fiber_wander)
            py += _FIBER_STEP * math.sin(heading)
            px += _FIBER_STEP * math.cos(heading)
            iy, ix = int(round(py)), int(round(px))
            if not (0 <= iy < s and 0 <= ix < s):
                break
            stamps[iy, ix] = 1.0
    if stamps.any():
        fib = ndimage.gaussian_filter(stamps, 0.8, mode="constant")
        fib /= fib.max()
        np.maximum(canvas, _FIBER_INTENSITY * fib, out=canvas)

    # neighbor somas for context
    lo, hi = params.neighbor_count_range
    n_nb = int(rng.integers(lo, hi + 1))
    for _ in range(n_nb):
        for _ in range(30):  # rejection-sample away from the main soma
            ny, nx = rng.uniform(5, s - 5, size=2)
            if (ny - cy) ** 2 + (nx - cx) ** 2 >= 28.0**2:
                break
        nr1 = rng.uniform(3.0, 7.0)
        nr2 = rng.uniform(3.0, 7.0)
        nth = rng.uniform(0.0, math.pi)
        np.maximum(canvas, _NEIGHBOR_INTENSITY * _soft_ellipse(yy, xx, ny, nx, nr1, nr2, nth),
                   out=canvas)

    return np.clip(canvas, 0.0, 1.0)


def _smooth_warp(img: np.ndarray, rng: np.random.Generator, rms_px: float) -> np.ndarray:
    """Resample through a smooth random displacement field with the given RMS."""
    if rms_px == 0.0:
        return img
    s = img.shape[0]
    disp = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.normal(size=(s, s)), 14.0, mode="reflect")
        f *= rms_px / max(f.std(), 1e-12)
        disp.append(f)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    coords = np.stack([yy + disp[0], xx + disp[1]])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def generate_pair(params: SynthesisParams, pair_id: int) -> PairedSample:
    """Deterministic function of (params.seed, pair_id)."""
    params.validate()
    if pair_id < 0:
        raise DataError("pair_id must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([params.seed & (2**63 - 1), pair_id]))
    geometry = _render_geometry(params, rng)

    image_a = params.contrast_gap * geometry
    if params.modality_a_noise > 0:
        image_a = image_a + rng.normal(0.0, params.modality_a_noise, geometry.shape)
    image_a = np.clip(image_a, 0.0, 1.0)

    image_b = _smooth_warp(geometry, rng, params.modality_warp)
    if params.modality_b_blur > 0:
        image_b = ndimage.gaussian_filter(image_b, params.modality_b_blur, mode="nearest")
    if params.modality_b_noise > 0:
        image_b = image_b + rng.normal(0.0, params.modality_b_noise, geometry.shape)
    image_b = np.clip(image_b, 0.0, 1.0)

    return PairedSample(pair_id=pair_id, image_a=image_a, image_b=image_b)


# ---------------------------------------------------------------------------
# splitting


def split_counts(n_pairs: int) -> tuple[int, int, int]:
    """Largest-remainder split by the 190/30/53 reference ratio.

    Every split must end up non-empty; when rounding starves one, a pair
    is moved from the largest split.
    """
    if n_pairs < 3:
        raise DataError("n_pairs must be >= 3 so every split gets at least one pair")
    total = sum(_SPLIT_WEIGHTS)
    quotas = [n_pairs * w / total for w in _SPLIT_WEIGHTS]
    counts = [int(q) for q in quotas]
    fracs = [q - c for q, c in zip(quotas, counts)]
    for _ in range(n_pairs - sum(counts)):
        i = max(range(3), key=lambda j: (fracs[j], -j))
        counts[i] += 1
        fracs[i] = -1.0
    while min(counts) == 0:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(0)] += 1
    return tuple(counts)


def generate_dataset(params: SynthesisParams, n_pairs: int) -> DatasetSplit:
    """n_pairs synthetic pairs split train/val/test by the reference ratio."""
    n_train, n_val, n_test = split_counts(n_pairs)
    pairs = [generate_pair(params, pid) for pid in range(n_pairs)]
    return DatasetSplit(
        train=pairs[:n_train],
        validation=pairs[n_train : n_train + n_val],
        test=pairs[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# PGM image I/O (binary P5, maxval 255)


def save_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"PGM image must be 2-D, got shape {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # optionally interleaved with '#' comment lines
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise DataError(f"{path}: expected maxval 255, got {maxval}")
    i += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw[i : i + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise DataError(f"{path}: truncated pixel data")
    return pixels.reshape(height, width).astype(np.float64) / 255.0


def save_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM image must be HxWx3, got shape {rgb.shape}")
    q = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


# ---------------------------------------------------------------------------
# manifest I/O (JSON lines)

_SPLIT_NAMES = ("train", "val", "test")


def save_manifest(split: DatasetSplit, directory: str | Path) -> Path:
    """Write images as PGM plus a JSON-lines manifest; returns the manifest path."""
    directory = Path(directory)
    imgdir = directory / "images"
    imgdir.mkdir(parents=True, exist_ok=True)
    records = []
    for split_name, samples in (("train", split.train), ("val", split.validation),
                                ("test", split.test)):
        for s in samples:
            a_rel = f"images/a_{s.pair_id:05d}.pgm"
            b_rel = f"images/b_{s.pair_id:05d}.pgm"
            save_pgm(directory / a_rel, s.image_a)
            save_pgm(directory / b_rel, s.image_b)
            records.append({"pair_id": s.pair_id, "modality_a_path": a_rel,
                            "modality_b_path": b_rel, "split": split_name})
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return manifest


def load_manifest(path: str | Path) -> DatasetSplit:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    split = DatasetSplit()
    dest = {"train": split.train, "val": split.validation, "test": split.test}
    seen: set[int] = set()
    n_records = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record: {e}") from None
            missing = {"pair_id", "modality_a_path", "modality_b_path", "split"} - rec.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if rec["split"] not in _SPLIT_NAMES:
                raise DataError(f"{path}:{lineno}: unknown split {rec['split']!r}")
            pid = rec["pair_id"]
            if not isinstance(pid, int) or pid < 0:
                raise DataError(f"{path}:{lineno}: bad pair_id {pid!r}")
            if pid in seen:
                raise DataError(f"{path}:{lineno}: duplicate pair_id {pid}")
            seen.add(pid)
            images = []
            for key in ("modality_a_path", "modality_b_path"):
                img_path = base / rec[key]
                if not img_path.exists():
                    raise DataError(f"{path}:{lineno}: missing image file {img_path}")
                img = load_pgm(img_path)
                if img.shape != (IMAGE_SIZE, IMAGE_SIZE):
                    raise DataError(
                        f"{img_path}: expected {IMAGE_SIZE}x{IMAGE_SIZE}, got "
                        f"{img.shape[0]}x{img.shape[1]}"
                    )
                images.append(img)
            dest[rec["split"]].append(PairedSample(pid, images[0], images[1]))
            n_records += 1
    if n_records == 0:
        raise DataError(f"{path}: no records")
    return split
