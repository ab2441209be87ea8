"""Hyperspectral cube ingestion, center-pixel patch extraction with splits,
and a synthetic cube generator with controllable spectral/spatial structure.

File formats (little-endian):
  HSC1 cube:   magic "HSC1" | u32 H | u32 W | u32 C | f32[H*W*C] row-major,
               band-interleaved-by-pixel
  HSL1 labels: magic "HSL1" | u32 H | u32 W | i32[H*W], 0 = unlabeled

A converter for public HSI scenes (Indian Pines, Pavia, Houston, ...) is a
user-side one-liner from their numpy arrays; see write_cube.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FileFormatError

_CUBE_MAGIC = b"HSC1"
_LABEL_MAGIC = b"HSL1"


@dataclass
class HsiCube:
    """H x W x C reflectance cube plus an H x W label map (0 = unlabeled)."""

    reflectance: np.ndarray  # float32 (H, W, C)
    labels: np.ndarray  # int32 (H, W)

    def __post_init__(self):
        self.reflectance = np.ascontiguousarray(self.reflectance, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.reflectance.ndim != 3:
            raise ContractError(f"reflectance must be (H, W, C), got {self.reflectance.shape}")
        if self.labels.shape != self.reflectance.shape[:2]:
            raise ContractError(
                f"label map {self.labels.shape} does not match cube {self.reflectance.shape[:2]}"
            )
        if self.labels.min(initial=0) < 0:
            raise ContractError("labels must be >= 0 (0 means unlabeled)")
        if not np.isfinite(self.reflectance).all():
            raise ContractError("reflectance contains non-finite values")

    @property
    def height(self) -> int:
        return self.reflectance.shape[0]

    @property
    def width(self) -> int:
        return self.reflectance.shape[1]

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max(initial=0))


def write_cube(cube: HsiCube, cube_path, labels_path) -> None:
    with open(cube_path, "wb") as f:
        f.write(_CUBE_MAGIC)
        f.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        f.write(cube.reflectance.astype("<f4").tobytes())
    with open(labels_path, "wb") as f:
        f.write(_LABEL_MAGIC)
        f.write(struct.pack("<II", cube.height, cube.width))
        f.write(cube.labels.astype("<i4").tobytes())


def _read_exact(f, n: int, what: str, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FileFormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", offset)
    return buf


def load_cube(cube_path, labels_path=None) -> HsiCube:
    """Parse HSC1 (+ optional HSL1) files; errors carry byte offsets."""
    with open(cube_path, "rb") as f:
        magic = f.read(4)
        if magic != _CUBE_MAGIC:
            raise FileFormatError(f"bad cube magic {magic!r}, expected {_CUBE_MAGIC!r}", 0)
        h, w, c = struct.unpack("<III", _read_exact(f, 12, "cube header", 4))
        payload = _read_exact(f, h * w * c * 4, "cube payload", 16)
        refl = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
        extra = f.read(1)
        if extra:
            raise FileFormatError("trailing bytes after cube payload", 16 + h * w * c * 4)
    if labels_path is None:
        labels = np.zeros((h, w), dtype=np.int32)
    else:
        with open(labels_path, "rb") as f:
            magic = f.read(4)
            if magic != _LABEL_MAGIC:
                raise FileFormatError(f"bad label magic {magic!r}, expected {_LABEL_MAGIC!r}", 0)
            lh, lw = struct.unpack("<II", _read_exact(f, 8, "label header", 4))
            if (lh, lw) != (h, w):
                raise FileFormatError(f"label map {lh}x{lw} does not match cube {h}x{w}", 4)
            payload = _read_exact(f, lh * lw * 4, "label payload", 12)
            labels = np.frombuffer(payload, dtype="<i4").reshape(lh, lw)
    return HsiCube(reflectance=refl.copy(), labels=labels.copy())


# -- patch extraction ---------------------------------------------------------

@dataclass
class PatchSet:
    """One patch per labeled pixel; patch center (1-based ceil(P/2)) is the
    labeled pixel. Borders are reflect-padded (edge pixel not duplicated)."""

    patches: np.ndarray  # float64 (n, C, P, P)
    labels: np.ndarray  # int64 (n,), values 1..K
    coords: np.ndarray  # int64 (n, 2) source (row, col)
    num_classes: int


@dataclass
class PatchDataset:
    """A normalized split. Test data must be normalized with train stats."""

    patches: np.ndarray
    labels: np.ndarray
    coords: np.ndarray
    num_classes: int
    split: str  # "train" | "test"
    band_mean: np.ndarray  # (C,)
    band_std: np.ndarray  # (C,)

    def __len__(self) -> int:
        return len(self.labels)


def extract_patches(cube: HsiCube, patch: int) -> PatchSet:
    """Cut a patch x patch neighborhood around every labeled pixel.

    The labeled pixel sits at 0-based index (patch - 1) // 2 along both axes;
    for even sizes the window extends one step further down/right.
    """
    if patch < 1:
        raise ConfigError(f"patch size must be >= 1, got {patch}")
    before = (patch - 1) // 2
    after = patch - 1 - before
    if patch > 1 and after > min(cube.height, cube.width) - 1:
        raise ConfigError(
            f"patch {patch} too large to reflect-pad a {cube.height}x{cube.width} cube"
        )
    refl = cube.reflectance.astype(np.float64)
    if patch > 1:
        refl = np.pad(refl, ((before, after), (before, after), (0, 0)), mode="reflect")
    rows, cols = np.nonzero(cube.labels)
    n = len(rows)
    patches = np.empty((n, cube.bands, patch, patch))
    for i, (r, c) in enumerate(zip(rows, cols)):
        win = refl[r : r + patch, c : c + patch]  # padded coords shift by `before`
        patches[i] = win.transpose(2, 0, 1)
    labels = cube.labels[rows, cols].astype(np.int64)
    coords = np.stack([rows, cols], axis=1).astype(np.int64)
    return PatchSet(patches=patches, labels=labels, coords=coords, num_classes=cube.num_classes)


def split_dataset(patchset: PatchSet, train_fraction: float, seed: int,
                  stratified: bool = True) -> tuple[PatchDataset, PatchDataset]:
    """Deterministic train/test split; normalization stats come from the
    train split only and are applied to both."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(patchset.labels)
    rng = np.random.default_rng(seed)
    if stratified:
        train_idx = []
        for k in np.unique(patchset.labels):
            members = np.nonzero(patchset.labels == k)[0]
            if len(members) < 2:
                raise ConfigError(f"class {int(k)} has {len(members)} sample(s); "
                                  "stratified split needs >= 2")
            take = int(round(train_fraction * len(members)))
            take = min(max(take, 1), len(members) - 1)
            train_idx.append(rng.permutation(members)[:take])
        train_idx = np.sort(np.concatenate(train_idx))
    else:
        perm = rng.permutation(n)
        train_idx = np.sort(perm[: int(round(train_fraction * n))])
    mask = np.zeros(n, dtype=bool)
    mask[train_idx] = True
    test_idx = np.nonzero(~mask)[0]

    train_pixels = patchset.patches[train_idx]  # (nt, C, P, P)
    mean = train_pixels.mean(axis=(0, 2, 3))
    std = train_pixels.std(axis=(0, 2, 3))
    std = np.where(std < 1e-12, 1.0, std)

    def normalize(idx, split):
        pat = (patchset.patches[idx] - mean[None, :, None, None]) / std[None, :, None, None]
        return PatchDataset(
            patches=pat, labels=patchset.labels[idx], coords=patchset.coords[idx],
            num_classes=patchset.num_classes, split=split, band_mean=mean, band_std=std,
        )

    return normalize(train_idx, "train"), normalize(test_idx, "test")


# -- synthetic cubes ----------------------------------------------------------

def synth_generate(num_classes: int, height: int, width: int, bands: int,
                   noise_sigma: float, blob_size: int = 8, seed: int = 0) -> HsiCube:
    """Fully labeled synthetic cube: per-class smooth spectral prototypes
    (Gaussian bumps at distinct band centers), a seeded Voronoi blob label
    map, and i.i.d. Gaussian noise on top of the prototypes."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if bands < num_classes:
        raise ConfigError(f"need bands >= classes, got {bands} < {num_classes}")
    rng = np.random.default_rng(seed)

    centers = np.linspace(0, bands - 1, num_classes + 2)[1:-1]
    bump_width = max(1.0, bands / (2.5 * num_classes))
    grid = np.arange(bands)
    prototypes = np.stack(
        [np.exp(-0.5 * ((grid - c) / bump_width) ** 2) for c in centers]
    )  # (K, C)

    n_sites = max(num_classes, (height * width) // max(1, blob_size * blob_size))
    sites = np.stack(
        [rng.uniform(0, height, n_sites), rng.uniform(0, width, n_sites)], axis=1
    )
    site_class = np.arange(n_sites) % num_classes + 1  # every class occurs
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    labels = site_class[np.argmin(d2, axis=-1)].astype(np.int32)

    refl = prototypes[labels - 1]
    refl = refl + rng.normal(0.0, noise_sigma, size=refl.shape)
    return HsiCube(reflectance=refl.astype(np.float32), labels=labels)


def class_prototypes(num_classes: int, bands: int) -> np.ndarray:
    """The noiseless spectra used by synth_generate (for oracles/analysis)."""
    centers = np.linspace(0, bands - 1, num_classes + 2)[1:-1]
    bump_width = max(1.0, bands / (2.5 * num_classes))
    grid = np.arange(bands)
    return np.stack([np.exp(-0.5 * ((grid - c) / bump_width) ** 2) for c in centers])
