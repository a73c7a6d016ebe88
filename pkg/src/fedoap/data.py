"""Deterministic synthetic organ-like datasets for heterogeneous clients.

Each client profile produces single-channel images in [0, 1] with one
or more star-shaped lesions: the boundary is a radial curve
r(theta) = r0 * (1 + irregularity * sum of low-order sinusoids with
seeded phases), filled by thresholding pixel distance against r(theta).
Profiles differ in lesion count, size, boundary roughness, contrast,
background texture, and polarity (bright-on-dark vs dark-on-bright),
which is what makes the clients statistically distinguishable.

Images are quantized to f32 at creation so the on-disk format (f32)
round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    InvalidConfig,
    InvalidProfile,
    SplitTooSmall,
    TruncatedFile,
    VersionUnsupported,
)
from .rng import Rng, derive_seed

SAMPLE_MAGIC = b"FOSS"
SAMPLE_VERSION = 1
SAMPLE_HEADER_BYTES = 14  # magic + u16 version + u32 H + u32 W
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class OrganProfile:
    name: str
    lesion_count_range: tuple[int, int]
    lesion_radius_range: tuple[float, float]  # fraction of the image side
    boundary_irregularity: float
    contrast: float
    background_texture: float
    intensity_inversion: bool

    def validate(self) -> None:
        cmin, cmax = self.lesion_count_range
        rmin, rmax = self.lesion_radius_range
        if cmin < 1 or cmax < cmin:
            raise InvalidProfile(f"{self.name}: bad lesion count range {cmin}..{cmax}")
        if not 0.0 < rmin <= rmax < 0.5:
            raise InvalidProfile(f"{self.name}: radius range must sit inside (0, 0.5)")
        if self.boundary_irregularity < 0.0:
            raise InvalidProfile(f"{self.name}: irregularity must be >= 0")
        if not 0.0 < self.contrast <= 1.0:
            raise InvalidProfile(f"{self.name}: contrast must lie in (0, 1]")
        if self.background_texture < 0.0:
            raise InvalidProfile(f"{self.name}: texture must be >= 0")


DEFAULT_PROFILES: dict[str, OrganProfile] = {
    "breast_like": OrganProfile(
        name="breast_like",
        lesion_count_range=(1, 1),
        lesion_radius_range=(0.10, 0.16),
        boundary_irregularity=0.06,
        contrast=0.90,
        background_texture=0.02,
        intensity_inversion=False,
    ),
    "brain_like": OrganProfile(
        name="brain_like",
        lesion_count_range=(1, 1),
        lesion_radius_range=(0.16, 0.26),
        boundary_irregularity=0.35,
        contrast=0.65,
        background_texture=0.05,
        intensity_inversion=False,
    ),
    "liver_like": OrganProfile(
        name="liver_like",
        lesion_count_range=(1, 3),
        lesion_radius_range=(0.07, 0.13),
        boundary_irregularity=0.18,
        contrast=0.40,
        background_texture=0.12,
        intensity_inversion=True,
    ),
    "lung_like": OrganProfile(
        name="lung_like",
        lesion_count_range=(1, 2),
        lesion_radius_range=(0.11, 0.18),
        boundary_irregularity=0.25,
        contrast=0.55,
        background_texture=0.08,
        intensity_inversion=True,
    ),
}

TRAINING_PROFILE_NAMES = ("breast_like", "brain_like", "liver_like")
HELD_OUT_PROFILE_NAME = "lung_like"


@dataclass
class Sample:
    image: np.ndarray  # [1, H, W] float64, f32-quantized values in [0, 1]
    mask: np.ndarray   # [H, W] uint8
    sample_id: str


def _lesion_mask(rng: Rng, size: int, profile: OrganProfile) -> np.ndarray:
    """One star-shaped lesion, nonempty by construction."""
    rmin, rmax = profile.lesion_radius_range
    cx = (0.2 + 0.6 * rng.uniform()) * size
    cy = (0.2 + 0.6 * rng.uniform()) * size
    r0 = (rmin + (rmax - rmin) * rng.uniform()) * size
    # three sinusoids, amplitudes summing to at most 1, seeded phases
    amps = rng.uniform_array(3) / 3.0
    phases = rng.uniform_array(3) * 2.0 * np.pi

    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    theta = np.arctan2(dy, dx)
    wobble = sum(a * np.sin(m * theta + p)
                 for m, a, p in zip((2, 3, 4), amps, phases))
    radius = r0 * (1.0 + profile.boundary_irregularity * wobble)
    mask = (np.hypot(dx, dy) <= radius).astype(np.uint8)
    if not mask.any():
        # only reachable for sub-pixel radii; keep the sample legal anyway
        mask[int(cy) % size, int(cx) % size] = 1
    return mask


def _generate_sample(profile: OrganProfile, size: int, rng: Rng,
                     sample_id: str) -> Sample:
    cmin, cmax = profile.lesion_count_range
    count = rng.randint(cmin, cmax)
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(count):
        mask |= _lesion_mask(rng, size, profile)

    if profile.intensity_inversion:
        background, lesion_offset = 0.75, -profile.contrast
    else:
        background, lesion_offset = 0.25, profile.contrast
    noise = rng.gaussian_array(size * size, 0.0, profile.background_texture ** 2) \
        .reshape(size, size)
    image = background + noise
    image[mask == 1] += lesion_offset
    image = np.clip(image, 0.0, 1.0)
    # quantize so the f32 file format round-trips bit-exactly
    image = image.astype(np.float32).astype(np.float64)[None]
    return Sample(image=image, mask=mask, sample_id=sample_id)


def generate_client_dataset(profile: OrganProfile, n: int, size: int,
                            seed: int) -> list[Sample]:
    """n seeded samples; a pure function of (profile, n, size, seed)."""
    profile.validate()
    if n < 1:
        raise InvalidConfig(f"dataset size must be >= 1, got {n}")
    if size < 8:
        raise InvalidConfig(f"image size must be >= 8, got {size}")
    samples = []
    for i in range(n):
        rng = Rng(derive_seed(seed, profile.name, i))
        samples.append(_generate_sample(profile, size, rng, f"{profile.name}-{i:04d}"))
    return samples


def split_dataset(samples: list[Sample], test_frac: float = 0.10,
                  val_frac: float = 0.10, seed: int = 0
                  ) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Seeded shuffle, then test = round(tf*n), val = round(vf*(n-test))."""
    n = len(samples)
    if not (0.0 <= test_frac < 1.0 and 0.0 <= val_frac < 1.0):
        raise InvalidConfig("split fractions must lie in [0, 1)")
    n_test = round(test_frac * n)
    n_val = round(val_frac * (n - n_test))
    n_train = n - n_test - n_val
    if min(n_test, n_val, n_train) < 1:
        raise SplitTooSmall(
            f"{n} samples split into train={n_train}, val={n_val}, test={n_test}")
    order = list(range(n))
    Rng(derive_seed(seed, "split")).shuffle(order)
    test = [samples[i] for i in order[:n_test]]
    val = [samples[i] for i in order[n_test:n_test + n_val]]
    train = [samples[i] for i in order[n_test + n_val:]]
    return train, val, test


def write_sample(path, sample: Sample) -> None:
    h, w = sample.mask.shape
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<HII", SAMPLE_VERSION, h, w))
        fh.write(sample.image[0].astype("<f4").tobytes())
        fh.write(sample.mask.astype(np.uint8).tobytes())


def read_sample(path) -> Sample:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < SAMPLE_HEADER_BYTES:
        raise TruncatedFile(f"{path.name}: shorter than the sample header")
    if data[:4] != SAMPLE_MAGIC:
        raise BadMagic(f"{path.name}: expected {SAMPLE_MAGIC!r}, got {data[:4]!r}")
    version, h, w = struct.unpack_from("<HII", data, 4)
    if version != SAMPLE_VERSION:
        raise VersionUnsupported(f"{path.name}: sample format version {version}")
    want = SAMPLE_HEADER_BYTES + 5 * h * w
    if len(data) != want:
        raise TruncatedFile(f"{path.name}: expected {want} bytes, found {len(data)}")
    offset = SAMPLE_HEADER_BYTES
    image = np.frombuffer(data, dtype="<f4", count=h * w, offset=offset) \
        .astype(np.float64).reshape(1, h, w)
    mask = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset + 4 * h * w) \
        .reshape(h, w).copy()
    return Sample(image=image, mask=mask, sample_id=path.stem)


def write_client_dataset(directory, profile: OrganProfile, seed: int,
                         image_size: int,
                         splits: dict[str, list[Sample]]) -> Path:
    """Write samples plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": SAMPLE_VERSION,
        "profile": profile.name,
        "seed": seed,
        "image_size": image_size,
        "counts": {name: len(items) for name, items in splits.items()},
        "splits": {},
    }
    for split_name, items in splits.items():
        paths = []
        for sample in items:
            rel = f"{sample.sample_id}.foss"
            write_sample(directory / rel, sample)
            paths.append(rel)
        manifest["splits"][split_name] = paths
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_client_dataset(directory) -> dict[str, list[Sample]]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    if manifest.get("format_version") != SAMPLE_VERSION:
        raise VersionUnsupported(f"manifest format {manifest.get('format_version')}")
    return {split: [read_sample(directory / rel) for rel in rels]
            for split, rels in manifest["splits"].items()}


def batch_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (images [B,1,H,W], masks [B,1,H,W]) arrays."""
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask[None].astype(np.float64) for s in samples])
    return images, masks
