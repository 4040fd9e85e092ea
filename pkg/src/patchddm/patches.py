"""Coordinate encoding, center-weighted patch sampling, and input assembly.

The coordinate channels are built once for the full volume and cropped
together with the data, so a patch keeps the global position information.
Training and inference assemble network inputs with the same channel
layout: noisy mask, then condition channels, then the three coordinate
channels.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

COORD_CHANNELS = 3

# canonical channel layout of every network input
CHANNEL_LAYOUT = ("noisy", "condition", "coords")


def build_coordinate_grid(extents: tuple[int, int, int]) -> np.ndarray:
    """Three channels holding -1..1 linear gradients, one per axis."""
    if any(s < 2 for s in extents):
        raise ValueError(f"coordinate grid needs extents >= 2, got {extents}")
    d, h, w = extents
    grid = np.empty((COORD_CHANNELS, d, h, w), dtype=np.float32)
    grid[0] = np.linspace(-1.0, 1.0, d, dtype=np.float32)[:, None, None]
    grid[1] = np.linspace(-1.0, 1.0, h, dtype=np.float32)[None, :, None]
    grid[2] = np.linspace(-1.0, 1.0, w, dtype=np.float32)[None, None, :]
    return grid


@functools.lru_cache(maxsize=16)
def cached_coordinate_grid(extents: tuple[int, int, int]) -> np.ndarray:
    grid = build_coordinate_grid(extents)
    grid.setflags(write=False)
    return grid


def trapezoid_density(z: np.ndarray | float) -> np.ndarray | float:
    """Density of X + Y with X ~ U[-1/3, 1/3], Y ~ U[-2/3, 2/3]."""
    za = np.abs(z)
    return np.where(za <= 1 / 3, 0.75, np.where(za <= 1.0, 1.125 * (1.0 - za), 0.0))


def trapezoid_cdf(z: np.ndarray | float) -> np.ndarray | float:
    z = np.asarray(z, dtype=np.float64)
    low = 9.0 / 16.0 * (1.0 + z) ** 2
    mid = 0.25 + 0.75 * (z + 1.0 / 3.0)
    high = 1.0 - 9.0 / 16.0 * (1.0 - z) ** 2
    out = np.where(z < -1 / 3, low, np.where(z <= 1 / 3, mid, high))
    return np.clip(out, 0.0, 1.0)


@dataclass
class CenterWeightedSampler:
    """Draws normalized patch centers biased toward the volume center.

    Each axis is the sum of two independent uniforms (U[-1/3, 1/3] and
    U[-2/3, 2/3]), i.e. a trapezoid over the admissible center range
    normalized to [-1, 1]. The sampler owns its RNG; training workers each
    hold an independently seeded instance.
    """

    seed: int

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def draw_center(self) -> tuple[float, float, float]:
        x = self.rng.uniform(-1 / 3, 1 / 3, size=3)
        y = self.rng.uniform(-2 / 3, 2 / 3, size=3)
        z = np.clip(x + y, -1.0, 1.0)
        return (float(z[0]), float(z[1]), float(z[2]))


@dataclass(frozen=True)
class PatchSpec:
    """A patch placement: voxel origin, extents, and the normalized center
    (in the admissible-center frame the sampler draws from)."""

    origin: tuple[int, int, int]
    extent: tuple[int, int, int]
    center_norm: tuple[float, float, float]


def patch_spec_from_center(
    center_norm: tuple[float, float, float],
    volume_extents: tuple[int, int, int],
    patch_extent: tuple[int, int, int] | int,
) -> PatchSpec:
    """Map a normalized center to a concrete in-bounds patch placement."""
    if isinstance(patch_extent, int):
        patch_extent = (patch_extent,) * 3
    origin = []
    for z, vol, pat in zip(center_norm, volume_extents, patch_extent):
        if pat > vol:
            raise ValueError(
                f"patch extent {patch_extent} exceeds volume {volume_extents}"
            )
        slack = vol - pat
        o = int(round((z + 1.0) / 2.0 * slack))
        origin.append(min(max(o, 0), slack))
    return PatchSpec(tuple(origin), tuple(patch_extent), tuple(center_norm))


def extract_patch(volume: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Contiguous crop of all channels; coordinate channels keep their
    global values because they are cropped with the rest."""
    if volume.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) volume, got shape {volume.shape}")
    for o, p, s in zip(spec.origin, spec.extent, volume.shape[1:]):
        if o < 0 or o + p > s:
            raise ValueError(f"patch {spec} outside volume extents {volume.shape[1:]}")
    (od, oh, ow), (pd, ph, pw) = spec.origin, spec.extent
    return np.ascontiguousarray(volume[:, od:od + pd, oh:oh + ph, ow:ow + pw])


def assemble_input(x_t: np.ndarray, condition: np.ndarray,
                   grid: np.ndarray | None = None) -> np.ndarray:
    """Stack [x_t | condition | coords] over matching extents.

    Full-volume inference calls this once per denoising step on the whole
    volume; no patching, stitching, or reassembly is involved.
    """
    if x_t.shape[1:] != condition.shape[1:]:
        raise ValueError(
            f"extent mismatch: x_t {x_t.shape[1:]} vs condition {condition.shape[1:]}"
        )
    if grid is None:
        grid = cached_coordinate_grid(tuple(x_t.shape[1:]))
    elif grid.shape[1:] != x_t.shape[1:]:
        raise ValueError(f"grid extents {grid.shape[1:]} vs input {x_t.shape[1:]}")
    return np.concatenate([x_t, condition, grid]).astype(np.float32, copy=False)


def split_input(stacked: np.ndarray, n_condition: int):
    """Inverse of assemble_input; used to assert the shared layout."""
    n_noisy = stacked.shape[0] - n_condition - COORD_CHANNELS
    if n_noisy < 1:
        raise ValueError(
            f"stacked input with {stacked.shape[0]} channels cannot hold "
            f"{n_condition} condition channels plus coordinates"
        )
    return (
        stacked[:n_noisy],
        stacked[n_noisy:n_noisy + n_condition],
        stacked[n_noisy + n_condition:],
    )


def full_volume_input(images: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """Whole-volume network input for single-pass inference."""
    return assemble_input(x_t, images)
