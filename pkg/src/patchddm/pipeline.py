"""Diffusion-based segmentation: training step, sampling, ensembling.

Three training regimes share one channel layout and one schedule:

* ``patchddm`` -- noising happens on the full volume, then a
  center-weighted coordinate-encoded patch is cropped for the network.
* ``fullres``  -- the network sees the whole volume.
* ``halfres``  -- data channels are block-averaged to half extent first and
  the whole diffusion runs at that resolution; sampling upsamples the final
  output back (coordinate channels are rebuilt at the working extent so
  they always span -1..1).

Sampling is deterministic given the seed: the initial noise is the only
random input, every reverse transition is the deterministic DDIM update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import unet
from .patches import (
    CenterWeightedSampler,
    cached_coordinate_grid,
    assemble_input,
    extract_patch,
    patch_spec_from_center,
)
from .schedule import NoiseSchedule, StridePlan, ddim_step, mse_loss
from .tensor import Tensor, no_grad
from .unet import ModelParams

MODES = ("patchddm", "fullres", "halfres")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")


def _block_mean(arr: np.ndarray, factor: int = 2) -> np.ndarray:
    c, d, h, w = arr.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(f"extents {arr.shape[1:]} not divisible by {factor}")
    blocks = arr.reshape(c, d // factor, factor, h // factor, factor, w // factor, factor)
    return np.ascontiguousarray(blocks.mean(axis=(2, 4, 6), dtype=np.float32))


def _block_repeat(arr: np.ndarray, factor: int = 2) -> np.ndarray:
    return arr.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)


@dataclass
class TrainBatch:
    x0: np.ndarray    # (1, D, H, W) binary mask as float32
    cond: np.ndarray  # (C_b, D, H, W) condition channels
    mode: str

    def __post_init__(self):
        _check_mode(self.mode)
        if self.x0.ndim != 4 or self.cond.ndim != 4:
            raise ValueError(
                f"batch volumes must be (C, D, H, W): x0 {self.x0.shape}, "
                f"cond {self.cond.shape}"
            )
        if self.x0.shape[1:] != self.cond.shape[1:]:
            raise ValueError(
                f"x0 extents {self.x0.shape[1:]} vs condition {self.cond.shape[1:]}"
            )
        if not np.all((self.x0 == 0) | (self.x0 == 1)):
            raise ValueError("ground-truth mask must be binary {0, 1}")


@dataclass
class TrainStepResult:
    loss: float
    t: int
    grads: dict[str, np.ndarray]


def training_step(
    model: ModelParams,
    schedule: NoiseSchedule,
    batch: TrainBatch,
    rng: np.random.Generator,
    sampler: CenterWeightedSampler | None = None,
    patch_extent: int | None = None,
) -> TrainStepResult:
    """Draw (t, noise), build the conditioned input, return loss and grads.

    Draw order is fixed (t, then noise, then the patch center from the
    sampler's own RNG) so checkpointed RNG states replay exactly.
    """
    t = int(rng.integers(1, schedule.T + 1))
    if batch.mode == "halfres":
        x0 = _block_mean(batch.x0)
        cond = _block_mean(batch.cond)
    else:
        x0 = batch.x0
        cond = batch.cond
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    a = np.float32(schedule.sqrt_alpha_bar[t])
    b = np.float32(schedule.sqrt_one_minus_alpha_bar[t])
    x_t = a * x0 + b * eps
    stacked = assemble_input(x_t, cond)

    if batch.mode == "patchddm":
        if sampler is None or patch_extent is None:
            raise ValueError("patchddm training needs a sampler and a patch extent")
        if patch_extent % model.config.downsample_factor:
            raise ValueError(
                f"patch extent {patch_extent} not divisible by the network's "
                f"downsampling factor {model.config.downsample_factor}"
            )
        spec = patch_spec_from_center(
            sampler.draw_center(), stacked.shape[1:], patch_extent
        )
        net_in = extract_patch(stacked, spec)
        target = extract_patch(eps, spec)
    else:
        net_in = stacked
        target = eps

    model.zero_grads()
    eps_hat = unet.forward(model, Tensor(net_in), t)
    loss = mse_loss(Tensor(target), eps_hat)
    loss.backward()
    return TrainStepResult(loss=loss.data.item(), t=t, grads=model.grads())


@dataclass
class SampleResult:
    soft: np.ndarray  # (1, D, H, W) in [0, 1]
    mask: np.ndarray  # (1, D, H, W) bool, soft >= 0.5


def sample_segmentation(
    model: ModelParams,
    schedule: NoiseSchedule,
    cond: np.ndarray,
    plan: StridePlan,
    seed: int,
    mode: str = "patchddm",
) -> SampleResult:
    """Run the reverse process on the whole volume in one pass per step.

    Each reverse transition bounds the intermediate clean-mask estimate to
    [0, 1] (the mask encoding range) before re-noising, which keeps the
    trajectory on-distribution; the final output is clamped and thresholded
    at 0.5.
    """
    _check_mode(mode)
    if plan.timesteps[0] > schedule.T:
        raise ValueError(
            f"plan starts at {plan.timesteps[0]} but schedule has T={schedule.T}"
        )
    work_cond = _block_mean(cond) if mode == "halfres" else cond
    extents = tuple(work_cond.shape[1:])
    grid = cached_coordinate_grid(extents)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, *extents), dtype=np.float32)
    with no_grad():
        for t, t_prev in plan.transitions():
            net_in = assemble_input(x, work_cond, grid)
            eps_hat = unet.forward(model, Tensor(net_in), t)
            # the clip interval is symmetric about 0, not the [0, 1] mask
            # range: at high noise the clean estimate is dominated by
            # amplified prediction error, and an asymmetric clip would turn
            # that zero-mean error into a strong positive bias
            x = ddim_step(schedule, Tensor(x), eps_hat, t, t_prev,
                          clip_x0=(-1.0, 1.0)).data
    if mode == "halfres":
        x = _block_repeat(x)
    soft = np.clip(x, 0.0, 1.0)
    return SampleResult(soft=soft, mask=soft >= 0.5)


@dataclass
class EnsembleResult:
    members: np.ndarray        # (n, 1, D, H, W) clamped soft outputs
    mean: np.ndarray           # (1, D, H, W)
    variance_norm: np.ndarray  # (1, D, H, W), variance / max (0 if flat)
    consensus: np.ndarray      # (1, D, H, W) bool, mean >= 0.5


def ensemble(
    model: ModelParams,
    schedule: NoiseSchedule,
    cond: np.ndarray,
    plan: StridePlan,
    seeds: list[int],
    mode: str = "patchddm",
) -> EnsembleResult:
    """Repeat sampling from different initial noises and aggregate.

    The mean is taken over the clamped soft outputs (so the consensus is a
    thresholded mean, not a majority vote of already-thresholded masks);
    the variance map is normalized by its maximum.
    """
    if not seeds:
        raise ValueError("ensemble needs at least one seed")
    members = np.stack([
        sample_segmentation(model, schedule, cond, plan, seed, mode).soft
        for seed in seeds
    ])
    mean = members.mean(axis=0)
    # variance of deviations from one member: shift-invariant, and exactly
    # zero (not rounding noise that normalization would amplify) when all
    # members coincide
    variance = np.var(members - members[0], axis=0, dtype=np.float64)
    variance = variance.astype(np.float32)
    vmax = float(variance.max())
    variance_norm = variance / vmax if vmax > 0 else np.zeros_like(variance)
    return EnsembleResult(
        members=members,
        mean=mean,
        variance_norm=variance_norm,
        consensus=mean >= 0.5,
    )
