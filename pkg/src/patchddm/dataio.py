"""Volume files, intensity normalization, checkpoints, and synthetic data.

Volumes are stored as a JSON sidecar (`<base>.vol.json`) plus a raw
little-endian float32 payload (`<base>.vol.raw`) in channel, depth, height,
width order. Checkpoints are a single `.ckpt` file: magic, version, a JSON
header with the tensor manifest, then the concatenated float32 payload.
Both round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .optim import AdamWState
from .tensor import Tensor
from .unet import ModelParams, UNetConfig, build_model

VOL_MAGIC = "patchddm-volume"
VOL_VERSION = 1
CKPT_MAGIC = b"PDDMCKPT"
CKPT_VERSION = 1


class VolumeFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# volume files


def _vol_paths(base: str | Path) -> tuple[Path, Path]:
    base = Path(base)
    name = base.name
    for suffix in (".vol.json", ".vol.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    base = base.with_name(name)
    return base.with_name(name + ".vol.json"), base.with_name(name + ".vol.raw")


def save_volume(
    base: str | Path,
    data: np.ndarray,
    channel_names: list[str] | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    value_range: str = "",
) -> Path:
    if data.ndim != 4:
        raise ValueError(f"save_volume expects (C, D, H, W), got {data.shape}")
    header_path, raw_path = _vol_paths(base)
    payload = np.ascontiguousarray(data, dtype="<f4")
    channels = data.shape[0]
    if channel_names is None:
        channel_names = [f"channel{i}" for i in range(channels)]
    if len(channel_names) != channels:
        raise ValueError(
            f"{len(channel_names)} channel names for {channels} channels"
        )
    header = {
        "magic": VOL_MAGIC,
        "version": VOL_VERSION,
        "channels": channels,
        "extents": list(data.shape[1:]),
        "channel_names": list(channel_names),
        "spacing": list(spacing),
        "dtype": "<f4",
        "value_range": value_range,
    }
    header_path.write_text(json.dumps(header, sort_keys=True, indent=1))
    raw_path.write_bytes(payload.tobytes())
    return header_path


def load_volume(base: str | Path) -> tuple[np.ndarray, dict]:
    header_path, raw_path = _vol_paths(base)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"cannot read volume header {header_path}: {exc}")
    if header.get("magic") != VOL_MAGIC:
        raise VolumeFormatError(f"{header_path}: bad magic {header.get('magic')!r}")
    if header.get("version") != VOL_VERSION:
        raise VolumeFormatError(
            f"{header_path}: unsupported version {header.get('version')!r}"
        )
    shape = (header["channels"], *header["extents"])
    expected = int(np.prod(shape)) * 4
    blob = raw_path.read_bytes()
    if len(blob) != expected:
        raise VolumeFormatError(
            f"{raw_path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return data, header


# ---------------------------------------------------------------------------
# normalization and padding


def _nearest_rank(sorted_vals: np.ndarray, pct: float) -> float:
    rank = math.ceil(pct / 100.0 * sorted_vals.size)
    return float(sorted_vals[max(rank, 1) - 1])


@dataclass
class NormalizeResult:
    volume: np.ndarray
    degenerate: list[bool]  # one flag per normalized channel


def normalize(volume: np.ndarray, per_channel: bool = True) -> NormalizeResult:
    """Map the 1st..99th percentile of nonzero voxels to [0, 1].

    Exact-zero voxels are background and stay zero; values outside the
    percentile range clamp to the interval ends. A degenerate channel
    (p1 == p99, or no foreground at all) gets constant 0.5 foreground and
    its flag set.
    """
    vol = np.asarray(volume, dtype=np.float32)
    if vol.ndim == 3:
        vol = vol[None]
        squeeze = True
    elif vol.ndim == 4:
        squeeze = False
    else:
        raise ValueError(f"normalize expects 3-D or 4-D input, got {vol.shape}")
    if vol.size == 0:
        raise ValueError("normalize: empty volume")
    groups = [vol[i:i + 1] for i in range(vol.shape[0])] if per_channel else [vol]
    out_parts = []
    flags = []
    for part in groups:
        fg = part != 0
        values = part[fg]
        result = np.zeros_like(part)
        if values.size == 0:
            flags.append(True)
            out_parts.append(result)
            continue
        values = np.sort(values)
        p1 = _nearest_rank(values, 1.0)
        p99 = _nearest_rank(values, 99.0)
        if p99 == p1:
            result[fg] = 0.5
            flags.append(True)
        else:
            mapped = np.clip((part - p1) / (p99 - p1), 0.0, 1.0)
            result[fg] = mapped[fg]
            flags.append(False)
        out_parts.append(result.astype(np.float32))
    out = np.concatenate(out_parts) if per_channel else out_parts[0]
    return NormalizeResult(out[0] if squeeze else out, flags)


@dataclass(frozen=True)
class PadRecord:
    original_extents: tuple[int, int, int]
    offsets: tuple[int, int, int]


def pad_to_multiple(volume: np.ndarray, multiple: int) -> tuple[np.ndarray, PadRecord]:
    """Zero-pad spatial extents up to the next multiple (extra voxel goes on
    the high side for odd remainders)."""
    if multiple < 1:
        raise ValueError(f"multiple must be >= 1, got {multiple}")
    if volume.ndim != 4:
        raise ValueError(f"pad_to_multiple expects (C, D, H, W), got {volume.shape}")
    pads = [(0, 0)]
    offsets = []
    for extent in volume.shape[1:]:
        target = math.ceil(extent / multiple) * multiple
        total = target - extent
        lo = total // 2
        pads.append((lo, total - lo))
        offsets.append(lo)
    padded = np.pad(volume, pads)
    return padded, PadRecord(tuple(volume.shape[1:]), tuple(offsets))


def crop_to_original(volume: np.ndarray, record: PadRecord) -> np.ndarray:
    (d, h, w), (od, oh, ow) = record.original_extents, record.offsets
    return np.ascontiguousarray(volume[:, od:od + d, oh:oh + h, ow:ow + w])


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SyntheticCase:
    case_id: str
    split: str
    condition: np.ndarray  # (2, S, S, S) normalized pseudo-modalities
    mask: np.ndarray       # (1, S, S, S) binary {0, 1} float32


def split_sizes(n_cases: int, fractions: tuple[float, ...]) -> list[int]:
    """Round split sizes so they sum to n_cases (largest remainders win)."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be nonnegative and sum to 1: {fractions}")
    raw = [f * n_cases for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    remainder = n_cases - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def _ellipsoid(extent: int, center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    coords = np.indices((extent, extent, extent), dtype=np.float32)
    r2 = sum(((coords[i] - center[i]) / semi[i]) ** 2 for i in range(3))
    return r2 <= 1.0


def _make_case(case_id: str, split: str, extent: int,
               rng: np.random.Generator) -> SyntheticCase:
    center = (extent - 1) / 2.0
    body = _ellipsoid(extent, np.full(3, center), np.full(3, 0.46 * extent))

    mask = np.zeros((extent,) * 3, dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        c = np.clip(rng.normal(center, extent / 8.0, size=3),
                    0.3 * extent, 0.7 * extent)
        semi = rng.uniform(extent / 10.0, extent / 5.0, size=3)
        mask |= _ellipsoid(extent, c, semi)
    mask &= body
    if not mask.any():  # ellipsoid centers sit inside the body, so this
        raise RuntimeError(f"synthetic case {case_id} produced an empty mask")

    base0 = 0.45 + 0.22 * ndimage.gaussian_filter(
        rng.standard_normal((extent,) * 3), sigma=2.0)
    base1 = 0.55 + 0.18 * ndimage.gaussian_filter(
        rng.standard_normal((extent,) * 3), sigma=3.0)
    mod0 = np.where(mask, base0 + 0.5, base0)
    mod1 = np.where(mask, base1 - 0.35, base1)
    cond = np.stack([mod0, mod1]).astype(np.float32)
    cond = np.clip(cond, 0.02, None)         # keep the body strictly nonzero
    cond *= body[None]
    cond = normalize(cond, per_channel=True).volume
    return SyntheticCase(
        case_id=case_id,
        split=split,
        condition=cond,
        mask=mask[None].astype(np.float32),
    )


def generate_dataset(
    n_cases: int,
    extent: int,
    seed: int,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[SyntheticCase]:
    """Deterministic (seeded) stand-in dataset of lesion-bearing volumes."""
    if n_cases < 3:
        raise ValueError(f"need at least 3 cases, got {n_cases}")
    if extent < 8:
        raise ValueError(f"extent must be >= 8, got {extent}")
    sizes = split_sizes(n_cases, split_fractions)
    splits = [s for s, n in zip(("train", "val", "test"), sizes) for _ in range(n)]
    cases = []
    for idx in range(n_cases):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        cases.append(_make_case(f"case_{idx:04d}", splits[idx], extent, rng))
    return cases


def save_case(directory: str | Path, case: SyntheticCase) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cond_base = directory / f"{case.case_id}.cond"
    mask_base = directory / f"{case.case_id}.mask"
    save_volume(cond_base, case.condition,
                channel_names=[f"modality{i}" for i in range(case.condition.shape[0])],
                value_range="normalized [0,1]")
    save_volume(mask_base, case.mask, channel_names=["mask"],
                value_range="binary {0,1}")
    return {
        "id": case.case_id,
        "split": case.split,
        "cond": cond_base.name,
        "mask": mask_base.name,
    }


def load_case(directory: str | Path, entry: dict) -> SyntheticCase:
    directory = Path(directory)
    cond, _ = load_volume(directory / entry["cond"])
    mask, _ = load_volume(directory / entry["mask"])
    return SyntheticCase(entry["id"], entry["split"], cond, mask)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: ModelParams
    opt_state: AdamWState | None
    schedule_params: dict
    step: int
    rng_states: dict
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    model: ModelParams,
    opt_state: AdamWState | None,
    schedule_params: dict,
    step: int,
    rng_states: dict | None = None,
    extra: dict | None = None,
) -> None:
    manifest = []
    chunks = []
    offset = 0

    def push(kind: str, name: str, arr: np.ndarray) -> None:
        nonlocal offset
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({
            "kind": kind,
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        chunks.append(blob)
        offset += len(blob)

    for name, p in model.params.items():
        push("param", name, p.data)
    if opt_state is not None:
        for name in model.params:
            push("adam_m", name, opt_state.m[name])
            push("adam_v", name, opt_state.v[name])

    header = {
        "config": {
            **{k: getattr(model.config, k) for k in (
                "in_channels", "out_channels", "base_width", "width_multiplier",
                "blocks_per_level", "kernel_size", "time_embed_dim", "norm_groups",
            )},
            "channel_multipliers": list(model.config.channel_multipliers),
        },
        "schedule": schedule_params,
        "step": step,
        "opt_step": None if opt_state is None else opt_state.step,
        "rng": rng_states or {},
        "extra": extra or {},
        "tensors": manifest,
    }
    header_blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header_blob)))
        fh.write(header_blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(CKPT_MAGIC) + 12 or not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: version mismatch, file has {version}, reader supports "
            f"{CKPT_VERSION}"
        )
    pos += 4
    (header_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        header = json.loads(blob[pos:pos + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}")
    payload = blob[pos + header_len:]
    manifest = header["tensors"]
    expected = sum(t["nbytes"] for t in manifest)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest implies {expected}"
        )

    cfg_dict = dict(header["config"])
    cfg_dict["channel_multipliers"] = tuple(cfg_dict["channel_multipliers"])
    config = UNetConfig(**cfg_dict)
    model = build_model(config, seed=0)

    def read(entry: dict) -> np.ndarray:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()

    opt_state = AdamWState(step=header["opt_step"] or 0) if header["opt_step"] is not None else None
    seen_params = set()
    for entry in manifest:
        name = entry["name"]
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter path {name!r}")
        arr = read(entry)
        if entry["kind"] == "param":
            if arr.shape != model.params[name].data.shape:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, model "
                    f"expects {model.params[name].data.shape}"
                )
            model.params[name] = Tensor(arr, requires_grad=True)
            seen_params.add(name)
        elif entry["kind"] == "adam_m":
            opt_state.m[name] = arr
        elif entry["kind"] == "adam_v":
            opt_state.v[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {entry['kind']!r}")
    missing = set(model.params) - seen_params
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}...")

    return Checkpoint(
        model=model,
        opt_state=opt_state,
        schedule_params=header["schedule"],
        step=header["step"],
        rng_states=header["rng"],
        extra=header.get("extra", {}),
    )
