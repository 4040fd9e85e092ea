"""Command-line surface: generate, train, sample, eval, bench.

One declarative RunConfig drives every command; a JSON config file can set
any field and individual ``--flag`` overrides win over the file. Unknown
config keys are rejected. All randomness flows from the named seeds, so
every command is deterministic given config + seeds (timings excluded).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .dataio import (
    generate_dataset,
    load_case,
    load_checkpoint,
    load_volume,
    save_case,
    save_checkpoint,
    save_volume,
)
from .metrics import UndefinedDistanceError, dice, hd95
from .optim import adamw_step, init_adamw_state
from .patches import CenterWeightedSampler
from .pipeline import MODES, TrainBatch, ensemble, sample_segmentation, training_step
from .schedule import build_schedule, make_stride_plan
from .unet import UNetConfig, build_model, count_flops_and_peak_memory

TRAIN_METRICS_HEADER = ("step", "split", "dice", "hd95")
EVAL_METRICS_HEADER = ("run_id", "case_id", "mode", "ensemble_size", "steps",
                       "dice", "hd95")
BENCH_HEADER = ("mode", "phase", "time_s", "peak_bytes", "flops")
KERNEL_BENCH_HEADER = ("backend", "op", "channels", "extent", "time_s")

UNDEFINED = "undefined"  # CSV value for metrics without a numeric result


@dataclass
class RunConfig:
    """Every knob of the pipeline, with recorded defaults.

    The learning-rate default is tuned for desk-scale synthetic runs; the
    much smaller rate used for week-scale training remains selectable.
    ``ascending_betas`` defaults to the conventional increasing variance
    order, which uniform stride plans need for accelerated sampling;
    setting it False uses the literal (descending) endpoint order.
    """

    mode: str = "patchddm"
    # data
    data_dir: str = "data"
    out_dir: str = "run"
    n_cases: int = 24
    extent: int = 32
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    # model
    out_channels: int = 1
    base_width: int = 8
    width_multiplier: float = 1.0
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    kernel_size: int = 3
    time_embed_dim: int = 32
    norm_groups: int = 8
    # schedule
    timesteps: int = 1000
    beta_start: float = 0.02
    beta_end: float = 1e-4
    ascending_betas: bool = True
    # training
    patch_extent: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    total_steps: int = 2000
    eval_cadence: int = 500
    eval_steps: int = 20
    # sampling
    sample_steps: tuple[int, ...] = (20,)
    ensemble_sizes: tuple[int, ...] = (1,)
    sample_split: str = "test"
    # seeds
    data_seed: int = 7
    model_seed: int = 1
    train_seed: int = 123
    patch_seed: int = 77
    sample_seed: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("split_fractions", "channel_multipliers", "sample_steps",
                     "ensemble_sizes"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                setattr(self, name, tuple(value))

    @property
    def run_id(self) -> str:
        return Path(self.out_dir).name

    def unet_config(self, cond_channels: int) -> UNetConfig:
        return UNetConfig(
            in_channels=1 + cond_channels + 3,
            out_channels=self.out_channels,
            base_width=self.base_width,
            width_multiplier=self.width_multiplier,
            channel_multipliers=self.channel_multipliers,
            blocks_per_level=self.blocks_per_level,
            kernel_size=self.kernel_size,
            time_embed_dim=self.time_embed_dim,
            norm_groups=self.norm_groups,
        )

    def schedule_params(self) -> dict:
        lo, hi = sorted((self.beta_start, self.beta_end))
        start, end = (lo, hi) if self.ascending_betas else (self.beta_start, self.beta_end)
        return {"T": self.timesteps, "beta_start": start, "beta_end": end,
                "ascending": self.ascending_betas}

    def build_schedule(self):
        p = self.schedule_params()
        return build_schedule(p["T"], p["beta_start"], p["beta_end"])

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.field_names())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def _parse_field_value(ftype: str, raw: str):
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    if ftype == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if ftype.startswith("tuple"):
        parts = [p for p in raw.split(",") if p]
        if "float" in ftype:
            return tuple(float(p) for p in parts)
        return tuple(int(p) for p in parts)
    return raw


def _field_type_name(f: dataclasses.Field) -> str:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    return t


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file; flags below override it")
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, type=str, default=None, metavar=_field_type_name(f))


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    data = cfg.to_dict()
    for f in dataclasses.fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            data[f.name] = _parse_field_value(_field_type_name(f), raw)
    return RunConfig.from_dict(data)


def _write_csv(path: Path, header: tuple[str, ...], rows: list[tuple]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _fmt(value: float | None) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: RunConfig) -> Path:
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = generate_dataset(cfg.n_cases, cfg.extent, cfg.data_seed,
                             cfg.split_fractions)
    entries = [save_case(out, case) for case in cases]
    manifest = {
        "n_cases": cfg.n_cases,
        "extent": cfg.extent,
        "seed": cfg.data_seed,
        "split_fractions": list(cfg.split_fractions),
        "cases": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    print(f"wrote {len(entries)} cases to {out}")
    return path


def _load_split(cfg: RunConfig, split: str):
    manifest = json.loads((Path(cfg.data_dir) / "manifest.json").read_text())
    return [load_case(cfg.data_dir, e) for e in manifest["cases"]
            if e["split"] == split]


# ---------------------------------------------------------------------------
# train


def _case_seed(base: int, *key: int) -> int:
    return int(np.random.SeedSequence([base, *key]).generate_state(1)[0])


def _validate(cfg, model, schedule, cases, step: int, plan):
    """Single-sample dice/hd95 per case; returns (mean dice, mean hd95)."""
    dices = []
    hds = []
    for idx, case in enumerate(cases):
        seed = _case_seed(cfg.sample_seed, step, idx)
        out = sample_segmentation(model, schedule, case.condition, plan,
                                  seed, cfg.mode)
        gt = case.mask[0] > 0.5
        dices.append(dice(out.mask[0], gt))
        try:
            hds.append(hd95(out.mask[0], gt))
        except UndefinedDistanceError:
            pass
    mean_hd = float(np.mean(hds)) if hds else None
    return float(np.mean(dices)), mean_hd


def cmd_train(cfg: RunConfig, resume: str | None = None) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")
    train_cases = _load_split(cfg, "train")
    val_cases = _load_split(cfg, "val")
    if not train_cases:
        raise ValueError(f"no training cases found in {cfg.data_dir}")
    cond_channels = train_cases[0].condition.shape[0]

    schedule = cfg.build_schedule()
    rng = np.random.default_rng(cfg.train_seed)
    sampler = CenterWeightedSampler(seed=cfg.patch_seed)
    start_step = 0
    best_dice = -1.0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = ckpt.model
        opt_state = ckpt.opt_state
        start_step = ckpt.step
        best_dice = ckpt.extra.get("best_val_dice", -1.0)
        rng.bit_generator.state = ckpt.rng_states["train"]
        sampler.rng.bit_generator.state = ckpt.rng_states["sampler"]
    else:
        model = build_model(cfg.unet_config(cond_channels), cfg.model_seed)
        opt_state = init_adamw_state(model.params)

    plan = make_stride_plan(cfg.timesteps, cfg.eval_steps)
    loss_rows = []
    metric_rows = []

    def save(path: Path, step: int) -> None:
        save_checkpoint(
            path, model, opt_state, cfg.schedule_params(), step,
            rng_states={"train": rng.bit_generator.state,
                        "sampler": sampler.rng.bit_generator.state},
            extra={"best_val_dice": best_dice, "run_id": cfg.run_id},
        )

    for step in range(start_step + 1, cfg.total_steps + 1):
        case = train_cases[int(rng.integers(len(train_cases)))]
        batch = TrainBatch(x0=case.mask, cond=case.condition, mode=cfg.mode)
        result = training_step(
            model, schedule, batch, rng,
            sampler=sampler if cfg.mode == "patchddm" else None,
            patch_extent=cfg.patch_extent if cfg.mode == "patchddm" else None,
        )
        adamw_step(model.params, result.grads, opt_state,
                   lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        loss_rows.append((step, f"{result.loss:.8f}"))

        if val_cases and (step % cfg.eval_cadence == 0 or step == cfg.total_steps):
            mean_dice, mean_hd = _validate(cfg, model, schedule, val_cases,
                                           step, plan)
            metric_rows.append((step, "val", _fmt(mean_dice), _fmt(mean_hd)))
            if mean_dice > best_dice:
                best_dice = mean_dice
                save(out / "best.ckpt", step)
            print(f"step {step}: val dice {mean_dice:.4f} "
                  f"hd95 {_fmt(mean_hd)} (best {best_dice:.4f})")

    save(out / "last.ckpt", cfg.total_steps)
    if not (out / "best.ckpt").exists():
        shutil.copyfile(out / "last.ckpt", out / "best.ckpt")
    _write_csv(out / "metrics.csv", TRAIN_METRICS_HEADER, metric_rows)
    _write_csv(out / "losses.csv", ("step", "loss"), loss_rows)
    print(f"training finished; outputs in {out}")
    return out / "best.ckpt"


# ---------------------------------------------------------------------------
# sample


def cmd_sample(cfg: RunConfig, checkpoint: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.model
    sp = ckpt.schedule_params
    schedule = build_schedule(sp["T"], sp["beta_start"], sp["beta_end"])
    cases = _load_split(cfg, cfg.sample_split)
    rows = []
    member_seeds: dict[str, list[int]] = {}
    for case_idx, case in enumerate(cases):
        gt = case.mask[0] > 0.5
        for steps in cfg.sample_steps:
            plan = make_stride_plan(sp["T"], steps)
            for size in cfg.ensemble_sizes:
                seeds = [_case_seed(cfg.sample_seed, case_idx, member)
                         for member in range(size)]
                result = ensemble(model, schedule, case.condition, plan,
                                  seeds, cfg.mode)
                tag = f"{case.case_id}.steps{steps}.ens{size}"
                member_seeds[tag] = seeds
                save_volume(out / f"{tag}.mask",
                            result.consensus.astype(np.float32),
                            channel_names=["mask"], value_range="binary {0,1}")
                save_volume(out / f"{tag}.mean", result.mean.astype(np.float32),
                            channel_names=["mean"], value_range="[0,1]")
                save_volume(out / f"{tag}.var", result.variance_norm.astype(np.float32),
                            channel_names=["variance_norm"], value_range="[0,1]")
                d = dice(result.consensus[0], gt)
                try:
                    h = hd95(result.consensus[0], gt)
                except UndefinedDistanceError:
                    h = None
                rows.append((cfg.run_id, case.case_id, cfg.mode, size, steps,
                             _fmt(d), _fmt(h)))
    path = out / "eval_metrics.csv"
    _write_csv(path, EVAL_METRICS_HEADER, rows)
    (out / "run_metadata.json").write_text(json.dumps(
        {"run_id": cfg.run_id, "mode": cfg.mode, "checkpoint": str(checkpoint),
         "member_seeds": member_seeds}, sort_keys=True, indent=1))
    print(f"wrote {len(rows)} metric rows to {path}")
    return path


# ---------------------------------------------------------------------------
# eval


def cmd_eval(cfg: RunConfig, pred_dir: str) -> Path:
    """Re-score saved consensus masks against the dataset's ground truth."""
    pred = Path(pred_dir)
    manifest = json.loads((Path(cfg.data_dir) / "manifest.json").read_text())
    by_id = {e["id"]: e for e in manifest["cases"]}
    rows = []
    for mask_file in sorted(pred.glob("*.mask.vol.json")):
        tag = mask_file.name[: -len(".mask.vol.json")]
        parts = tag.split(".")
        case_id = parts[0]
        if case_id not in by_id:
            continue
        steps = int(parts[1].removeprefix("steps")) if len(parts) > 2 else 0
        size = int(parts[2].removeprefix("ens")) if len(parts) > 2 else 1
        predicted, _ = load_volume(pred / f"{tag}.mask")
        gt_case = load_case(cfg.data_dir, by_id[case_id])
        gt = gt_case.mask[0] > 0.5
        mask = predicted[0] > 0.5
        d = dice(mask, gt)
        try:
            h = hd95(mask, gt)
        except UndefinedDistanceError:
            h = None
        rows.append((cfg.run_id, case_id, cfg.mode, size, steps, _fmt(d), _fmt(h)))
    path = pred / "eval_metrics.csv"
    _write_csv(path, EVAL_METRICS_HEADER, rows)
    print(f"wrote {len(rows)} metric rows to {path}")
    return path


# ---------------------------------------------------------------------------
# bench


def _timed(fn, repeats: int = 3) -> tuple[float, int]:
    """Median wall time and tracemalloc peak for one call."""
    fn()  # warmup
    times = []
    peak = 0
    for _ in range(repeats):
        tracemalloc.start()
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
        peak = max(peak, tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    return float(np.median(times)), peak


def _bench_case(cfg: RunConfig):
    case = generate_dataset(3, cfg.extent, cfg.data_seed)[0]
    return case


def cmd_bench(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case = _bench_case(cfg)
    cond_channels = case.condition.shape[0]
    ucfg = cfg.unet_config(cond_channels)
    model = build_model(ucfg, cfg.model_seed)
    schedule = cfg.build_schedule()
    rows = []
    for mode in MODES:
        if mode == "patchddm":
            train_extent = cfg.patch_extent
            infer_extent = cfg.extent
        elif mode == "fullres":
            train_extent = infer_extent = cfg.extent
        else:
            train_extent = infer_extent = cfg.extent // 2
        sampler = CenterWeightedSampler(seed=cfg.patch_seed)
        rng = np.random.default_rng(cfg.train_seed)
        opt = init_adamw_state(model.params)
        batch = TrainBatch(x0=case.mask, cond=case.condition, mode=mode)

        def train_once():
            result = training_step(
                model, schedule, batch, rng,
                sampler=sampler if mode == "patchddm" else None,
                patch_extent=cfg.patch_extent if mode == "patchddm" else None,
            )
            adamw_step(model.params, result.grads, opt, lr=cfg.learning_rate)

        plan1 = make_stride_plan(cfg.timesteps, 1)

        def infer_once():
            sample_segmentation(model, schedule, case.condition, plan1,
                                seed=cfg.sample_seed, mode=mode)

        fwd_macs = count_flops_and_peak_memory(ucfg, infer_extent).macs
        train_macs = 3 * count_flops_and_peak_memory(ucfg, train_extent).macs
        t_train, m_train = _timed(train_once)
        t_infer, m_infer = _timed(infer_once)
        rows.append((mode, "train", f"{t_train:.6f}", m_train, train_macs))
        rows.append((mode, "inference", f"{t_infer:.6f}", m_infer, fwd_macs))

    path = out / "bench.csv"
    _write_csv(path, BENCH_HEADER, rows)

    kernel_rows = _bench_kernels(cfg)
    _write_csv(out / "kernels_bench.csv", KERNEL_BENCH_HEADER, kernel_rows)
    print(f"wrote {path} and {out / 'kernels_bench.csv'}")
    return path


def _bench_kernels(cfg: RunConfig) -> list[tuple]:
    """Compare the conv3d backends on the artifact's working shapes."""
    from . import kernels_numpy
    mods = {"numpy": kernels_numpy}
    if backend.compiled_available():
        from . import _conv3d
        mods["compiled"] = _conv3d
    rng = np.random.default_rng(0)
    rows = []
    ch = cfg.base_width
    for extent in (cfg.patch_extent, cfg.extent):
        x = rng.standard_normal((ch, extent, extent, extent)).astype(np.float32)
        w = rng.standard_normal((ch, ch, 3, 3, 3)).astype(np.float32)
        gy = rng.standard_normal((ch, extent, extent, extent)).astype(np.float32)
        ops = {
            "conv3d_forward": lambda m: m.conv3d_forward(x, w, 1, 1),
            "conv3d_grad_input": lambda m: m.conv3d_grad_input(gy, w, x.shape, 1, 1),
            "conv3d_grad_kernel": lambda m: m.conv3d_grad_kernel(gy, x, w.shape, 1, 1),
        }
        for op_name, op in ops.items():
            for backend_name, mod in mods.items():
                t, _ = _timed(lambda: op(mod))
                rows.append((backend_name, op_name, ch, extent, f"{t:.6f}"))
    return rows


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchddm",
        description="Patch-trained volumetric diffusion segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="emit a synthetic dataset with manifest")
    add_config_arguments(p_gen)

    p_train = sub.add_parser("train", help="train with periodic validation")
    add_config_arguments(p_train)
    p_train.add_argument("--resume", type=str, default=None,
                         help="checkpoint to resume from")

    p_sample = sub.add_parser("sample", help="sample masks, mean and variance maps")
    add_config_arguments(p_sample)
    p_sample.add_argument("--checkpoint", type=str, required=True)

    p_eval = sub.add_parser("eval", help="re-score saved predictions")
    add_config_arguments(p_eval)
    p_eval.add_argument("--pred-dir", type=str, required=True)

    p_bench = sub.add_parser("bench", help="time/memory/FLOP table per mode")
    add_config_arguments(p_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=1)  # faster at these GEMM sizes, and keeps
    except ImportError:              # runs bit-reproducible
        pass
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = config_from_args(args)
    if args.command == "generate":
        cmd_generate(cfg)
    elif args.command == "train":
        cmd_train(cfg, resume=args.resume)
    elif args.command == "sample":
        cmd_sample(cfg, args.checkpoint)
    elif args.command == "eval":
        cmd_eval(cfg, args.pred_dir)
    elif args.command == "bench":
        cmd_bench(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
