"""Command-line entry point: ``recapprox <verb> [--config FILE] [--key value ...]``.

Verbs: gen-data, train, evolve, eval, infer. Every setting is a key of
:class:`RunConfig`; a config file holds ``key = value`` lines (``#`` starts a
comment) and ``--key value`` on the command line overrides it. Dashes and
underscores in key names are interchangeable.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch

from .core import ClassMask, DataError, read_mask, read_pnm, image_from_bytes, seeded_rng, write_mask
from .data import SceneConfig, assign_availability, generate_dataset, load_dataset, save_dataset
from .geometry import class_instances, update_labels
from .metrics import approximation_curve, curve_csv, evaluate, reports_csv, summary_text
from .model import NetworkConfig, NumericalError, forward, load_checkpoint, predict_mask, save_checkpoint
from .train import TrainConfig, final_inference, history_csv, run_recursive_training, timing_csv, train_single_task

log = logging.getLogger("recapprox")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VERBS = ("gen-data", "train", "evolve", "eval", "infer")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic scenes
    size: int = 128
    instances: tuple[int, int] = (4, 7)
    classes: int = 2
    shape: str = "mixed"
    radius: tuple[float, float] = (9.0, 17.0)
    contrast: tuple[float, float] = (0.25, 0.55)
    noise: float = 0.04
    texture: float = 0.06
    shading: float = 0.12
    edge_softness: float = 0.8
    touch_prob: float = 0.35
    shrink: tuple[float, float] = (0.2, 0.32)
    perturbation: float = 0.3
    seed: int = 0
    # dataset layout and label availability (training split only)
    train_count: int = 40
    val_count: int = 10
    test_count: int = 20
    ratio_strong: float = 0.1
    ratio_coarse: float = 1.0
    ratio_scribble: float = 1.0
    # network
    levels: int = 4
    base_channels: int = 8
    multitask_blocks: int = 2
    normalization: str = "batch"
    leaky_slope: float = 0.01
    # training
    mode: str = "multitask"  # multitask | single (strong labels only)
    outer_iterations: int = 10
    steps: int = 600
    batch_size: int = 8
    crop_size: int = 64
    beta_train: float = 1.0
    beta_final: float = 100.0
    lr: float = 2e-4
    flip: bool = True
    rotate: bool = True
    rescale: bool = True
    alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    connectivity: int = 8
    # evaluation and inference
    split: str = "test"
    inference: str = "final"  # final (grow task 2 into task 1) | task1 (plain segmentation head)
    checkpoint: str = ""  # default: <out_dir>/checkpoints/final.bin
    # evolve
    seed_mask: str = ""
    prediction: str = ""
    beta: float = 1.0
    mask_classes: int = 3
    # files
    data_dir: str = "data"
    out_dir: str = "run"
    image: str = ""
    output: str = ""
    threads: int = 0  # 0 = all available cores

    def __post_init__(self):
        for name in ("ratio_strong", "ratio_coarse", "ratio_scribble"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.mode not in ("multitask", "single"):
            raise ConfigError(f"mode must be 'multitask' or 'single', got {self.mode!r}")
        if self.inference not in ("final", "task1"):
            raise ConfigError(f"inference must be 'final' or 'task1', got {self.inference!r}")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train, val or test, got {self.split!r}")
        if self.threads < 0:
            raise ConfigError("threads must be non-negative")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        try:
            self.scene()
            self.network()
            self.training()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def scene(self) -> SceneConfig:
        keys = {f.name for f in fields(SceneConfig)}
        return SceneConfig(**{k: v for k, v in asdict(self).items() if k in keys})

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            levels=self.levels,
            base_channels=self.base_channels,
            task_classes=(self.classes + 1, self.classes + 1, 2),
            multitask_blocks=self.multitask_blocks,
            normalization=self.normalization,
            leaky_slope=self.leaky_slope,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            outer_iterations=self.outer_iterations,
            steps_per_iteration=self.steps,
            batch_size=self.batch_size,
            crop_size=self.crop_size,
            beta_train=self.beta_train,
            beta_final=self.beta_final,
            lr=self.lr,
            flip=self.flip,
            rotate=self.rotate,
            rescale=self.rescale,
            alphas=self.alphas,
            connectivity=self.connectivity,
            seed=self.seed,
        )

    def as_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _parse_value(key: str, kind, raw: str):
    kind = str(kind)
    try:
        if kind.startswith("tuple"):
            cast = int if "int" in kind else float
            return tuple(cast(p) for p in raw.replace(" ", "").split(",") if p)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_config(file_values: dict[str, str], overrides: dict[str, str]) -> RunConfig:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    merged = {**file_values, **overrides}
    kwargs = {}
    for key, raw in merged.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _parse_value(key, kinds[key], raw)
    return RunConfig(**kwargs)


def _split_overrides(tokens: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 1
        out[key.replace("-", "_")] = value
        i += 1
    return out


# ---------------------------------------------------------------------------
# verbs


def _ratios(cfg: RunConfig) -> dict[int, float]:
    return {1: cfg.ratio_strong, 2: cfg.ratio_coarse, 3: cfg.ratio_scribble}


def cmd_gen_data(cfg: RunConfig) -> None:
    scene = cfg.scene()
    root = Path(cfg.data_dir)
    for split, count in (("train", cfg.train_count), ("val", cfg.val_count), ("test", cfg.test_count)):
        ds = generate_dataset(scene, count, split)
        if split == "train" and count:
            ds = assign_availability(ds, _ratios(cfg), seeded_rng(cfg.seed, 99))
        target = root / split
        if target.exists():
            shutil.rmtree(target)
        save_dataset(ds, target)
        avail = ", ".join(f"task {t}: {len(ds.labeled(t))}" for t in sorted(ds.task_classes))
        print(f"{split}: {count} items ({avail})")


def _snapshot_dir(out: Path, k: int) -> Path:
    return out / "snapshots" / f"k{k:02d}"


def _write_snapshots(out: Path, k: int, masks) -> None:
    target = _snapshot_dir(out, k)
    target.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(masks):
        if mask is not None:
            write_mask(target / f"{i:04d}.pgm", mask)


def cmd_train(cfg: RunConfig) -> None:
    dataset = load_dataset(Path(cfg.data_dir) / "train")
    out = Path(cfg.out_dir)
    if out.exists():
        for sub in ("checkpoints", "snapshots"):
            shutil.rmtree(out / sub, ignore_errors=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.as_text())
    net_cfg, train_cfg = cfg.network(), cfg.training()
    final = out / "checkpoints" / "final.bin"
    if cfg.mode == "single":
        net = train_single_task(dataset, net_cfg, train_cfg)
        save_checkpoint(net, final)
        print(f"single-task model written to {final}")
        return

    def on_iteration(k, net, state):
        save_checkpoint(net, out / "checkpoints" / f"ckpt_k{k:02d}.bin")
        _write_snapshots(out, k, state.snapshots[k])

    _write_snapshots(out, 0, [item.labels.get(2) for item in dataset.items])
    net, state = run_recursive_training(dataset, net_cfg, train_cfg, on_iteration)
    save_checkpoint(net, final)
    (out / "history.csv").write_text(history_csv(state))
    (out / "timing.csv").write_text(timing_csv(state))
    gts = [item.gt for item in dataset.items]
    if all(gts[i] is not None for i in dataset.labeled(2)):
        (out / "curve.csv").write_text(curve_csv(approximation_curve(state.snapshots, gts)))
    for k, loss, d in state.history_rows():
        print(f"k={k}: loss {loss:.5f}, task-2 dice {d:.4f}")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "checkpoints" / "final.bin"


def _infer(net, image, cfg: RunConfig) -> ClassMask:
    if cfg.inference == "task1":
        return predict_mask(forward(net, image), 1)
    return final_inference(net, image, cfg.beta_final, cfg.connectivity)


def evaluate_predictions(dataset, predictions) -> list:
    reports = []
    for i, (item, pred) in enumerate(zip(dataset.items, predictions)):
        if item.gt is None:
            raise DataError(f"item {i} of split {dataset.split!r} has no ground truth")
        reports.append(evaluate(f"{i:04d}", item.gt, pred, item.instances))
    return reports


def cmd_eval(cfg: RunConfig) -> None:
    net = load_checkpoint(_checkpoint_path(cfg))
    dataset = load_dataset(Path(cfg.data_dir) / cfg.split)
    if not len(dataset):
        raise DataError(f"split {cfg.split!r} is empty")
    reports = evaluate_predictions(dataset, [_infer(net, item.image, cfg) for item in dataset.items])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{cfg.split}_{cfg.inference}"
    (out / f"{stem}.csv").write_text(reports_csv(reports))
    text = summary_text(reports, f"{cfg.split} split, {cfg.inference} inference")
    (out / f"{stem}.txt").write_text(text)
    print(text, end="")


def _require(cfg: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise ConfigError("missing required key(s): " + ", ".join(missing))


def cmd_evolve(cfg: RunConfig) -> None:
    _require(cfg, "seed_mask", "prediction", "output")
    seed = read_mask(Path(cfg.seed_mask), cfg.mask_classes)
    pred = read_mask(Path(cfg.prediction), cfg.mask_classes)
    if seed.shape != pred.shape:
        raise DataError(f"seed mask {seed.shape} and prediction {pred.shape} differ in shape")
    out = update_labels(seed, pred, cfg.beta, cfg.connectivity)
    Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
    write_mask(Path(cfg.output), out)
    before = len(class_instances(seed, cfg.connectivity))
    after = len(class_instances(out, cfg.connectivity))
    print(f"instances before: {before}, after: {after}")
    if before != after:
        raise NumericalError("instance count changed during label update")


def cmd_infer(cfg: RunConfig) -> None:
    _require(cfg, "image", "output")
    net = load_checkpoint(_checkpoint_path(cfg))
    image = image_from_bytes(read_pnm(Path(cfg.image)))
    if image.channels != net.cfg.in_channels:
        raise DataError(f"{cfg.image}: expected {net.cfg.in_channels} channel(s), got {image.channels}")
    d = net.cfg.divisor
    if image.height % d or image.width % d:
        raise DataError(f"{cfg.image}: size {image.height}x{image.width} is not divisible by {d}")
    mask = _infer(net, image, cfg)
    Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
    write_mask(Path(cfg.output), mask)
    print(f"{len(class_instances(mask, cfg.connectivity))} instances written to {cfg.output}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evolve": cmd_evolve,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="recapprox",
        description="Recursive approximation of coarse object masks with multi-task segmentation networks.",
        epilog="Any configuration key can be given as --key value; see README for the list.",
    )
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    return p


def main(argv: list[str] | None = None) -> int:
    args, rest = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config file: {exc}") from None
            file_values = parse_config_text(text, args.config)
        cfg = build_config(file_values, _split_overrides(rest))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(cfg.threads or os.cpu_count() or 1)
    try:
        COMMANDS[args.verb](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
