"""Declarative experiment configs, presets, and the routines behind the CLI."""

from __future__ import annotations

import copy
import json
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from ._validation import check_architecture
from .bise import BiSEParams
from .datasets import DatasetSpec, TargetOp, build_arrays, make_se
from .lui import LUIParams
from .morphology import BinarySet
from .network import BimonnModel, BiselLayer, NetworkCertificate, binarize_network, \
    execute_binarized, threshold
from .training import TrainConfig, TrainReport, init_model, mean_dice, predict, train

EVAL_SEED_OFFSET = 1_000_000


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def package_version() -> str:
    try:
        base = version("artifact")
    except PackageNotFoundError:
        base = "0+unknown"
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return base
    rev = described.stdout.strip()
    return f"{base}+g{rev}" if described.returncode == 0 and rev else base


# --- presets ------------------------------------------------------------------

def load_presets() -> dict:
    text = resources.files("bimonn").joinpath("presets.json").read_text()
    return json.loads(text)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(ref: str | dict, _seen: tuple = ()) -> dict:
    """Load a config from a path, a preset name or a dict; follow ``extends`` chains."""
    if isinstance(ref, dict):
        raw = ref
    else:
        path = Path(ref)
        if path.is_file():
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        else:
            presets = load_presets()
            if ref not in presets:
                raise ConfigError(f"{ref!r} is neither a config file nor a preset")
            raw = _merge(presets[ref], {"name": presets[ref].get("name", ref)})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    parent = raw.get("extends")
    if parent is None:
        return raw
    if parent in _seen:
        raise ConfigError(f"circular extends through {parent!r}")
    base = resolve_config(parent, _seen + (parent,))
    child = {k: v for k, v in raw.items() if k != "extends"}
    return _merge(base, child)


# --- parsing ------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetSpec
    target: TargetOp
    architecture: list
    train: TrainConfig
    eval_count: int = 200
    bench: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.train.seed

    def eval_dataset(self) -> DatasetSpec:
        spec = copy.copy(self.dataset)
        spec.seed = self.dataset.seed + EVAL_SEED_OFFSET
        spec.count = self.eval_count
        return spec


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_config(raw: dict, seed: int | None = None) -> ExperimentConfig:
    """Validate a resolved config; ``seed`` overrides the data and training seeds."""
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw.setdefault("dataset", {})["seed"] = int(seed)
        raw.setdefault("train", {})["seed"] = int(seed)
    for key in ("dataset", "target", "architecture"):
        if key not in raw:
            raise ConfigError(f"missing section {key!r}")
    dataset = _build(DatasetSpec, raw["dataset"], "dataset")
    tgt = raw["target"]
    if not isinstance(tgt, dict) or "kind" not in tgt:
        raise ConfigError("target needs a 'kind'")
    se = None
    if tgt.get("se") is not None:
        try:
            se = make_se(tgt["se"]["shape"], int(tgt["se"]["side"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"target.se: {exc}") from exc
    try:
        target = TargetOp(tgt["kind"], se)
        architecture = check_architecture(raw["architecture"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if architecture[0][0] != target.in_channels:
        raise ConfigError(f"target {target.kind!r} has {target.in_channels} input channels, "
                          f"architecture expects {architecture[0][0]}")
    if architecture[-1][1] != 1:
        raise ConfigError("architecture must end with a single output channel")
    train_cfg = _build(TrainConfig, raw.get("train", {}), "train")
    eval_count = int(raw.get("eval", {}).get("count", 200))
    if eval_count < 1:
        raise ConfigError("eval.count must be positive")
    if dataset.kind in ("mnist", "inverted_mnist"):
        if not dataset.source_path:
            raise ConfigError("MNIST datasets need dataset.source_path (an IDX image file)")
        if not Path(dataset.source_path).is_file():
            raise ConfigError(f"dataset.source_path {dataset.source_path!r} does not exist")
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        dataset=dataset,
        target=target,
        architecture=architecture,
        train=train_cfg,
        eval_count=eval_count,
        bench=dict(raw.get("bench", {})),
        raw=raw,
    )


def provenance(config: ExperimentConfig) -> dict:
    return {"config": config.raw, "seed": config.seed, "version": package_version()}


# --- running ---------------------------------------------------------------------

def train_experiment(config: ExperimentConfig) -> tuple[BimonnModel, TrainReport]:
    x, y = build_arrays(config.dataset, config.target)
    model = init_model(config.architecture, seed=config.train.seed)
    report = train(model, x, y, config.train)
    return model, report


def binarized_outputs(cert: NetworkCertificate, inputs: np.ndarray, workers: int = 1) -> np.ndarray:
    """Run the certificate on each ``(C, H, W)`` boolean sample; order is preserved."""
    def one(sample):
        channels = execute_binarized(cert, [BinarySet.from_array(c) for c in sample])
        return np.stack([c.to_array() for c in channels])

    if workers <= 1:
        return np.stack([one(s) for s in inputs])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.stack(list(pool.map(one, inputs)))


@dataclass
class Evaluation:
    r_dice: float
    b_dice: float
    totally_activated: bool
    n_images: int
    border: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: BimonnModel, config: ExperimentConfig,
             cert: NetworkCertificate | None = None, workers: int = 1) -> Evaluation:
    """Real-weight and binarized DICE on the held-out split."""
    x, y = build_arrays(config.eval_dataset(), config.target)
    cert = cert or binarize_network(model)
    border = model.border
    r = mean_dice(threshold(predict(model, x)), y, border)
    b = mean_dice(binarized_outputs(cert, x > 0.5, workers), y, border)
    return Evaluation(r, b, cert.totally_activated, int(x.shape[0]), border)


def _certified_dilation(se, scale: float = 20.0) -> BimonnModel:
    layer = BiselLayer(1, 1, se.side)
    weights = np.where(se.array, 1.0, 1e-3)
    layer.set_bise(0, 0, BiSEParams.from_effective(weights, 0.75, scale))
    layer.set_lui(0, LUIParams.from_effective([1.0], 0.75, scale))
    return BimonnModel([layer])


def bench_layer(size: int, se, repetitions: int = 10, seed: int = 0) -> dict:
    """Float forward versus bit-packed execution of a certified single-layer network."""
    model = _certified_dilation(se)
    cert = binarize_network(model)
    if not cert.totally_activated:
        raise RuntimeError("benchmark network failed to certify")
    rng = np.random.default_rng(seed)
    image = rng.random((size, size)) < 0.5
    x = image[None, None].astype(np.float32)
    packed = BinarySet.from_array(image)

    def timed(fn):
        fn()
        start = time.perf_counter()
        for _ in range(repetitions):
            result = fn()
        return result, (time.perf_counter() - start) / repetitions

    float_out, t_float = timed(lambda: model.forward(x))
    bin_out, t_bin = timed(lambda: execute_binarized(cert, [packed]))
    identical = bool(np.array_equal(threshold(float_out[0, 0]), bin_out[0].to_array()))
    mp = size * size / 1e6
    return {
        "size": size,
        "se": {"side": se.side, "card": len(se)},
        "repetitions": repetitions,
        "float_mpix_per_s": mp / t_float,
        "binary_mpix_per_s": mp / t_bin,
        "speedup": t_float / t_bin,
        "identical": identical,
    }
