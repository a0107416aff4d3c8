"""Five-architecture model zoo: construction, training, checkpoints and role assignment."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetProfile
from .nn import (
    DTYPE,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    Network,
    ReLU,
    TrainConfig,
    as_arrays,
    layer_from_config,
    train_epoch,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ARCHITECTURES = ("cnn-a", "cnn-b", "cnn-wide", "mlp", "cnn-pool")


class ZooTrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _layers(arch: str, k: int):
    if arch == "cnn-a":
        return [
            Conv2D(16, 5, stride=2, padding=2), ReLU(),
            Conv2D(32, 3, stride=2, padding=1), ReLU(), MaxPool2D(2),
            Flatten(), Dense(k),
        ]  # fmt: skip
    if arch == "cnn-b":
        return [
            Conv2D(12, 3, stride=2, padding=1), ReLU(), MaxPool2D(2),
            Conv2D(24, 3, stride=1, padding=1), ReLU(), MaxPool2D(2),
            Flatten(), Dense(64), ReLU(), Dense(k),
        ]  # fmt: skip
    if arch == "cnn-wide":
        return [
            Conv2D(32, 7, stride=4, padding=3), ReLU(),
            Conv2D(64, 3, stride=2, padding=1), ReLU(),
            GlobalAvgPool(), Dense(k),
        ]  # fmt: skip
    if arch == "mlp":
        return [MaxPool2D(2), MaxPool2D(2), Flatten(), Dense(128), ReLU(), Dense(64), ReLU(), Dense(k)]
    if arch == "cnn-pool":
        return [
            Conv2D(8, 3, stride=1, padding=1), ReLU(), MaxPool2D(2),
            Conv2D(16, 3, stride=1, padding=1), ReLU(), MaxPool2D(2),
            Conv2D(32, 3, stride=1, padding=1), ReLU(), MaxPool2D(2),
            Flatten(), Dense(k),
        ]  # fmt: skip
    raise ValueError(f"unknown architecture {arch!r}; valid ids: {', '.join(ARCHITECTURES)}")


def build_architecture(arch: str, profile: DatasetProfile, seed: int = 0) -> Network:
    """Untrained network of the given architecture id for ``profile``'s image shape."""
    return Network.build(arch, profile.shape, _layers(arch, profile.num_classes), seed=seed)


def evaluate_accuracy(net: Network, data) -> float:
    x, y = as_arrays(data)
    if len(y) == 0:
        return 0.0
    return float(np.mean(net.predict(x) == y))


@dataclass
class ZooEntry:
    arch: str
    net: Network
    accuracy: float


@dataclass
class ModelZoo:
    profile: DatasetProfile
    entries: list[ZooEntry] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [e.arch for e in self.entries]

    def __getitem__(self, arch: str) -> Network:
        for e in self.entries:
            if e.arch == arch:
                return e.net
        raise KeyError(f"model {arch!r} not in zoo (have {self.ids})")

    def __len__(self):
        return len(self.entries)

    def accuracies(self) -> dict[str, float]:
        return {e.arch: e.accuracy for e in self.entries}


@dataclass(frozen=True)
class RoleAssignment:
    victim: str
    surrogate: str
    ranking: tuple

    def __post_init__(self):
        if self.victim == self.surrogate:
            raise ValueError("victim and surrogate must differ")
        if self.victim in self.ranking or self.surrogate in self.ranking:
            raise ValueError("ranking set must exclude victim and surrogate")

    @property
    def pair_id(self) -> str:
        return f"{self.victim}<-{self.surrogate}"


def enumerate_roles(zoo) -> list[RoleAssignment]:
    """Every ordered (victim, surrogate) pair; the rest of the zoo forms the ranking set."""
    ids = zoo.ids if isinstance(zoo, ModelZoo) else list(zoo)
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids in zoo: {ids}")
    if len(ids) < 3:
        raise ValueError(f"need at least 3 models to leave a non-empty ranking set, got {len(ids)}")
    return [
        RoleAssignment(f, fp, tuple(m for m in ids if m not in (f, fp)))
        for f, fp in itertools.permutations(ids, 2)
    ]


# plain SGD needs a larger step for the global-pool net and a smaller, longer schedule for the MLP
ARCH_DEFAULTS = {
    "cnn-a": {"lr": 0.05, "epochs": 15},
    "cnn-b": {"lr": 0.05, "epochs": 15},
    "cnn-wide": {"lr": 0.1, "epochs": 50},
    "mlp": {"lr": 0.02, "epochs": 80},
    "cnn-pool": {"lr": 0.05, "epochs": 15},
}


@dataclass
class ZooTrainConfig:
    architectures: tuple = ARCHITECTURES
    epochs: int | None = None  # None: per-architecture default
    max_epochs: int = 150
    lr: float | None = None
    batch_size: int = 32
    seed: int = 0
    min_accuracy: float = 0.85

    def for_arch(self, arch):
        d = ARCH_DEFAULTS.get(arch, {"lr": 0.05, "epochs": 20})
        return (self.lr if self.lr is not None else d["lr"]), (self.epochs if self.epochs is not None else d["epochs"])


def train_zoo(profile: DatasetProfile, data, config: ZooTrainConfig | dict | None = None) -> ModelZoo:
    """Train one model per architecture on the shared training split.

    ``data`` is ``(train, test)``; accuracy is measured on ``test``. Each model
    trains for ``epochs`` epochs, then keeps going (up to ``max_epochs``) until
    it clears ``min_accuracy``.
    """
    config = ZooTrainConfig(**config) if isinstance(config, dict) else (config or ZooTrainConfig())
    train, test = data
    x, y = as_arrays(train)
    if len(y) == 0:
        raise ValueError("cannot train a zoo on an empty dataset")
    zoo = ModelZoo(profile)
    failed = []
    for i, arch in enumerate(config.architectures):
        net = build_architecture(arch, profile, seed=config.seed * 1000 + i)
        lr, epochs = config.for_arch(arch)
        for epoch in range(max(epochs, config.max_epochs)):
            cfg = TrainConfig(lr=lr, batch_size=config.batch_size, seed=config.seed * 100_003 + i * 1009 + epoch)
            net, loss = train_epoch(net, (x, y), cfg)
            if epoch + 1 >= epochs:
                acc = evaluate_accuracy(net, test)
                if acc >= config.min_accuracy:
                    break
            log.debug("%s epoch %d loss %.4f", arch, epoch, loss)
        acc = evaluate_accuracy(net, test)
        log.info("trained %s: held-out accuracy %.3f", arch, acc)
        zoo.entries.append(ZooEntry(arch, net, acc))
        if acc < config.min_accuracy:
            failed.append(f"{arch} ({acc:.3f})")
    if failed:
        raise ZooTrainingError(f"accuracy floor {config.min_accuracy} unmet for: {', '.join(failed)}")
    return zoo


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# <dir>/manifest.json  {"format_version", "profile", "models": [{"arch", "accuracy",
#                        "input_shape", "layers", "params": [{"name", "shape", "file"}]}]}
# <dir>/<arch>/<layer>.<param>.f32   little-endian float32, C order


def save_zoo(zoo: ModelZoo, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    models = []
    for entry in zoo.entries:
        sub = directory / entry.arch
        sub.mkdir(exist_ok=True)
        params = []
        for name, arr in entry.net.parameters():
            fname = f"{entry.arch}/{name}.f32"
            (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            params.append({"name": name, "shape": list(arr.shape), "file": fname})
        models.append(
            {
                "arch": entry.arch,
                "accuracy": entry.accuracy,
                "input_shape": list(entry.net.input_shape),
                "layers": [layer.config() for layer in entry.net.layers],
                "params": params,
            }
        )
    manifest = {"format_version": CHECKPOINT_VERSION, "profile": zoo.profile.to_dict(), "models": models}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_zoo(directory) -> ModelZoo:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    zoo = ModelZoo(DatasetProfile.from_dict(manifest["profile"]))
    for m in manifest["models"]:
        layers = [layer_from_config(cfg) for cfg in m["layers"]]
        by_name = {}
        for p in m["params"]:
            blob = (directory / p["file"]).read_bytes()
            expected = int(np.prod(p["shape"])) * 4
            if len(blob) != expected:
                raise CheckpointError(f"{p['file']}: expected {expected} bytes, found {len(blob)} (truncated?)")
            by_name[p["name"]] = np.frombuffer(blob, dtype="<f4").reshape(p["shape"]).astype(DTYPE)
        for i, layer in enumerate(layers):
            for key in ("W", "b"):
                name = f"{i}.{key}"
                if name in by_name:
                    layer.params[key] = by_name.pop(name)
        if by_name:
            raise CheckpointError(f"{m['arch']}: unused parameters {sorted(by_name)}")
        zoo.entries.append(ZooEntry(m["arch"], Network(m["arch"], tuple(m["input_shape"]), layers), float(m["accuracy"])))
    return zoo
