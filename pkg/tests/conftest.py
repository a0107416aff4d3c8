import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from peas import harness  # noqa: E402
from peas.data import DatasetProfile, SyntheticSpec, generate_synthetic_dataset  # noqa: E402
from peas.zoo import ZooTrainConfig, load_zoo, save_zoo, train_zoo  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk.json"

TINY = {
    "profile": {"name": "tiny", "shape": [3, 16, 16], "num_classes": 4, "preset": "low-res"},
    "dataset": {"synthetic": {"per_class": 40, "test_per_class": 20, "seed": 1}},
    "zoo_train": {"epochs": 6, "max_epochs": 6, "min_accuracy": 0.0},
    "pool_size": 6,
    "n": 4,
    "bootstrap": 50,
    "n_values": [1, 2, 4],
    "eps_values": [2 / 255, 8 / 255],
    "aug_n_values": [1, 2],
}

_lines = []


@pytest.fixture
def criterion():
    """Record one acceptance line; all lines are repeated in the terminal summary."""

    def record(name, ok, detail=""):
        line = f"{name}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for line in _lines:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# small zoo for unit tests
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def tiny_dict():
    return json.loads(json.dumps(TINY))


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic_dataset(SyntheticSpec(4, (3, 16, 16), 40, 1, 20))


@pytest.fixture(scope="session")
def tiny_zoo(tiny_data):
    profile = DatasetProfile("tiny", (3, 16, 16), 4, "low-res")
    return train_zoo(profile, tiny_data, ZooTrainConfig(epochs=6, max_epochs=6, min_accuracy=0.0))


@pytest.fixture(scope="session")
def tiny_zoo_dir(tiny_zoo, tmp_path_factory):
    return save_zoo(tiny_zoo, tmp_path_factory.mktemp("tinyzoo"))


@pytest.fixture
def tiny_experiment(tiny_dict, tiny_zoo, tiny_data):
    return harness.Experiment(harness.ExperimentConfig.from_dict(tiny_dict), zoo=tiny_zoo, data=tiny_data)


# ---------------------------------------------------------------------------
# desk-scale zoo, trained once and cached between sessions
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_config():
    return harness.ExperimentConfig.from_file(DESK_CONFIG)


@pytest.fixture(scope="session")
def desk_data(desk_config):
    return harness.load_experiment_data(desk_config)


@pytest.fixture(scope="session")
def desk_zoo_dir(request, desk_config, desk_data):
    import peas
    from peas import zoo as zoo_mod

    key = json.dumps(
        [desk_config.profile, desk_config.dataset, desk_config.zoo_train, zoo_mod.ARCH_DEFAULTS, peas.__version__], sort_keys=True
    )
    path = Path(request.config.cache.mkdir(f"desk-zoo-{hashlib.sha256(key.encode()).hexdigest()[:12]}"))
    if not (path / "manifest.json").exists():
        zoo = train_zoo(desk_config.profile_obj, desk_data, ZooTrainConfig(**desk_config.zoo_train))
        save_zoo(zoo, path)
    return path


@pytest.fixture(scope="session")
def desk_zoo(desk_zoo_dir):
    return load_zoo(desk_zoo_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
