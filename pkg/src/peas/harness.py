"""Experiment orchestration: victim-correct pools, every role pair, baselines, ablations and sweeps.

The expensive part of every experiment is attacking candidates on each
surrogate. :class:`Experiment` does that once per (sampling function, epsilon,
base attack) and caches, for every pool sample, surrogate and zoo model, the
true-class probability and the fooled flag of each candidate. Selection for a
role pair and strategy then only re-reads the cache, which is what makes the
full 20-pair protocol affordable on a CPU.

All randomness derives from (master seed, sample id, stage tag), never from
scheduling, so ``workers`` changes wall time only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .attacks import EPSILON_DEFAULTS, TIMI_KERNEL_DEFAULTS, AttackSpec, QueryOracle, attack_batch, attack_simba
from .augment import AUGMENTATIONS, SamplingFunction, perceptual_distance
from .core import STRATEGIES, UNATTACKED, et_from_probs, peas_attack, peas_candidate_dump, select_candidate
from .data import DatasetProfile, SyntheticSpec, generate_synthetic_dataset, load_dataset
from .nn import DTYPE, as_arrays
from .zoo import ModelZoo, ZooTrainConfig, enumerate_roles, load_zoo, save_zoo, train_zoo

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "dataset",
    "victim",
    "surrogate",
    "strategy",
    "sampling",
    "attack",
    "epsilon",
    "n",
    "asr",
    "ci_low",
    "ci_high",
    "pool_size",
    "seed",
)
REPORT_VERSION = 1

# stage tags mixed into per-sample seeds
_TAG_SAMPLING = {"S1": 1, "S2": 2, "noise": 3}
_TAG_SELECT = 101
_TAG_POOL = 7
_TAG_BOOT = 13


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    profile: dict = field(default_factory=lambda: {"name": "synth64", "shape": [3, 64, 64], "num_classes": 10, "preset": "low-res"})
    # {"synthetic": {...SyntheticSpec fields}} or {"path": ..., "format": ...}
    dataset: dict = field(default_factory=lambda: {"synthetic": {"per_class": 300, "test_per_class": 60, "seed": 0}})
    zoo_dir: str | None = None
    zoo_train: dict = field(default_factory=dict)
    models: list | None = None  # zoo ids to use; None means the whole zoo
    pool_size: int = 200
    epsilon: float | None = None  # None: profile default
    n: int = 50
    sampling: str = "S2"
    augmentations: list = field(default_factory=lambda: list(AUGMENTATIONS))
    base_attack: dict = field(default_factory=lambda: {"algorithm": "pgd", "steps": 10})
    strategies: list = field(default_factory=lambda: ["top1-adversarial"])
    baselines: list = field(default_factory=lambda: ["bta", "vanilla"])
    extra_attacks: list = field(default_factory=list)  # e.g. ["fgsm", "timi"]: run with and without PEAS
    query_attack: dict | None = None  # e.g. {"algorithm": "simba", "simba": {"max_queries": 1000}}
    query_pool_size: int = 100
    n_values: list = field(default_factory=lambda: [1, 5, 10, 25, 50])
    eps_values: list = field(default_factory=lambda: [1 / 255, 2 / 255, 4 / 255, 8 / 255])
    aug_n_values: list = field(default_factory=lambda: [1, 5, 10, 25])
    master_seed: int = 0
    bootstrap: int = 1000
    ci_level: float = 0.95
    candidate_dumps: bool = False
    output_dir: str = "runs"
    workers: int = 1

    # fields that never change results
    NON_SEMANTIC = ("output_dir", "workers", "zoo_dir")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def profile_obj(self) -> DatasetProfile:
        return DatasetProfile.from_dict(self.profile)

    @property
    def eps(self) -> float:
        return float(self.epsilon) if self.epsilon is not None else EPSILON_DEFAULTS[self.profile_obj.preset]

    def base_spec(self, epsilon=None, algorithm=None) -> AttackSpec:
        d = dict(self.base_attack)
        if algorithm is not None:
            d["algorithm"] = algorithm
        d["epsilon"] = self.eps if epsilon is None else epsilon
        if d.get("algorithm") == "timi" and "timi" not in d:
            d["timi"] = {"kernel_size": TIMI_KERNEL_DEFAULTS[self.profile_obj.preset]}
        return AttackSpec(**d)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self.NON_SEMANTIC}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"config field '{name}': {msg}")

        try:
            self.profile_obj
        except (KeyError, ValueError, TypeError) as exc:
            bad("profile", str(exc))
        if not isinstance(self.dataset, dict) or not ({"synthetic"} <= set(self.dataset) or {"path", "format"} <= set(self.dataset)):
            bad("dataset", "needs either a 'synthetic' block or 'path' and 'format'")
        if self.models is not None and (len(self.models) < 3 or len(set(self.models)) != len(self.models)):
            bad("models", "needs at least 3 distinct model ids")
        if not isinstance(self.pool_size, int) or self.pool_size < 0:
            bad("pool_size", "must be a non-negative integer")
        if self.epsilon is not None and not 0 <= self.epsilon <= 1:
            bad("epsilon", "must lie in [0, 1]")
        if not isinstance(self.n, int) or self.n < 1:
            bad("n", "must be a positive integer")
        if self.sampling not in ("S1", "S2", "noise"):
            bad("sampling", "must be S1, S2 or noise")
        unknown = set(self.augmentations) - set(AUGMENTATIONS)
        if unknown or not self.augmentations:
            bad("augmentations", f"must be a non-empty subset of {list(AUGMENTATIONS)}")
        try:
            spec = self.base_spec()
        except (TypeError, ValueError) as exc:
            bad("base_attack", str(exc))
        if spec.algorithm not in ("pgd", "fgsm", "timi", "external"):
            bad("base_attack", "must be a surrogate attack (pgd, fgsm, timi or external)")
        for s in self.strategies:
            if s not in STRATEGIES:
                bad("strategies", f"unknown strategy {s!r}; expected one of {list(STRATEGIES)}")
        for b in self.baselines:
            if b not in ("bta", "vanilla"):
                bad("baselines", f"unknown baseline {b!r}")
        for a in self.extra_attacks:
            if a not in ("fgsm", "timi", "pgd"):
                bad("extra_attacks", f"unknown attack {a!r}")
        if self.query_attack is not None:
            try:
                q = AttackSpec(**{"epsilon": self.eps, **self.query_attack})
            except (TypeError, ValueError) as exc:
                bad("query_attack", str(exc))
            if q.algorithm != "simba":
                bad("query_attack", "only simba is supported")
        for name in ("n_values", "eps_values", "aug_n_values"):
            vals = getattr(self, name)
            if not vals:
                bad(name, "sweep grid must be non-empty")
        if any(not isinstance(v, int) or v < 1 for v in self.n_values + self.aug_n_values):
            bad("n_values", "entries must be positive integers")
        if any(not 0 <= e <= 1 for e in self.eps_values):
            bad("eps_values", "entries must lie in [0, 1]")
        if self.bootstrap < 0:
            bad("bootstrap", "must be >= 0")
        if not 0 < self.ci_level < 1:
            bad("ci_level", "must lie in (0, 1)")
        if self.workers < 1:
            bad("workers", "must be >= 1")


def load_experiment_data(config: ExperimentConfig):
    """``(train, test)`` for the config's dataset block."""
    ds = config.dataset
    profile = config.profile_obj
    if "synthetic" in ds:
        spec = dict(ds["synthetic"])
        spec.setdefault("num_classes", profile.num_classes)
        spec.setdefault("shape", tuple(profile.shape))
        return generate_synthetic_dataset(SyntheticSpec(**spec))
    return load_dataset(ds["path"], ds["format"])


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def asr(victim, adversarials) -> float:
    """Fraction of ``(x*, y)`` pairs the victim misclassifies."""
    adversarials = list(adversarials)
    if not adversarials:
        return 0.0
    x = np.stack([np.asarray(a, dtype=DTYPE) for a, _ in adversarials])
    y = np.array([int(lbl) for _, lbl in adversarials])
    return float(np.mean(victim.predict(x) != y))


def build_pool_ids(victim, test_data, size: int, seed: int) -> list[int]:
    """Indices into ``test_data`` of ``size`` victim-correct samples, in seeded order."""
    if size == 0:
        return []
    x, y = as_arrays(test_data)
    correct = victim.predict(x) == y if len(y) else np.zeros(0, bool)
    order = np.random.default_rng(seed).permutation(len(y))
    picked = [int(i) for i in order if correct[i]][:size]
    if len(picked) < size:
        raise ValueError(f"only {int(correct.sum())} victim-correct samples available, pool needs {size}")
    return picked


def build_pool(victim, test_data, size: int, seed: int):
    test_data = list(test_data)
    return [test_data[i] for i in build_pool_ids(victim, test_data, size, seed)]


def bootstrap_ci(successes, resamples: int, level: float, seed: int):
    """Percentile bootstrap interval of the mean of a 0/1 vector."""
    s = np.asarray(successes, dtype=np.float64)
    if len(s) == 0 or resamples == 0:
        m = float(s.mean()) if len(s) else 0.0
        return m, m
    rng = np.random.default_rng(seed)
    means = s[rng.integers(0, len(s), size=(resamples, len(s)))].mean(axis=1)
    alpha = (1 - level) / 2
    return float(np.quantile(means, alpha)), float(np.quantile(means, 1 - alpha))


@dataclass
class CandidateScores:
    """Per-sample cache: ``sigma[m, i]`` / ``fooled[m, i]`` for zoo model ``m`` and candidate ``i``."""

    sigma: np.ndarray
    fooled: np.ndarray


class Experiment:
    """Loaded dataset, zoo, role pairs and pools for one config, with candidate caches."""

    def __init__(self, config: ExperimentConfig, zoo: ModelZoo | None = None, data=None):
        self.config = config
        self.profile = config.profile_obj
        self.train, self.test = data if data is not None else self._load_data()
        self.zoo = zoo if zoo is not None else self._load_zoo()
        if config.models is not None:
            missing = [m for m in config.models if m not in self.zoo.ids]
            if missing:
                raise ConfigError(f"config field 'models': {missing} not in zoo (have {self.zoo.ids})")
            self.ids = list(config.models)
        else:
            self.ids = self.zoo.ids
        self.roles = enumerate_roles(self.ids)
        self.test_x, self.test_y = as_arrays(self.test)
        self.pools = {
            f: build_pool_ids(self.zoo[f], self.test, config.pool_size, _seed(config.master_seed, _TAG_POOL))
            for f in self.ids
        }
        self.sample_ids = sorted({i for ids in self.pools.values() for i in ids})
        self._cache: dict = {}

    # -- setup -----------------------------------------------------------------

    def _load_data(self):
        return load_experiment_data(self.config)

    def _load_zoo(self):
        zdir = self.config.zoo_dir
        if zdir and (Path(zdir) / "manifest.json").exists():
            zoo = load_zoo(zdir)
        else:
            zoo = train_zoo(self.profile, (self.train, self.test), ZooTrainConfig(**self.config.zoo_train))
            if zdir:
                save_zoo(zoo, zdir)
        if tuple(zoo.profile.shape) != tuple(self.profile.shape):
            raise ConfigError(f"zoo was built for shape {zoo.profile.shape}, config profile has {self.profile.shape}")
        return zoo

    def _map(self, fn, items):
        if self.config.workers > 1:
            with ThreadPoolExecutor(self.config.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    def sampling_for(self, sample_id: int, mode: str, epsilon: float = 0.0, augmentations=None) -> SamplingFunction:
        augs = tuple(augmentations or self.config.augmentations)
        tag = _TAG_SAMPLING[mode]
        if mode != "noise":
            tag = tag * 1000 + sum(1 << AUGMENTATIONS.index(a) for a in augs)
        return SamplingFunction(mode, self.profile.preset, augs, epsilon, _seed(self.config.master_seed, sample_id, tag))

    def _reuse(self, key):
        # draws are indexed, so the first n candidates of a larger bank are the n-candidate bank
        bigger = [k for k in self._cache if k[:2] == key[:2] and k[3:] == key[3:] and k[2] >= key[2]]
        return min(bigger, key=lambda k: k[2]) if bigger else key

    def _score_all(self, x, y):
        sigma, fooled = [], []
        for m in self.ids:
            probs = self.zoo[m].probabilities(x)
            sigma.append(probs[:, y])
            fooled.append(probs.argmax(axis=1) != y)
        return CandidateScores(np.stack(sigma).astype(np.float64), np.stack(fooled))

    # -- candidate banks -----------------------------------------------------

    def _starts(self, sample_id, mode, n, epsilon, augmentations):
        x = self.test_x[sample_id]
        return self.sampling_for(sample_id, mode, epsilon, augmentations).draw_many(x, n)

    def augmented_bank(self, mode: str, n: int, epsilon: float = 0.0, augmentations=None):
        """Scores of the un-attacked starts, keyed by sample id."""
        key = ("aug", mode, n, epsilon if mode == "noise" else None, tuple(augmentations or self.config.augmentations))
        key = self._reuse(key)
        if key not in self._cache:
            def work(sid):
                return sid, self._score_all(self._starts(sid, mode, n, epsilon, augmentations), int(self.test_y[sid]))

            self._cache[key] = dict(self._map(work, self.sample_ids))
        return self._cache[key]

    def adversarial_bank(self, mode: str, n: int, spec: AttackSpec, augmentations=None):
        """Scores of attacked candidates: ``bank[surrogate][sample_id]``."""
        noise_eps = spec.epsilon if mode == "noise" else 0.0
        key = ("adv", mode, n, json.dumps(spec.to_dict(), sort_keys=True), tuple(augmentations or self.config.augmentations))
        key = self._reuse(key)
        if key not in self._cache:
            def work(sid):
                y = int(self.test_y[sid])
                starts = self._starts(sid, mode, n, noise_eps, augmentations)
                out = {}
                for s in self.ids:
                    adv = attack_batch(spec, self.zoo[s], starts, y)
                    out[s] = self._score_all(adv, y)
                return sid, out

            t0 = time.time()
            results = dict(self._map(work, self.sample_ids))
            log.info("attacked %s candidates (%s, n=%d, eps=%.4f) in %.1fs", mode, spec.algorithm, n, spec.epsilon, time.time() - t0)
            self._cache[key] = {s: {sid: results[sid][s] for sid in self.sample_ids} for s in self.ids}
        return self._cache[key]

    def direct_bank(self, spec: AttackSpec):
        """Scores of the plain attack from ``x`` itself (no exploration): ``bank[surrogate][sample_id]``."""
        key = ("direct", json.dumps(spec.to_dict(), sort_keys=True))
        if key not in self._cache:
            ids = self.sample_ids
            x, y = self.test_x[ids], self.test_y[ids]
            bank = {}
            for s in self.ids:
                adv = np.concatenate([attack_batch(spec, self.zoo[s], x[i : i + 64], y[i : i + 64]) for i in range(0, len(ids), 64)]) if ids else x
                scores = {}
                for m in self.ids:
                    probs = self.zoo[m].probabilities(adv)
                    scores[m] = (probs[np.arange(len(ids)), y], probs.argmax(axis=1) != y)
                bank[s] = {
                    sid: CandidateScores(
                        np.array([[scores[m][0][k]] for m in self.ids], dtype=np.float64),
                        np.array([[scores[m][1][k]] for m in self.ids]),
                    )
                    for k, sid in enumerate(ids)
                }
            self._cache[key] = bank
        return self._cache[key]

    # -- selection -----------------------------------------------------------

    def pair_successes(self, role, strategy, adv_bank=None, aug_bank=None, n=None) -> np.ndarray:
        """0/1 success of ``strategy`` on every sample of the victim's pool, using the first ``n`` candidates."""
        vi = self.ids.index(role.victim)
        rank_idx = [self.ids.index(m) for m in role.ranking]
        pair_no = self.roles.index(role)
        out = []
        for sid in self.pools[role.victim]:
            adv = adv_bank[role.surrogate][sid] if adv_bank is not None else None
            aug = aug_bank[sid] if aug_bank is not None else None
            k = n or (adv.sigma.shape[1] if adv is not None else aug.sigma.shape[1])
            sel = select_candidate(
                strategy,
                et_adv=et_from_probs(adv.sigma[rank_idx, :k]) if adv is not None else None,
                et_aug=et_from_probs(aug.sigma[rank_idx, :k]) if aug is not None else None,
                fooled_adv=adv.fooled[vi, :k] if adv is not None else None,
                fooled_aug=aug.fooled[vi, :k] if aug is not None else None,
                rng=np.random.default_rng(_seed(self.config.master_seed, sid, pair_no, _TAG_SELECT)),
            )
            src = adv if sel.adversarial else aug
            out.append(bool(src.fooled[vi, sel.index]))
        return np.array(out, dtype=bool)

    def direct_successes(self, role, bank) -> np.ndarray:
        vi = self.ids.index(role.victim)
        return np.array([bool(bank[role.surrogate][sid].fooled[vi, 0]) for sid in self.pools[role.victim]], dtype=bool)

    # -- rows ----------------------------------------------------------------

    def row(self, role, strategy, sampling, attack, epsilon, n, successes, salt=0) -> dict:
        lo, hi = bootstrap_ci(
            successes, self.config.bootstrap, self.config.ci_level, _seed(self.config.master_seed, _TAG_BOOT, self.roles.index(role), salt)
        )
        return {
            "dataset": self.profile.name,
            "victim": role.victim,
            "surrogate": role.surrogate,
            "strategy": strategy,
            "sampling": sampling,
            "attack": attack,
            "epsilon": float(epsilon),
            "n": int(n),
            "asr": float(np.mean(successes)) if len(successes) else 0.0,
            "ci_low": lo,
            "ci_high": hi,
            "pool_size": int(len(successes)),
            "seed": int(self.config.master_seed),
        }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    rows: dict = field(default_factory=dict)  # experiment kind -> list of CSV rows
    aggregates: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _group_key(row):
    return (row["strategy"], row["sampling"], row["attack"], row["epsilon"], row["n"])


def aggregate_rows(rows) -> list[dict]:
    """Macro (mean over pairs) and micro (pooled over samples) ASR per configuration."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(_group_key(r), []).append(r)
    out = []
    for (strategy, sampling, attack, eps, n), rs in groups.items():
        total = sum(r["pool_size"] for r in rs)
        out.append(
            {
                "strategy": strategy,
                "sampling": sampling,
                "attack": attack,
                "epsilon": eps,
                "n": n,
                "pairs": len(rs),
                "macro_asr": float(np.mean([r["asr"] for r in rs])),
                "micro_asr": float(sum(r["asr"] * r["pool_size"] for r in rs) / total) if total else 0.0,
            }
        )
    return out


def macro_asr(rows, **match) -> float:
    sel = [r["asr"] for r in rows if all(r[k] == v for k, v in match.items())]
    if not sel:
        raise KeyError(f"no rows match {match}")
    return float(np.mean(sel))


def write_report(report: ExperimentReport, directory) -> Path:
    """Write ``<kind>.csv`` per experiment kind and ``report.json`` with everything."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, rows in report.rows.items():
        with open(directory / f"{kind}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for r in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    payload = {"format_version": REPORT_VERSION, **report.to_dict()}
    (directory / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return directory


def load_report(directory) -> ExperimentReport:
    payload = json.loads((Path(directory) / "report.json").read_text())
    if payload.pop("format_version", None) != REPORT_VERSION:
        raise ValueError(f"{directory}: unsupported report version")
    return ExperimentReport(**payload)


def read_csv_rows(path) -> list[dict]:
    ints = {"n", "pool_size", "seed"}
    floats = {"epsilon", "asr", "ci_low", "ci_high"}
    with open(path, newline="") as fh:
        return [
            {k: int(v) if k in ints else float(v) if k in floats else v for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def run_directory(config: ExperimentConfig) -> Path:
    """Fresh timestamped directory under ``output_dir``; earlier runs are never overwritten."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(config.output_dir) / f"{stamp}-{config.hash()[:8]}"
    path, k = base, 1
    while path.exists():
        path, k = Path(f"{base}-{k}"), k + 1
    return path


def _metadata(exp: Experiment, started: float, **extra) -> dict:
    return {
        "config": exp.config.to_dict(),
        "config_hash": exp.config.hash(),
        "master_seed": exp.config.master_seed,
        "zoo_accuracy": exp.zoo.accuracies(),
        "pool_sizes": {f: len(p) for f, p in exp.pools.items()},
        "wall_time_s": round(time.time() - started, 3),
        **extra,
    }


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _sampling_label(mode, augs=None):
    if augs and set(augs) != set(AUGMENTATIONS):
        return f"{mode}[{'+'.join(augs)}]"
    return mode


def pairwise_rows(exp: Experiment, n=None, epsilon=None) -> list[dict]:
    cfg = exp.config
    n = n or cfg.n
    eps = cfg.eps if epsilon is None else epsilon
    spec = cfg.base_spec(eps)
    rows = []
    if "bta" in cfg.baselines:
        bank = exp.direct_bank(spec)
        rows += [exp.row(r, "none", "none", spec.algorithm, eps, 1, exp.direct_successes(r, bank), 1) for r in exp.roles]
    if "vanilla" in cfg.baselines:
        vbank = exp.adversarial_bank("noise", n, spec)
        vaug = exp.augmented_bank("noise", n, eps)
        rows += [
            exp.row(r, "top1-adversarial", "noise", spec.algorithm, eps, n, exp.pair_successes(r, "top1-adversarial", vbank, vaug, n), 2)
            for r in exp.roles
        ]
    label = _sampling_label(cfg.sampling, cfg.augmentations)
    aug_bank = exp.augmented_bank(cfg.sampling, n, eps if cfg.sampling == "noise" else 0.0)
    need_adv = any(s not in UNATTACKED for s in cfg.strategies)
    adv_bank = exp.adversarial_bank(cfg.sampling, n, spec) if need_adv else None
    for salt, strategy in enumerate(cfg.strategies):
        for r in exp.roles:
            rows.append(exp.row(r, strategy, label, spec.algorithm, eps, n, exp.pair_successes(r, strategy, adv_bank, aug_bank, n), 10 + salt))
    for alg in cfg.extra_attacks:
        xspec = cfg.base_spec(eps, algorithm=alg)
        dbank = exp.direct_bank(xspec)
        pbank = exp.adversarial_bank(cfg.sampling, n, xspec)
        for r in exp.roles:
            rows.append(exp.row(r, "none", "none", alg, eps, 1, exp.direct_successes(r, dbank), 30))
            rows.append(exp.row(r, "top1-adversarial", label, alg, eps, n, exp.pair_successes(r, "top1-adversarial", pbank, aug_bank, n), 31))
    return rows


def run_attack_only(config: ExperimentConfig, exp: Experiment | None = None) -> ExperimentReport:
    """The configured base attack from ``x`` itself (no exploration), transferred on every role pair."""
    started = time.time()
    exp = exp or Experiment(config)
    spec = config.base_spec()
    bank = exp.direct_bank(spec)
    rows = [exp.row(r, "none", "none", spec.algorithm, spec.epsilon, 1, exp.direct_successes(r, bank), 1) for r in exp.roles]
    report = ExperimentReport(rows={"attack": rows}, aggregates={"attack": aggregate_rows(rows)})
    report.metadata = _metadata(exp, started, experiment="attack")
    return report


def query_comparison(exp: Experiment, spec: AttackSpec | None = None, size: int | None = None, n: int | None = None) -> dict:
    """Paired query attacks from ``x`` and from the PEAS output ``x*`` on the same samples.

    Sample ``k`` uses role pair ``k mod |pairs|``. Returns per-sample records
    plus success rates and median queries (over successful runs) per arm.
    """
    cfg = exp.config
    spec = spec or AttackSpec(**{"epsilon": cfg.eps, **(cfg.query_attack or {"algorithm": "simba"})})
    size = cfg.query_pool_size if size is None else size
    n = n or cfg.n
    base = cfg.base_spec(spec.epsilon)
    records = []
    for k in range(size):
        role = exp.roles[k % len(exp.roles)]
        pool = exp.pools[role.victim]
        sid = pool[(k // len(exp.roles)) % len(pool)] if pool else None
        if sid is None:
            break
        x, y = exp.test_x[sid], int(exp.test_y[sid])
        qspec = AttackSpec(**{**spec.to_dict(), "seed": _seed(cfg.master_seed, sid, 77)})
        plain = attack_simba(QueryOracle(exp.zoo[role.victim]), x, y, qspec)
        sampling = exp.sampling_for(sid, cfg.sampling)
        ranking = {m: exp.zoo[m] for m in role.ranking}
        x_star, _ = peas_attack(x, y, exp.zoo[role.surrogate], ranking, sampling, base, n)
        boosted = attack_simba(QueryOracle(exp.zoo[role.victim]), x_star, y, qspec)
        records.append(
            {
                "victim": role.victim,
                "surrogate": role.surrogate,
                "sample": sid,
                "plain_success": plain.success_on_source,
                "plain_queries": plain.queries_used,
                "peas_success": boosted.success_on_source,
                "peas_queries": boosted.queries_used,
            }
        )

    def summary(prefix):
        ok = [r[f"{prefix}_queries"] for r in records if r[f"{prefix}_success"]]
        return {
            "success_rate": float(np.mean([r[f"{prefix}_success"] for r in records])) if records else 0.0,
            "median_queries": float(np.median(ok)) if ok else None,
            "median_queries_all": float(np.median([r[f"{prefix}_queries"] for r in records])) if records else None,
        }

    return {"epsilon": spec.epsilon, "max_queries": spec.simba.max_queries, "n": n, "plain": summary("plain"), "peas": summary("peas"), "records": records}


def _dumps(exp: Experiment, limit: int = 5) -> list:
    """Full candidate dumps for the first few samples of the first role pair."""
    cfg = exp.config
    role = exp.roles[0]
    out = []
    for sid in exp.pools[role.victim][:limit]:
        x, y = exp.test_x[sid], int(exp.test_y[sid])
        res = peas_attack(
            x, y, exp.zoo[role.surrogate], {m: exp.zoo[m] for m in role.ranking}, exp.sampling_for(sid, cfg.sampling),
            cfg.base_spec(), cfg.n, victim=exp.zoo[role.victim],
        )  # fmt: skip
        out.append({"victim": role.victim, "surrogate": role.surrogate, "sample": sid, **peas_candidate_dump(res)})
    return out


def run_pairwise(config: ExperimentConfig, exp: Experiment | None = None) -> ExperimentReport:
    """Baselines and every configured strategy on all role pairs."""
    started = time.time()
    exp = exp or Experiment(config)
    rows = pairwise_rows(exp)
    report = ExperimentReport(rows={"pairwise": rows}, aggregates={"pairwise": aggregate_rows(rows)})
    if config.query_attack is not None:
        report.extras["query"] = query_comparison(exp)
    if config.candidate_dumps:
        report.extras["candidates"] = _dumps(exp)
    report.metadata = _metadata(exp, started, experiment="pairwise")
    return report


def sweep_n(config: ExperimentConfig, n_values=None, exp: Experiment | None = None, strategies=None, vanilla=True) -> ExperimentReport:
    """ASR against exploration size for PEAS and Vanilla ranking.

    Candidates are generated once at ``max(n_values)``; the value at ``n`` uses
    the first ``n`` of them.
    """
    started = time.time()
    exp = exp or Experiment(config)
    n_values = sorted(n_values or config.n_values)
    n_max = max(n_values)
    eps = config.eps
    spec = config.base_spec(eps)
    strategies = strategies or ["top1-adversarial"]
    label = _sampling_label(config.sampling, config.augmentations)
    adv = exp.adversarial_bank(config.sampling, n_max, spec)
    aug = exp.augmented_bank(config.sampling, n_max)
    if vanilla:
        vadv = exp.adversarial_bank("noise", n_max, spec)
        vaug = exp.augmented_bank("noise", n_max, eps)
    rows = []
    for n in n_values:
        for salt, strategy in enumerate(strategies):
            rows += [exp.row(r, strategy, label, spec.algorithm, eps, n, exp.pair_successes(r, strategy, adv, aug, n), 40 + salt) for r in exp.roles]
        if vanilla:
            rows += [exp.row(r, "top1-adversarial", "noise", spec.algorithm, eps, n, exp.pair_successes(r, "top1-adversarial", vadv, vaug, n), 60) for r in exp.roles]
    curves = {}
    for a in aggregate_rows(rows):
        curves.setdefault(f"{a['strategy']}|{a['sampling']}", {})[str(a["n"])] = a["macro_asr"]
    report = ExperimentReport(rows={"sweep_n": rows}, aggregates={"sweep_n": aggregate_rows(rows)}, curves={"sweep_n": curves})
    report.metadata = _metadata(exp, started, experiment="sweep_n", prefix_reuse=True, n_max=n_max)
    return report


def sweep_epsilon(config: ExperimentConfig, eps_values=None, exp: Experiment | None = None) -> ExperimentReport:
    """PEAS ASR against the epsilon budget, per victim averaged over surrogates."""
    started = time.time()
    exp = exp or Experiment(config)
    eps_values = sorted(eps_values or config.eps_values)
    label = _sampling_label(config.sampling, config.augmentations)
    aug = exp.augmented_bank(config.sampling, config.n)
    rows = []
    for eps in eps_values:
        spec = config.base_spec(eps)
        adv = exp.adversarial_bank(config.sampling, config.n, spec)
        rows += [exp.row(r, "top1-adversarial", label, spec.algorithm, eps, config.n, exp.pair_successes(r, "top1-adversarial", adv, aug, config.n), 70) for r in exp.roles]
    per_victim = {}
    for f in exp.ids:
        per_victim[f] = {repr(e): float(np.mean([r["asr"] for r in rows if r["victim"] == f and r["epsilon"] == e])) for e in eps_values}
    macro = {repr(e): float(np.mean([r["asr"] for r in rows if r["epsilon"] == e])) for e in eps_values}
    report = ExperimentReport(
        rows={"sweep_eps": rows}, aggregates={"sweep_eps": aggregate_rows(rows)}, curves={"sweep_eps": {"per_victim": per_victim, "macro": macro}}
    )
    report.metadata = _metadata(exp, started, experiment="sweep_eps")
    return report


def augmentation_effectiveness(config: ExperimentConfig, exp: Experiment | None = None, augmentations=None) -> ExperimentReport:
    """PEAS with the augmentation set restricted to one augmentation at a time (S1 over a singleton)."""
    started = time.time()
    exp = exp or Experiment(config)
    n_values = sorted(config.aug_n_values)
    n_max = max(n_values)
    spec = config.base_spec()
    rows, curves = [], {}
    for k, name in enumerate(augmentations or AUGMENTATIONS):
        adv = exp.adversarial_bank("S1", n_max, spec, augmentations=(name,))
        aug = exp.augmented_bank("S1", n_max, augmentations=(name,))
        label = _sampling_label("S1", (name,))
        for n in n_values:
            rows += [exp.row(r, "top1-adversarial", label, spec.algorithm, spec.epsilon, n, exp.pair_successes(r, "top1-adversarial", adv, aug, n), 80 + k) for r in exp.roles]
    for a in aggregate_rows(rows):
        curves.setdefault(a["sampling"], {})[str(a["n"])] = a["macro_asr"]
    report = ExperimentReport(rows={"sweep_aug": rows}, aggregates={"sweep_aug": aggregate_rows(rows)}, curves={"sweep_aug": curves})
    report.metadata = _metadata(exp, started, experiment="sweep_aug", prefix_reuse=True)
    return report


def perceptual_summary(exp: Experiment, mode: str | None = None, n: int | None = None) -> dict:
    """Mean L2/L-inf distance of samples from their source and per-victim label preservation."""
    mode = mode or exp.config.sampling
    n = n or exp.config.n
    bank = exp.augmented_bank(mode, n)
    l2, linf = [], []
    for sid in exp.sample_ids:
        x = exp.test_x[sid]
        for s in exp.sampling_for(sid, mode).draw_many(x, n):
            d = perceptual_distance(s, x)
            l2.append(d.l2)
            linf.append(d.linf)
    preserved = {}
    for f in exp.ids:
        vi = exp.ids.index(f)
        preserved[f] = float(np.mean([~bank[sid].fooled[vi] for sid in exp.pools[f]])) if exp.pools[f] else 0.0
    return {
        "sampling": mode,
        "mean_l2": float(np.mean(l2)) if l2 else 0.0,
        "mean_linf": float(np.mean(linf)) if linf else 0.0,
        "label_preservation": preserved,
        "mean_label_preservation": float(np.mean(list(preserved.values()))) if preserved else 0.0,
    }
