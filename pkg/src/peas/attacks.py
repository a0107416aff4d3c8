"""Base adversarial attacks behind one interface.

The gradient attacks (``fgsm``, ``pgd``, ``timi``) work on a surrogate network
and are batched: every function named ``*_batch`` takes an ``(N, C, H, W)``
stack of start points. ``simba`` only sees a victim through a
:class:`QueryOracle`. ``external`` hands the job to another program through a
small file protocol so attacks implemented elsewhere can be plugged in.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import read_raw_tensor, write_raw_tensor
from .nn import DTYPE, Network, ShapeError, softmax

ALGORITHMS = ("fgsm", "pgd", "timi", "simba", "external")
GRADIENT_ALGORITHMS = ("fgsm", "pgd", "timi")
BUDGET_TOL = 1e-6

EPSILON_DEFAULTS = {"low-res": 2 / 255, "high-res": 12.75 / 255}
TIMI_KERNEL_DEFAULTS = {"low-res": 3, "high-res": 5}


class AttackError(RuntimeError):
    pass


@dataclass
class TimiParams:
    kernel_size: int = 3
    diversity_prob: float = 0.5
    momentum: float = 1.0
    resize_min: float = 0.9


@dataclass
class SimbaParams:
    max_queries: int = 1000
    step: float | None = None  # defaults to epsilon


@dataclass
class AttackSpec:
    algorithm: str = "pgd"
    epsilon: float = 2 / 255
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 4 (epsilon for fgsm)
    timi: TimiParams = field(default_factory=TimiParams)
    simba: SimbaParams = field(default_factory=SimbaParams)
    seed: int = 0
    external_command: str | None = None

    def __post_init__(self):
        if isinstance(self.timi, dict):
            self.timi = TimiParams(**self.timi)
        if isinstance(self.simba, dict):
            self.simba = SimbaParams(**self.simba)
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown attack {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.algorithm in ("pgd", "timi") and self.steps < 1:
            raise ValueError("iterative attacks need steps >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.algorithm == "external" and not self.external_command:
            raise ValueError("external attacks need external_command")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon if self.algorithm == "fgsm" else self.epsilon / 4

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    queries_used: int = 0
    success_on_source: bool = False


def project(x, start, epsilon):
    """Project onto the L-inf ball around ``start`` intersected with [0, 1]."""
    eps = DTYPE(epsilon)
    return np.clip(np.clip(x, start - eps, start + eps), 0.0, 1.0).astype(DTYPE)


def _fooled(net, x, y):
    return net.predict(x) != np.asarray(y)


# ---------------------------------------------------------------------------
# gradient attacks
# ---------------------------------------------------------------------------


def pgd_batch(net: Network, starts, y, epsilon, steps=10, step_size=None):
    """Sign-gradient ascent on cross-entropy, projected after every step. No random start."""
    starts = np.asarray(starts, dtype=DTYPE)
    y = np.broadcast_to(np.asarray(y), (len(starts),))
    alpha = DTYPE(epsilon / 4 if step_size is None else step_size)
    x = starts.copy()
    if epsilon == 0:
        return x
    for _ in range(steps):
        _, g = net.loss_and_input_grad(x, y)
        x = project(x + alpha * np.sign(g), starts, epsilon)
    return x


def fgsm_batch(net: Network, starts, y, epsilon):
    return pgd_batch(net, starts, y, epsilon, steps=1, step_size=epsilon)


def ti_kernel(kernel_size: int) -> np.ndarray:
    """Normalized 2-D Gaussian spanning +/-3 standard deviations."""
    if kernel_size == 1:
        return np.ones((1, 1))
    t = np.linspace(-3, 3, kernel_size)
    k1 = np.exp(-(t**2) / 2)
    k = np.outer(k1, k1)
    return k / k.sum()


def _smooth_grad(g, kernel):
    k = kernel.shape[0]
    if k == 1:
        return g
    r = k // 2
    gp = np.pad(g, ((0, 0), (0, 0), (r, r), (r, r)))
    h, w = g.shape[2:]
    out = np.zeros_like(g)
    for i in range(k):
        for j in range(k):
            out += DTYPE(kernel[i, j]) * gp[:, :, i : i + h, j : j + w]
    return out


def _diversity_indices(h, w, rng, resize_min):
    """Nearest-neighbour shrink to ``r x r`` and zero-pad back at a random offset."""
    rh = int(rng.integers(max(1, int(np.floor(h * resize_min))), h + 1))
    rw = int(round(rh * w / h))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    src_y = np.minimum((np.arange(rh) * h / rh).astype(int), h - 1)
    src_x = np.minimum((np.arange(rw) * w / rw).astype(int), w - 1)
    return top, left, src_y, src_x


def _diverse_grad(net, x, y, rng, resize_min):
    n, c, h, w = x.shape
    top, left, sy, sx = _diversity_indices(h, w, rng, resize_min)
    xt = np.zeros_like(x)
    xt[:, :, top : top + len(sy), left : left + len(sx)] = x[:, :, sy[:, None], sx[None, :]]
    _, gt = net.loss_and_input_grad(xt, y)
    g = np.zeros_like(x)
    region = gt[:, :, top : top + len(sy), left : left + len(sx)]
    np.add.at(g, (slice(None), slice(None), sy[:, None], sx[None, :]), region)
    return g


def timi_batch(net: Network, starts, y, epsilon, steps=10, step_size=None, params: TimiParams | None = None, seed=0):
    """Momentum iterative FGSM with input diversity and a Gaussian-smoothed gradient."""
    params = params or TimiParams()
    starts = np.asarray(starts, dtype=DTYPE)
    y = np.broadcast_to(np.asarray(y), (len(starts),))
    alpha = DTYPE(epsilon / 4 if step_size is None else step_size)
    x = starts.copy()
    if epsilon == 0:
        return x
    rng = np.random.default_rng(seed)
    kernel = ti_kernel(params.kernel_size)
    momentum = np.zeros_like(x)
    for _ in range(steps):
        if params.diversity_prob > 0 and rng.random() < params.diversity_prob:
            g = _diverse_grad(net, x, y, rng, params.resize_min)
        else:
            _, g = net.loss_and_input_grad(x, y)
        g = _smooth_grad(g, kernel)
        l1 = np.abs(g).sum(axis=(1, 2, 3), keepdims=True)
        momentum = DTYPE(params.momentum) * momentum + g / np.maximum(l1, np.finfo(DTYPE).tiny)
        x = project(x + alpha * np.sign(momentum), starts, epsilon)
    return x


def attack_batch(spec: AttackSpec, net: Network, starts, y):
    """Run a gradient attack on a stack of start points."""
    if spec.algorithm == "pgd":
        return pgd_batch(net, starts, y, spec.epsilon, spec.steps, spec.alpha)
    if spec.algorithm == "fgsm":
        return pgd_batch(net, starts, y, spec.epsilon, 1, spec.alpha)
    if spec.algorithm == "timi":
        return timi_batch(net, starts, y, spec.epsilon, spec.steps, spec.alpha, spec.timi, spec.seed)
    if spec.algorithm == "external":
        return np.stack([attack_external(spec, s, int(yy)).adversarial for s, yy in zip(starts, np.broadcast_to(y, (len(starts),)))])
    raise AttackError(f"{spec.algorithm} is not a surrogate-gradient attack")


def _check_start(net, start):
    start = np.asarray(start, dtype=DTYPE)
    if start.shape != net.input_shape:
        raise ShapeError(f"network {net.arch!r} expects an input of shape {net.input_shape}, got {start.shape}")
    return start


def _single(spec, expected, f_prime, start, y):
    if spec.algorithm != expected:
        raise AttackError(f"spec.algorithm is {spec.algorithm!r}, expected {expected!r}")
    start = _check_start(f_prime, start)
    adv = attack_batch(spec, f_prime, start[None], np.array([y]))[0]
    return AttackResult(adv, 0, bool(_fooled(f_prime, adv[None], [y])[0]))


def attack_pgd(f_prime: Network, start, y: int, spec: AttackSpec) -> AttackResult:
    return _single(spec, "pgd", f_prime, start, y)


def attack_fgsm(f_prime: Network, start, y: int, spec: AttackSpec) -> AttackResult:
    return _single(spec, "fgsm", f_prime, start, y)


def attack_timi(f_prime: Network, start, y: int, spec: AttackSpec) -> AttackResult:
    return _single(spec, "timi", f_prime, start, y)


# ---------------------------------------------------------------------------
# query attack
# ---------------------------------------------------------------------------


class QueryOracle:
    """Query-only view of a victim: softmax probabilities and a query counter."""

    def __init__(self, net: Network):
        self._net = net
        self._lock = threading.Lock()
        self.queries = 0

    @property
    def input_shape(self):
        return self._net.input_shape

    def probabilities(self, x) -> np.ndarray:
        with self._lock:
            self.queries += 1
        return softmax(self._net.logits(np.asarray(x, dtype=DTYPE)[None])[0])


def attack_simba(oracle: QueryOracle, start, y: int, spec: AttackSpec) -> AttackResult:
    """SimBA over the pixel basis.

    Every probability evaluation counts as one query; the first one (at the
    start point) doubles as the success check.
    """
    start = np.asarray(start, dtype=DTYPE)
    budget = spec.simba.max_queries
    used = 0
    if budget <= 0:
        return AttackResult(start.copy(), 0, False)
    step = DTYPE(spec.epsilon if spec.simba.step is None else spec.simba.step)
    eps = DTYPE(spec.epsilon)
    lo, hi = np.maximum(start - eps, 0.0), np.minimum(start + eps, 1.0)

    x = start.copy()
    probs = oracle.probabilities(x)
    used += 1
    best = probs[y]
    if probs.argmax() != y:
        return AttackResult(x, used, True)
    if eps == 0:
        return AttackResult(x, used, False)

    rng = np.random.default_rng(spec.seed)
    flat = x.reshape(-1)
    for idx in rng.permutation(flat.size):
        old = flat[idx]
        for sign in (-1, 1):
            if used >= budget:
                return AttackResult(x, used, False)
            cand = np.clip(old + sign * step, lo.flat[idx], hi.flat[idx])
            if cand == old:
                continue
            flat[idx] = cand
            probs = oracle.probabilities(x)
            used += 1
            if probs[y] < best:
                best = probs[y]
                if probs.argmax() != y:
                    return AttackResult(x, used, True)
                break
            flat[idx] = old
    return AttackResult(x, used, False)


# ---------------------------------------------------------------------------
# external attacks
# ---------------------------------------------------------------------------
#
# <workdir>/start.pimg      start image + label (raw tensor format)
# <workdir>/spec.json       {"algorithm", "epsilon", "steps", "step_size", "label", "seed", ...}
# command runs with {workdir} substituted (or the workdir appended as last argument)
# <workdir>/adversarial.pimg   result written by the command
# <workdir>/result.json        optional: {"queries_used": int}


def attack_external(spec: AttackSpec, start, y: int, workdir=None) -> AttackResult:
    start = np.asarray(start, dtype=DTYPE)
    with tempfile.TemporaryDirectory(prefix="peas-ext-") as tmp:
        work = Path(workdir or tmp)
        work.mkdir(parents=True, exist_ok=True)
        write_raw_tensor(work / "start.pimg", start, y)
        meta = spec.to_dict()
        meta["label"] = int(y)
        meta["step_size"] = spec.alpha
        (work / "spec.json").write_text(json.dumps(meta, indent=2))
        cmd = spec.external_command
        if "{workdir}" in cmd:
            argv = shlex.split(cmd.replace("{workdir}", shlex.quote(str(work))))
        else:
            argv = shlex.split(cmd) + [str(work)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise AttackError(f"external attack failed with exit code {proc.returncode}: {proc.stderr.strip()}")
        out_path = work / "adversarial.pimg"
        if not out_path.exists():
            raise AttackError(f"external attack did not write {out_path.name}")
        adv, _ = read_raw_tensor(out_path)
        queries = 0
        if (work / "result.json").exists():
            queries = int(json.loads((work / "result.json").read_text()).get("queries_used", 0))
    validate_budget(adv, start, spec.epsilon)
    return AttackResult(adv, queries, False)


def validate_budget(adv, start, epsilon, tol=BUDGET_TOL):
    adv = np.asarray(adv)
    if adv.shape != np.shape(start):
        raise AttackError(f"adversarial shape {adv.shape} does not match start {np.shape(start)}")
    if not np.all(np.isfinite(adv)) or adv.min() < 0 or adv.max() > 1:
        raise AttackError("adversarial image leaves [0, 1]")
    dist = float(np.abs(adv.astype(np.float64) - np.asarray(start, dtype=np.float64)).max()) if adv.size else 0.0
    if dist > epsilon + tol:
        raise AttackError(f"adversarial L-inf distance {dist:.6g} exceeds epsilon {epsilon:.6g}")


def run_attack(spec: AttackSpec, models: dict, start, y: int) -> AttackResult:
    """Dispatch on ``spec.algorithm``.

    ``models`` maps ``"surrogate"`` to a :class:`Network` (gradient attacks)
    and ``"victim"`` to a :class:`QueryOracle` (query attacks).
    """
    if spec.algorithm in GRADIENT_ALGORITHMS:
        return _single(spec, spec.algorithm, models["surrogate"], start, y)
    if spec.algorithm == "simba":
        return attack_simba(models["victim"], start, y, spec)
    return attack_external(spec, start, y)


def with_epsilon(spec: AttackSpec, epsilon: float) -> AttackSpec:
    return replace(spec, epsilon=epsilon)
