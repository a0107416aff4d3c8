"""Perceptual exploration attack.

For an input ``x`` the attack draws ``n`` perceptually equivalent variants,
runs a base attack on each against the surrogate, scores every result by its
expected transferability (ET) over a ranking set of other substitute models,
and keeps the best. The selection stage is factored out
(:func:`select_candidate`) so the experiment harness can re-run it on cached
candidate scores for every role pair and ablation strategy.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import PerceptualDistance, SamplingFunction, perceptual_distance
from .attacks import AttackResult, AttackSpec, QueryOracle, attack_batch, attack_external, attack_simba
from .nn import DTYPE, Network

STRATEGIES = (
    "top1-adversarial",
    "top1-augmented",
    "random-augmented",
    "random-adversarial",
    "oracle-perfect",
    "filtered-top1-adversarial",
    "filtered-top1-augmented",
)
# need direct access to the victim; only meaningful for analysis
ANALYSIS_ONLY = frozenset({"oracle-perfect", "filtered-top1-adversarial", "filtered-top1-augmented"})
# strategies that never run the base attack
UNATTACKED = frozenset({"top1-augmented", "random-augmented", "filtered-top1-augmented"})


@dataclass
class ETScore:
    value: float
    terms: list = field(default_factory=list)  # (model id, 1 - sigma_y)


@dataclass
class Candidate:
    index: int
    start: np.ndarray
    adversarial: np.ndarray | None
    et: ETScore
    distance: PerceptualDistance
    fools_victim_naturally: bool | None = None


def _as_ranking(ranking):
    if isinstance(ranking, dict):
        return list(ranking.items())
    if isinstance(ranking, Network):
        ranking = [ranking]
    return [(net.arch, net) for net in ranking]


def true_class_probs(net: Network, x, y, batch_size: int = 256) -> np.ndarray:
    """Softmax probability of class ``y`` for every image in the stack ``x``."""
    probs = net.probabilities(x, batch_size)
    return probs[np.arange(len(probs)), np.broadcast_to(y, (len(probs),))]


def et_from_probs(sigma_y) -> np.ndarray:
    """ET from true-class probabilities shaped ``(models, candidates)``."""
    sigma_y = np.asarray(sigma_y, dtype=np.float64)
    if sigma_y.ndim == 1:
        sigma_y = sigma_y[:, None]
    if sigma_y.shape[0] == 0:
        raise ValueError("ranking set is empty")
    return np.clip(1.0 - sigma_y, 0.0, 1.0).mean(axis=0)


def expected_transferability(x, y: int, ranking) -> ETScore:
    """Mean over the ranking models of ``1 - softmax(f(x))[y]``."""
    models = _as_ranking(ranking)
    if not models:
        raise ValueError("ranking set is empty")
    terms = [(mid, float(1.0 - true_class_probs(net, np.asarray(x)[None], y)[0])) for mid, net in models]
    terms = [(mid, min(max(t, 0.0), 1.0)) for mid, t in terms]
    return ETScore(float(np.mean([t for _, t in terms])), terms)


def et_batch(x, y: int, ranking):
    """ET of every image in ``x``; returns ``(values, terms)`` with terms shaped ``(models, N)``."""
    models = _as_ranking(ranking)
    if not models:
        raise ValueError("ranking set is empty")
    sigma = np.stack([true_class_probs(net, x, y) for _, net in models])
    return et_from_probs(sigma), 1.0 - sigma.astype(np.float64)


def rank_candidates(candidates):
    """Candidates sorted by descending ET; equal scores keep their original order."""
    return sorted(candidates, key=lambda c: -c.et.value)


@dataclass
class Selection:
    index: int
    adversarial: bool  # False when the un-attacked start is the output
    fallback: bool = False


def select_candidate(strategy, et_adv=None, et_aug=None, fooled_adv=None, fooled_aug=None, rng=None) -> Selection:
    """Pick one candidate according to ``strategy``.

    ``et_adv``/``et_aug`` are ET scores of the attacked/un-attacked candidates;
    ``fooled_adv``/``fooled_aug`` flag which of them the victim misclassifies
    (analysis-only strategies). Ties go to the lowest index.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    scores = et_aug if strategy in UNATTACKED else et_adv
    if strategy.startswith("random-"):
        n = len(et_aug if strategy == "random-augmented" else et_adv) if scores is None else len(scores)
        rng = rng if rng is not None else np.random.default_rng(0)
        return Selection(int(rng.integers(n)), strategy == "random-adversarial")
    scores = np.asarray(scores, dtype=np.float64)
    adversarial = strategy not in UNATTACKED
    if strategy == "oracle-perfect":
        fooled = np.asarray(fooled_adv, dtype=bool)
        if fooled.any():
            masked = np.where(fooled, scores, -np.inf)
            return Selection(int(np.argmax(masked)), True)
        return Selection(int(np.argmax(scores)), True)
    if strategy.startswith("filtered-"):
        keep = ~np.asarray(fooled_aug, dtype=bool)
        if not keep.any():
            return Selection(int(np.argmax(scores)), adversarial, fallback=True)
        return Selection(int(np.argmax(np.where(keep, scores, -np.inf))), adversarial)
    return Selection(int(np.argmax(scores)), adversarial)


def attack_candidates(base: AttackSpec, surrogate: Network, starts, y: int, chunk: int = 64, workers: int = 1):
    """Base attack on every start; chunks are independent, so results do not depend on ``workers``."""
    starts = np.asarray(starts, dtype=DTYPE)
    chunks = [starts[i : i + chunk] for i in range(0, len(starts), chunk)]
    run = lambda c: attack_batch(base, surrogate, c, y)  # noqa: E731
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else starts.copy()


@dataclass
class PeasResult:
    x_star: np.ndarray
    candidates: list
    selection: Selection

    def __iter__(self):
        # allows ``x_star, candidates = peas_attack(...)``
        return iter((self.x_star, self.candidates))


def peas_attack(
    x,
    y: int,
    surrogate: Network,
    ranking,
    sampling: SamplingFunction,
    base: AttackSpec,
    n: int,
    strategy: str = "top1-adversarial",
    victim: Network | None = None,
    rng=None,
    workers: int = 1,
) -> PeasResult:
    """Explore ``n`` variants of ``x``, attack each on ``surrogate`` and keep the most transferable.

    ``victim`` is only consulted by the analysis-only strategies (and to fill
    :attr:`Candidate.fools_victim_naturally`).
    """
    if n < 1:
        raise ValueError("exploration size n must be >= 1")
    if strategy in ANALYSIS_ONLY and victim is None:
        raise ValueError(f"strategy {strategy!r} needs the victim model")
    x = np.asarray(x, dtype=DTYPE)
    first = sampling.counter
    starts = sampling.draw_many(x, n, start=first)
    sampling.counter = first + n

    need_attack = strategy not in UNATTACKED
    adversarials = attack_candidates(base, surrogate, starts, y, workers=workers) if need_attack else None
    scored = adversarials if need_attack else starts
    et_vals, terms = et_batch(scored, y, ranking)
    ids = [mid for mid, _ in _as_ranking(ranking)]

    fooled_aug = fooled_adv = None
    if victim is not None:
        fooled_aug = victim.predict(starts) != y
        if need_attack:
            fooled_adv = victim.predict(adversarials) != y

    if rng is None:
        rng = np.random.default_rng([sampling.seed, first, n])
    sel = select_candidate(
        strategy,
        et_adv=et_vals if need_attack else None,
        et_aug=et_vals if not need_attack else None,
        fooled_adv=fooled_adv,
        fooled_aug=fooled_aug,
        rng=rng,
    )

    candidates = [
        Candidate(
            index=i,
            start=starts[i],
            adversarial=adversarials[i] if need_attack else None,
            et=ETScore(float(et_vals[i]), [(mid, float(terms[m, i])) for m, mid in enumerate(ids)]),
            distance=perceptual_distance(scored[i], x),
            fools_victim_naturally=None if fooled_aug is None else bool(fooled_aug[i]),
        )
        for i in range(n)
    ]
    chosen = candidates[sel.index]
    x_star = chosen.adversarial if sel.adversarial else chosen.start
    return PeasResult(x_star, candidates, sel)


def peas_then_query(
    x,
    y: int,
    surrogate: Network,
    ranking,
    sampling: SamplingFunction,
    n: int,
    query_attack: AttackSpec,
    victim_oracle: QueryOracle,
    base: AttackSpec | None = None,
) -> AttackResult:
    """Run PEAS without touching the victim, then start the query attack from ``x*``.

    The query attack's first query at ``x*`` doubles as a success check, so an
    ``x*`` that already fools the victim costs exactly one query.
    """
    if query_attack.algorithm not in ("simba", "external"):
        raise ValueError(f"query attack must be simba or external, got {query_attack.algorithm!r}")
    base = base or AttackSpec("pgd", epsilon=query_attack.epsilon, seed=query_attack.seed)
    x_star, _ = peas_attack(x, y, surrogate, ranking, sampling, base, n)
    if query_attack.algorithm == "simba":
        return attack_simba(victim_oracle, x_star, y, query_attack)
    return attack_external(query_attack, x_star, y)


def peas_candidate_dump(result: PeasResult) -> dict:
    """JSON-ready summary of one PEAS run (indices, ET values, distances, selection)."""
    return {
        "selected": result.selection.index,
        "selected_adversarial": result.selection.adversarial,
        "fallback": result.selection.fallback,
        "candidates": [
            {
                "index": c.index,
                "et": c.et.value,
                "et_terms": dict(c.et.terms),
                "l2": c.distance.l2,
                "linf": c.distance.linf,
                "fools_victim_naturally": c.fools_victim_naturally,
            }
            for c in result.candidates
        ],
    }
