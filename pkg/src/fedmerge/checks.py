"""Self-contained sanity checks behind the `check` CLI subcommand.

Each check re-derives its expected answers from first principles
(finite differences, definitional formulas, a literal greedy re-walk)
so a broken build fails loudly without needing the test suite installed.
"""

from __future__ import annotations

import numpy as np

from . import mlp
from .datasets import generate_synthetic, partition_noniid
from .errors import ZeroVariance
from .merging import SimilarityMatrix, group_similar
from .vectors import pearson_corr


def _finite_diff_grad(spec, params, batch, eps=1e-5):
    grad = np.zeros_like(params)
    for k in range(params.shape[0]):
        bumped = params.copy()
        bumped[k] += eps
        hi, _ = mlp.loss_and_grad(spec, bumped, batch)
        bumped[k] -= 2 * eps
        lo, _ = mlp.loss_and_grad(spec, bumped, batch)
        grad[k] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(cases: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(cases):
        spec = mlp.ModelSpec(
            input_dim=int(rng.integers(2, 5)),
            hidden_dims=(int(rng.integers(2, 5)),),
            num_classes=int(rng.integers(2, 4)),
            activation=("relu", "tanh")[int(rng.integers(2))],
        )
        params = rng.standard_normal(mlp.param_count(spec)) * 0.5
        batch = mlp.Batch(
            inputs=rng.uniform(0, 1, size=(4, spec.input_dim)),
            labels=rng.integers(0, spec.num_classes, size=4).astype(np.int64),
        )
        _, analytic = mlp.loss_and_grad(spec, params, batch)
        numeric = _finite_diff_grad(spec, params, batch)
        denom = max(float(np.max(np.abs(numeric))), 1e-7)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / denom)
    ok = worst < 1e-4
    return ok, f"max relative gradient error {worst:.2e}"


def check_pearson(cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    for _ in range(cases):
        n = int(rng.integers(2, 30))
        a = rng.standard_normal(n)
        b = rng.standard_normal(n)
        r1, r2 = pearson_corr(a, b), pearson_corr(b, a)
        if r1 != r2 or not -1.0 <= r1 <= 1.0:
            return False, "symmetry or range violated"
        if abs(pearson_corr(a, 2.0 * a + 3.0) - 1.0) > 1e-9:
            return False, "affine invariance violated"
    try:
        pearson_corr(np.ones(5), rng.standard_normal(5))
    except ZeroVariance:
        return True, f"{cases} randomized cases clean"
    return False, "constant vector did not raise"


def _greedy_rewalk(r, threshold, cap):
    n = r.shape[0]
    used, groups, unmerged = set(), [], []
    for i in range(n):
        if i in used:
            continue
        g = [i]
        for j in range(n):
            if j != i and j not in used and j not in g and r[i][j] >= threshold:
                g.append(j)
                if len(g) == cap:
                    break
        if len(g) >= 2:
            groups.append(g)
            used.update(g)
        else:
            unmerged.append(i)
    for i in range(n):
        if i not in used and i not in unmerged:
            unmerged.append(i)
    return groups, unmerged


def check_grouping(cases: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    for _ in range(cases):
        n = int(rng.integers(2, 7))
        a = rng.uniform(-1, 1, size=(n, n))
        r = (a + a.T) / 2
        np.fill_diagonal(r, 1.0)
        threshold = float(rng.choice([0.3, 0.5, 0.7, 0.9]))
        cap = int(rng.choice([2, 3, 4]))
        plan = group_similar(SimilarityMatrix(n, r), threshold, cap)
        groups, unmerged = _greedy_rewalk(r, threshold, cap)
        if plan.groups != groups or plan.unmerged != unmerged:
            return False, f"plan mismatch at n={n} threshold={threshold} cap={cap}"
        if plan.covered() != list(range(n)):
            return False, "plan does not partition the nodes"
    return True, f"{cases} randomized matrices match the re-walk"


def check_partition(seeds: int = 10) -> tuple[bool, str]:
    data = generate_synthetic(600, 8, 10, seed=5)
    for seed in range(seeds):
        parts = partition_noniid(data, num_clients=10, classes_per_client=8, seed=seed)
        seen = np.concatenate(parts.client_indices)
        if len(seen) != len(set(seen.tolist())):
            return False, f"overlapping partitions at seed {seed}"
        if seen.min() < 0 or seen.max() >= 600:
            return False, f"out-of-range index at seed {seed}"
        for idx in parts.client_indices:
            present = np.unique(data.labels[idx])
            if len(present) > 8:
                return False, f"client saw {len(present)} classes at seed {seed}"
    return True, f"{seeds} seeds partition cleanly"


ALL_CHECKS = (
    ("gradients", check_gradients),
    ("pearson", check_pearson),
    ("grouping", check_grouping),
    ("partition", check_partition),
)


def run_all() -> list[tuple[str, bool, str]]:
    return [(name, *fn()) for name, fn in ALL_CHECKS]
