"""Acceptance gate: eight criteria, one printed pass/fail line each.

Run with `-s` to see the lines; each test also stands alone as a normal
pytest case. Expected values come from independent oracles computed in
this file (finite differences, definitional formulas, a literal greedy
re-walk, closed-form single-step algebra) — never from the code under
test.
"""

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedmerge import mlp
from fedmerge.datasets import generate_synthetic, partition_noniid
from fedmerge.engine import (
    ClientState,
    ClientUpdate,
    ServerState,
    client_local_update,
    run_round,
    server_aggregate,
    update_global_control,
)
from fedmerge.errors import ZeroVariance
from fedmerge.harness import (
    ExperimentConfig,
    rerun_manifest,
    rows_equal_ignoring_wall,
    write_run,
)
from fedmerge.merging import MergeConfig, SimilarityMatrix, group_similar, merge_group
from fedmerge.vectors import pearson_corr


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# ------------------------------------------------- 1: gradient correctness


def finite_diff(spec, params, batch, eps=1e-5):
    out = np.zeros_like(params)
    for k in range(params.size):
        up, down = params.copy(), params.copy()
        up[k] += eps
        down[k] -= eps
        out[k] = (mlp.loss_and_grad(spec, up, batch)[0] - mlp.loss_and_grad(spec, down, batch)[0]) / (
            2 * eps
        )
    return out


def test_criterion_1_gradient_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(314)
    worst = 0.0
    for _ in range(20):
        spec = mlp.ModelSpec(
            input_dim=int(rng.integers(2, 7)),
            hidden_dims=tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3)))),
            num_classes=int(rng.integers(2, 5)),
            activation=("relu", "tanh")[int(rng.integers(2))],
        )
        params = rng.standard_normal(mlp.param_count(spec)) * 0.7
        n = int(rng.integers(2, 9))
        batch = mlp.Batch(
            inputs=rng.uniform(0, 1, size=(n, spec.input_dim)),
            labels=rng.integers(0, spec.num_classes, size=n).astype(np.int64),
        )
        _, analytic = mlp.loss_and_grad(spec, params, batch)
        numeric = finite_diff(spec, params, batch)
        scale = max(float(np.max(np.abs(numeric))), 1e-7)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    elapsed = time.perf_counter() - started
    report(
        "criterion 1 (gradient correctness)",
        worst < 1e-4 and elapsed < 10.0,
        f"20 random models, max relative error {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------- 2: Pearson property suite


def test_criterion_2_pearson_properties():
    started = time.perf_counter()
    rng = np.random.default_rng(159)
    cases = 0
    raises = 0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        a = rng.standard_normal(n) * float(rng.uniform(0.1, 10))
        b = rng.standard_normal(n) * float(rng.uniform(0.1, 10))
        r_ab, r_ba = pearson_corr(a, b), pearson_corr(b, a)
        assert r_ab == r_ba, "symmetry"
        assert -1.0 <= r_ab <= 1.0, "range clamp"
        assert abs(pearson_corr(a, a) - 1.0) <= 1e-12, "unit self-correlation"
        alpha, beta = float(rng.uniform(0.1, 5)), float(rng.uniform(-5, 5))
        assert abs(pearson_corr(a, alpha * b + beta) - r_ab) <= 1e-9, "affine invariance"
        try:
            pearson_corr(a, np.full(n, beta))
        except ZeroVariance:
            raises += 1
        cases += 1
    elapsed = time.perf_counter() - started
    report(
        "criterion 2 (correlation properties)",
        cases == 1000 and raises == 1000 and elapsed < 5.0,
        f"{cases} randomized cases, {raises} ZeroVariance raises, {elapsed:.1f}s",
    )


# ------------------------------------------- 3: grouping oracle equivalence


def literal_greedy(r, threshold, cap):
    n = r.shape[0]
    used, groups, unmerged = [False] * n, [], []
    for i in range(n):
        if used[i]:
            continue
        members = [i]
        for j in range(n):
            if len(members) == cap:
                break
            if j != i and not used[j] and r[i][j] >= threshold:
                members.append(j)
        if len(members) >= 2:
            groups.append(members)
            for m in members:
                used[m] = True
        else:
            unmerged.append(i)
    for k in range(n):
        if not used[k] and k not in unmerged:
            unmerged.append(k)
    return groups, unmerged


def test_criterion_3_grouping_matches_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(265)
    matrices = 0
    comparisons = 0
    for _ in range(520):
        n = int(rng.integers(2, 7))
        a = rng.uniform(-1, 1, size=(n, n))
        r = (a + a.T) / 2
        np.fill_diagonal(r, 1.0)
        matrices += 1
        for threshold in (0.3, 0.5, 0.7, 0.9):
            for cap in (2, 3, 4):
                plan = group_similar(SimilarityMatrix(n, r), threshold, cap)
                groups, unmerged = literal_greedy(r, threshold, cap)
                assert plan.groups == groups and plan.unmerged == unmerged, (
                    f"divergence at n={n}, threshold={threshold}, cap={cap}"
                )
                comparisons += 1
    elapsed = time.perf_counter() - started
    report(
        "criterion 3 (grouping oracle equivalence)",
        matrices >= 500 and elapsed < 10.0,
        f"{matrices} matrices, {comparisons} exact plan matches, {elapsed:.1f}s",
    )


# ------------------------------------------------ 4: formula substitution


def quadratic_pull_to_one(params, indices):
    grad = params - 1.0
    return float(0.5 * np.sum(grad**2)), grad


def test_criterion_4_printed_formulas():
    tol = 1e-12
    checks = []

    # global step, literal mode: x=[0], eta_g=1, single update to [1] -> [-1]
    server = ServerState(x=np.array([0.0]), c=np.array([0.0]), eta_g=1.0, mode="paper_literal")
    upd = [ClientUpdate(client_id=0, x_new=np.array([1.0]), c_new=np.array([0.0]), n_i=5)]
    checks.append(abs(server_aggregate(server, upd)[0] - (-1.0)) <= tol)

    # local step, literal mode: one full-batch step with control offset 0.1
    client = ClientState(
        id=0,
        partition_indices=np.array([0, 1]),
        x_i=np.zeros(2),
        c_i=np.zeros(2),
    )
    update = client_local_update(
        client,
        x_t=np.zeros(2),
        c_t=np.array([0.1, 0.1]),
        objective=quadratic_pull_to_one,
        epochs=1,
        eta_l=0.5,
        batch_size=2,
        mode="paper_literal",
    )
    checks.append(float(np.max(np.abs(update.x_new - 0.6))) <= tol)

    # global control, literal mode: all-equal fixed point, then K=1 jump
    c_t = np.array([3.0])
    fixed = update_global_control(
        c_t, [ClientUpdate(0, np.zeros(1), c_new=c_t.copy(), n_i=1) for _ in range(4)]
    )
    checks.append(abs(fixed[0] - 3.0) <= tol)
    jumped = update_global_control(
        np.array([1.0]), [ClientUpdate(0, np.zeros(1), c_new=np.array([2.0]), n_i=1)]
    )
    checks.append(abs(jumped[0] - 2.0) <= tol)

    # pairwise merge, uniform weights: exact midpoint for x and c
    members = [
        ClientState(0, np.array([0]), x_i=np.array([1.0, 3.0]), c_i=np.array([2.0, 0.0])),
        ClientState(1, np.array([1]), x_i=np.array([3.0, 1.0]), c_i=np.array([0.0, 2.0])),
    ]
    merged = merge_group([0, 1], members, alpha_rule="uniform")
    checks.append(float(np.max(np.abs(merged.x_i - 2.0))) <= tol)
    checks.append(float(np.max(np.abs(merged.c_i - 1.0))) <= tol)

    report(
        "criterion 4 (printed-formula substitution)",
        all(checks),
        f"{sum(checks)}/6 substitutions exact at 1e-12",
    )


# -------------------------------------------------- 5: zero-control reduction


def test_criterion_5_reduces_to_fedavg():
    dim = 3
    n_samples = 24
    rng = np.random.default_rng(77)
    targets = rng.standard_normal((n_samples, dim))

    def objective(params, indices):
        pull = np.mean(targets[indices], axis=0)
        grad = params - pull
        return float(0.5 * np.sum(grad**2)), grad

    parts = [np.arange(0, 10), np.arange(10, 17), np.arange(17, 24)]
    x0 = rng.standard_normal(dim)
    eta_l, eta_g, epochs, batch_size = 0.1, 0.7, 2, 4

    # independent plain-FedAvg reference: same walk order, no controls
    fedavg = x0.copy()
    acc = np.zeros(dim)
    total = sum(len(p) for p in parts)
    for part in parts:
        x = fedavg.copy()
        for _ in range(epochs):
            for start in range(0, len(part), batch_size):
                batch = part[start : start + batch_size]
                x = x - eta_l * (x - np.mean(targets[batch], axis=0))
        acc += (len(part) / total) * (x - fedavg)
    fedavg = fedavg + eta_g * acc

    server = ServerState(
        x=x0.copy(), c=np.zeros(dim), eta_g=eta_g, eta_l=eta_l, local_epochs=epochs, mode="standard"
    )
    clients = [
        ClientState(id=i, partition_indices=p, x_i=x0.copy(), c_i=np.zeros(dim))
        for i, p in enumerate(parts)
    ]
    server, _, _ = run_round(server, clients, objective, batch_size)

    gap = float(np.max(np.abs(server.x - fedavg)))
    report(
        "criterion 5 (zero-control reduction)",
        gap <= 1e-9,
        f"one full round vs plain weighted FedAvg, max gap {gap:.2e}",
    )


# ------------------------------------- 6 & 7: three-condition experiment


MNIST_NAMES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def mnist_dir() -> Path | None:
    candidates = []
    env = os.environ.get("FEDMERGE_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parent.parent / "data")
    for base in candidates:
        if all((base / name).exists() for name in MNIST_NAMES):
            return base
    return None


def experiment_shape_config(data: Path | None) -> ExperimentConfig:
    merge = MergeConfig(threshold=0.7, max_group_size=3, merge_rounds=(4,))
    common = dict(
        num_clients=10,
        rounds=10,
        local_epochs=2,
        batch_size=32,
        eta_g=1.0,
        mode="standard",
        merge=merge,
        seeds=(1, 2, 3),
    )
    if data is not None:
        return ExperimentConfig(
            dataset="mnist",
            data_dir=str(data),
            model=mlp.ModelSpec(784, (128,), 10, "relu"),
            eta_l=0.05,
            classes_per_client=8,
            **common,
        )
    return ExperimentConfig(
        dataset="synthetic",
        synthetic_samples=2000,
        synthetic_test_samples=500,
        model=mlp.ModelSpec(16, (32,), 10, "relu"),
        eta_l=0.2,
        classes_per_client=3,
        **common,
    )


def experiment_arms(config: ExperimentConfig) -> dict[str, ExperimentConfig]:
    def with_condition(cfg, condition):
        return replace(cfg, adversity=replace(cfg.adversity, condition=condition))

    baseline = replace(config, merge=None)
    return {
        "proposed-normal": with_condition(config, "normal"),
        "baseline-packet_loss": with_condition(baseline, "packet_loss"),
        "proposed-packet_loss": with_condition(config, "packet_loss"),
        "baseline-poisoning": with_condition(baseline, "poisoning"),
        "proposed-poisoning": with_condition(config, "poisoning"),
    }


def final_mean(rows) -> float:
    last = max(r.round for r in rows)
    return float(np.mean([r.test_accuracy for r in rows if r.round == last]))


@pytest.fixture(scope="module")
def three_condition_runs(tmp_path_factory):
    data = mnist_dir()
    config = experiment_shape_config(data)
    out = tmp_path_factory.mktemp("three_condition")
    started = time.perf_counter()
    runs = {}
    for label, arm in experiment_arms(config).items():
        rows, run_dir = write_run(arm, out_dir=out / label)
        runs[label] = {"rows": rows, "dir": run_dir}
    elapsed = time.perf_counter() - started
    return {
        "variant": "mnist" if data is not None else "synthetic",
        "runs": runs,
        "elapsed": elapsed,
    }


def test_criterion_6_experiment_shape(three_condition_runs):
    runs = three_condition_runs["runs"]
    variant = three_condition_runs["variant"]
    elapsed = three_condition_runs["elapsed"]
    budget = 15 * 60 if variant == "mnist" else 2 * 60

    normal_rows = runs["proposed-normal"]["rows"]
    pl_prop = final_mean(runs["proposed-packet_loss"]["rows"])
    pl_base = final_mean(runs["baseline-packet_loss"]["rows"])
    po_prop = final_mean(runs["proposed-poisoning"]["rows"])
    po_base = final_mean(runs["baseline-poisoning"]["rows"])

    drops = 0
    for seed in (1, 2, 3):
        per_round = {r.round: r.n_active_nodes for r in normal_rows if r.seed == seed}
        if per_round[4] < per_round[3]:
            drops += 1

    parts = [
        f"packet_loss {pl_prop:.3f} vs {pl_base:.3f}",
        f"poisoning {po_prop:.3f} vs {po_base:.3f}",
        f"merge shrank roster in {drops}/3 seeds",
        f"{elapsed:.0f}s",
    ]
    ok = (
        pl_prop >= pl_base
        and po_prop >= po_base
        and po_prop >= 0.55
        and drops >= 2
        and elapsed < budget
    )
    if variant == "mnist":
        normal_acc = final_mean(normal_rows)
        ok = ok and normal_acc >= 0.75
        parts.insert(0, f"normal {normal_acc:.3f}")
    report(f"criterion 6 (experiment shape, {variant} variant)", ok, ", ".join(parts))


def test_criterion_7_manifest_rerun_bit_identical(three_condition_runs):
    mismatches = []
    for label, run in three_condition_runs["runs"].items():
        again = rerun_manifest(run["dir"] / "manifest.json")
        if not rows_equal_ignoring_wall(again, run["rows"]):
            mismatches.append(label)
    report(
        "criterion 7 (manifest rerun determinism)",
        not mismatches,
        f"{len(three_condition_runs['runs'])} manifests reproduced bit-identically"
        if not mismatches
        else f"diverged: {mismatches}",
    )


# ----------------------------------------------- 8: partition properties


def test_criterion_8_partition_properties():
    started = time.perf_counter()
    data = generate_synthetic(3000, 8, 10, seed=404)
    bad = []
    for seed in range(50):
        partition = partition_noniid(data, num_clients=10, classes_per_client=8, seed=seed)
        seen = np.concatenate(partition.client_indices)
        if len(np.unique(seen)) != len(seen):
            bad.append((seed, "overlap"))
        if seen.min() < 0 or seen.max() >= 3000:
            bad.append((seed, "range"))
        for idx in partition.client_indices:
            if len(np.unique(data.labels[idx])) > 8:
                bad.append((seed, "too many classes"))
                break
    elapsed = time.perf_counter() - started
    report(
        "criterion 8 (partition properties)",
        not bad and elapsed < 5.0,
        f"50 seeds: disjoint, in-range, >=2 empty classes per client, {elapsed:.1f}s"
        if not bad
        else f"violations: {bad[:3]}",
    )
