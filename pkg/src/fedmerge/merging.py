"""Correlation-driven node merging: group similar clients, fuse each group.

The similarity measure is the Pearson correlation of the full flattened
parameter vectors (weights and biases) of the freshly trained local
models. Grouping is a single greedy pass in ascending node order: each
unused node seeds a group and absorbs every later unused node whose
correlation with the seed clears the threshold, up to a size cap. Groups
of one fall back to the unmerged list. Fusing a group averages members'
models and control vectors with a shared weight rule and hands the
intermediary the union of member data, so the total sample count (and
with it the aggregation weights) is conserved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ClientState
from .errors import DimensionMismatch, EmptyGroup, PlanMismatch, ZeroVariance
from .vectors import pearson_corr, weighted_mean

ALPHA_RULES = ("uniform", "size_weighted")

# stands in for correlations against a constant (zero-variance) model;
# compares below every admissible threshold
UNMERGEABLE = -np.inf


@dataclass
class SimilarityMatrix:
    """Symmetric node-by-node correlation matrix with unit diagonal."""

    n: int
    r: np.ndarray


@dataclass
class MergePlan:
    """Disjoint groups of node positions plus the untouched remainder."""

    groups: list[list[int]]
    unmerged: list[int]

    def covered(self) -> list[int]:
        out = [i for g in self.groups for i in g]
        out.extend(self.unmerged)
        return sorted(out)


@dataclass(frozen=True)
class MergeConfig:
    """Knobs for the merge event(s)."""

    threshold: float = 0.7
    max_group_size: int = 3
    merge_rounds: tuple[int, ...] = (4,)
    alpha_rule: str = "size_weighted"

    def __post_init__(self):
        object.__setattr__(self, "merge_rounds", tuple(int(r) for r in self.merge_rounds))
        if not -1.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (-1, 1]")
        if self.max_group_size < 2:
            raise ValueError("max_group_size must be >= 2")
        if self.alpha_rule not in ALPHA_RULES:
            raise ValueError(f"alpha_rule must be one of {ALPHA_RULES}")


def correlation_matrix(models: list[np.ndarray]) -> SimilarityMatrix:
    """Pairwise Pearson correlations over local model vectors.

    Constant models cannot be correlated against anything; their rows and
    columns carry the UNMERGEABLE sentinel (diagonal stays 1).
    """
    n = len(models)
    if n < 2:
        raise ValueError("need at least 2 models")
    dim = models[0].shape[0]
    for m in models[1:]:
        if m.shape[0] != dim:
            raise DimensionMismatch("models differ in dimension")
    constant = [bool(np.all(m == m.ravel()[0])) for m in models]
    r = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if constant[i] or constant[j]:
                val = UNMERGEABLE
            else:
                try:
                    val = pearson_corr(models[i], models[j])
                except ZeroVariance:
                    val = UNMERGEABLE
            r[i, j] = r[j, i] = val
    return SimilarityMatrix(n=n, r=r)


def group_similar(matrix: SimilarityMatrix, threshold: float, max_group_size: int) -> MergePlan:
    """Greedy grouping pass over the similarity matrix.

    Nodes are visited in ascending order. An unused node i opens a group
    and scans every other node j (ascending): an unused j with
    r[i][j] >= threshold joins, until the group hits max_group_size.
    Groups that stay singletons put their seed on the unmerged list; any
    node still unaccounted for afterwards lands there too.
    """
    n = matrix.n
    r = matrix.r
    used: set[int] = set()
    groups: list[list[int]] = []
    unmerged: list[int] = []
    for i in range(n):
        if i in used:
            continue
        group = [i]
        for j in range(n):
            if j == i or j in used or group.count(j):
                continue
            if r[i, j] >= threshold:
                group.append(j)
                if len(group) == max_group_size:
                    break
        if len(group) > 1:
            groups.append(group)
            used.update(group)
        else:
            unmerged.append(i)
    for i in range(n):
        if i not in used and i not in unmerged:
            unmerged.append(i)
    return MergePlan(groups=groups, unmerged=unmerged)


def merge_group(
    group: list[int], clients: list[ClientState], alpha_rule: str = "size_weighted"
) -> ClientState:
    """Fuse the group's members into one intermediary node.

    Models and control vectors are averaged with the same weights
    (uniform, or proportional to member sample counts); the intermediary
    owns the concatenation of member partitions, takes the lowest member
    id, and inherits the union of adversity flags.
    """
    if len(group) < 1:
        raise EmptyGroup("cannot merge an empty group")
    if alpha_rule not in ALPHA_RULES:
        raise ValueError(f"alpha_rule must be one of {ALPHA_RULES}")
    members = [clients[i] for i in group]
    if alpha_rule == "uniform":
        weights = [1.0] * len(members)
    else:
        weights = [float(m.n_i) for m in members]
    x = weighted_mean([m.x_i for m in members], weights)
    c = weighted_mean([m.c_i for m in members], weights)
    indices = np.concatenate([m.partition_indices for m in members])
    flags = members[0].flags
    for m in members[1:]:
        flags = flags.merged_with(m.flags)
    return ClientState(
        id=min(m.id for m in members),
        partition_indices=indices,
        x_i=x,
        c_i=c,
        flags=flags,
    )


def apply_merge(
    clients: list[ClientState], plan: MergePlan, alpha_rule: str = "size_weighted"
) -> list[ClientState]:
    """Replace each planned group with its intermediary node.

    Returns the new roster ordered by node id; unmerged clients pass
    through untouched. Total sample count is conserved.
    """
    covered = plan.covered()
    if covered != list(range(len(clients))):
        raise PlanMismatch(
            f"plan covers positions {covered}, expected 0..{len(clients) - 1}"
        )
    roster = [merge_group(g, clients, alpha_rule) for g in plan.groups]
    roster.extend(clients[i] for i in plan.unmerged)
    roster.sort(key=lambda c: c.id)
    return roster
