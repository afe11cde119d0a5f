"""Greedy binary regression trees: growth, pruning, and CV complexity selection.

Splits minimize the sum of squared errors. Growth is best-first (largest
SSE reduction expanded first), which makes a max-splits budget pick the
globally most valuable splits; without a budget the result is identical to
exhaustive recursive growth. Thresholds sit at midpoints between
consecutive distinct sorted values, and ties break by column declaration
order, then by the smaller threshold.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from .dataset import FeatureTable, kfold_indices
from .errors import ConfigurationError, InputDataError


@dataclass(frozen=True)
class GrowControls:
    """Stopping rules; cp is the SSE-reduction threshold relative to the root SSE."""

    min_split: int = 20
    min_leaf: int = 7
    cp: float = 0.01
    max_splits: int | None = None

    def __post_init__(self):
        if self.min_split < 2 or self.min_leaf < 1:
            raise ConfigurationError("min_split must be >= 2 and min_leaf >= 1")
        if self.cp < 0:
            raise ConfigurationError("cp must be >= 0")
        if self.max_splits is not None and self.max_splits < 0:
            raise ConfigurationError("max_splits must be >= 0")


class Node:
    """Tree node; a leaf iff ``column`` is None. Internal nodes keep their
    pre-split stats so pruning can collapse them without the data."""

    __slots__ = ("column", "threshold", "left", "right", "mean", "n", "sse")

    def __init__(self, mean: float, n: int, sse: float):
        self.column: str | None = None
        self.threshold = 0.0
        self.left: Node | None = None
        self.right: Node | None = None
        self.mean = mean
        self.n = n
        self.sse = sse

    @property
    def is_leaf(self) -> bool:
        return self.column is None


@njit(cache=True)
def _best_split(colmat, y, rows, cand_cols, min_leaf):  # pragma: no cover - compiled
    """Best (gain, column, threshold) over candidate columns for one node.

    Scans columns in the given (ascending) order and thresholds in
    ascending order, keeping strictly larger gains only, which yields the
    documented tie-break. Outcomes are centered within the node before the
    prefix-sum scan to avoid cancellation.
    """
    k = rows.size
    yn = np.empty(k)
    tot = 0.0
    for i in range(k):
        yn[i] = y[rows[i]]
        tot += yn[i]
    mu = tot / k
    ctot = 0.0
    for i in range(k):
        yn[i] -= mu
        ctot += yn[i]
    base = ctot * ctot / k
    best_gain = 0.0
    best_col = -1
    best_thr = 0.0
    xn = np.empty(k)
    for ci in range(cand_cols.size):
        c = cand_cols[ci]
        for i in range(k):
            xn[i] = colmat[c, rows[i]]
        order = np.argsort(xn)
        cls = 0.0
        prev = xn[order[0]]
        for i in range(1, k):
            cls += yn[order[i - 1]]
            cur = xn[order[i]]
            if i >= min_leaf and (k - i) >= min_leaf and cur > prev:
                rs = ctot - cls
                gain = cls * cls / i + rs * rs / (k - i) - base
                if gain > best_gain:
                    best_gain = gain
                    best_col = c
                    best_thr = 0.5 * (prev + cur)
            prev = cur
    return best_gain, best_col, best_thr


def _node_stats(y: np.ndarray) -> tuple[float, int, float]:
    mean = float(np.mean(y))
    return mean, len(y), float(np.sum((y - mean) ** 2))


class RegressionTree:
    """A fitted tree: root node plus the feature-column universe it was grown on."""

    def __init__(self, root: Node, columns: tuple[str, ...], controls: GrowControls):
        self.root = root
        self.columns = columns
        self.controls = controls
        self.cv_alpha: float | None = None
        self.cv_table: list[tuple[float, float]] | None = None

    def used_columns(self) -> tuple[str, ...]:
        seen: list[str] = []

        def walk(node: Node) -> None:
            if node.is_leaf:
                return
            if node.column not in seen:
                seen.append(node.column)
            walk(node.left)
            walk(node.right)

        walk(self.root)
        return tuple(seen)

    @property
    def n_leaves(self) -> int:
        def count(node: Node) -> int:
            return 1 if node.is_leaf else count(node.left) + count(node.right)

        return count(self.root)

    @property
    def n_internal(self) -> int:
        def count(node: Node) -> int:
            return 0 if node.is_leaf else 1 + count(node.left) + count(node.right)

        return count(self.root)

    def training_sse(self) -> float:
        def total(node: Node) -> float:
            return node.sse if node.is_leaf else total(node.left) + total(node.right)

        return total(self.root)

    def predict(self, table: FeatureTable) -> np.ndarray:
        missing = [c for c in self.used_columns() if not table.has_column(c)]
        if missing:
            raise InputDataError(f"prediction table is missing split column {missing[0]!r}")
        out = np.empty(table.n)
        idx = np.arange(table.n)

        def fill(node: Node, rows: np.ndarray) -> None:
            if node.is_leaf:
                out[rows] = node.mean
                return
            mask = table.column(node.column)[rows] < node.threshold
            fill(node.left, rows[mask])
            fill(node.right, rows[~mask])

        fill(self.root, idx)
        return out

    def to_payload(self) -> dict:
        def encode(node: Node) -> dict:
            d = {"mean": node.mean, "n": node.n, "sse": node.sse}
            if not node.is_leaf:
                d = {
                    "column": node.column,
                    "threshold": node.threshold,
                    **d,
                    "left": encode(node.left),
                    "right": encode(node.right),
                }
            return d

        return {
            "model": "tree",
            "columns": list(self.columns),
            "controls": asdict(self.controls),
            "root": encode(self.root),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), indent=1)

    @classmethod
    def from_payload(cls, payload: dict) -> "RegressionTree":
        def decode(d: dict) -> Node:
            if "column" not in d:
                return Node(float(d["mean"]), int(d["n"]), float(d.get("sse", 0.0)))
            left = decode(d["left"])
            right = decode(d["right"])
            # internal nodes may omit aggregate stats; rebuild from children
            n = int(d.get("n", left.n + right.n))
            if "mean" in d:
                mean = float(d["mean"])
            else:
                mean = (left.mean * left.n + right.mean * right.n) / n if n else 0.0
            node = Node(mean, n, float(d.get("sse", left.sse + right.sse)))
            node.column = d["column"]
            node.threshold = float(d["threshold"])
            node.left = left
            node.right = right
            return node

        controls = GrowControls(**payload.get("controls", {}))
        return cls(decode(payload["root"]), tuple(payload["columns"]), controls)

    @classmethod
    def from_json(cls, text: str) -> "RegressionTree":
        return cls.from_payload(json.loads(text))


def grow(
    train: FeatureTable,
    controls: GrowControls | None = None,
    column_sampler=None,
) -> RegressionTree:
    """Grow a tree by best-first SSE-reduction search.

    ``column_sampler``, when given, is called once per candidate node and
    must return an ascending array of column indices eligible at that node
    (the forest's per-node feature subsampling hook).
    """
    controls = controls or GrowControls()
    y = train.require_outcome()
    if train.n == 0:
        raise InputDataError("cannot grow a tree on an empty table")
    names = train.feature_names
    p = len(names)
    colmat = np.ascontiguousarray(train.matrix().T) if p else np.empty((0, train.n))
    all_cols = np.arange(p, dtype=np.int64)

    mean, n, sse = _node_stats(y)
    root = Node(mean, n, sse)
    root_sse = sse
    max_splits = controls.max_splits if controls.max_splits is not None else np.inf

    heap: list[tuple[float, int, Node, np.ndarray, str, float]] = []
    counter = 0

    def push_candidate(node: Node, rows: np.ndarray) -> None:
        nonlocal counter
        if node.n < controls.min_split or node.sse <= 0.0 or p == 0:
            return
        cand = all_cols if column_sampler is None else column_sampler()
        gain, col, thr = _best_split(colmat, y, rows, cand, controls.min_leaf)
        if col < 0 or gain <= 0.0:
            return
        if root_sse > 0 and gain < controls.cp * root_sse:
            return
        heapq.heappush(heap, (-gain, counter, node, rows, names[col], thr))
        counter += 1

    if max_splits > 0:
        push_candidate(root, np.arange(n, dtype=np.int64))
    n_splits = 0
    while heap and n_splits < max_splits:
        _, _, node, rows, col, thr = heapq.heappop(heap)
        mask = colmat[names.index(col), rows] < thr
        lrows, rrows = rows[mask], rows[~mask]
        node.column = col
        node.threshold = thr
        node.left = Node(*_node_stats(y[lrows]))
        node.right = Node(*_node_stats(y[rrows]))
        n_splits += 1
        if n_splits < max_splits:
            push_candidate(node.left, lrows)
            push_candidate(node.right, rrows)
    return RegressionTree(root, names, controls)


def _clone(node: Node) -> Node:
    out = Node(node.mean, node.n, node.sse)
    if not node.is_leaf:
        out.column = node.column
        out.threshold = node.threshold
        out.left = _clone(node.left)
        out.right = _clone(node.right)
    return out


def prune_path(tree: RegressionTree) -> list[tuple[float, RegressionTree]]:
    """Weakest-link cost-complexity pruning sequence.

    Returns [(alpha_0=0, full tree), ..., (alpha_K, root leaf)] with
    strictly increasing alphas and nested subtrees. Each subtree minimizes
    total leaf SSE + alpha * n_leaves for alphas in [alpha_k, alpha_k+1).
    """
    work = _clone(tree.root)

    def weakest(node: Node, out: list[tuple[float, Node]]) -> tuple[int, float]:
        if node.is_leaf:
            return 1, node.sse
        ln, ls = weakest(node.left, out)
        rn, rs = weakest(node.right, out)
        leaves, sse = ln + rn, ls + rs
        out.append(((node.sse - sse) / (leaves - 1), node))
        return leaves, sse

    def collapse(node: Node) -> None:
        node.column = None
        node.left = None
        node.right = None

    seq: list[tuple[float, RegressionTree]] = [
        (0.0, RegressionTree(_clone(work), tree.columns, tree.controls))
    ]
    while not work.is_leaf:
        links: list[tuple[float, Node]] = []
        weakest(work, links)
        alpha = min(g for g, _ in links)
        # Collapse every node attaining the minimum; repeat in case new
        # links drop to exactly the same alpha, so alphas stay strictly
        # increasing across recorded steps.
        while True:
            hits = [node for g, node in links if g == alpha]
            for node in hits:
                collapse(node)
            if work.is_leaf:
                break
            links = []
            weakest(work, links)
            if min(g for g, _ in links) > alpha:
                break
        seq.append((alpha, RegressionTree(_clone(work), tree.columns, tree.controls)))
    return seq


def prune_select(path: list[tuple[float, RegressionTree]], alpha: float) -> RegressionTree:
    """The path subtree whose alpha interval contains the given alpha."""
    chosen = path[0][1]
    for a, sub in path:
        if a <= alpha:
            chosen = sub
        else:
            break
    return chosen


def fit_cv(
    train: FeatureTable,
    folds: int = 10,
    seed: int = 0,
    controls: GrowControls | None = None,
) -> RegressionTree:
    """Grow a full tree, then pick the pruning level with minimum CV MSE.

    Candidate alphas are the geometric midpoints of the full tree's pruning
    path (plus infinity for the root leaf); every fold grows its own tree,
    is pruned at each candidate, and scored on the held-out rows. The
    selected subtree of the full tree is returned with ``cv_alpha`` and
    ``cv_table`` ([(alpha, mse), ...]) attached. No 1-SE rule: the minimum
    mean CV MSE wins.
    """
    controls = controls or GrowControls(cp=0.0)
    y = train.require_outcome()
    full = grow(train, controls)
    path = prune_path(full)
    alphas = [a for a, _ in path]
    betas = [math.sqrt(alphas[i] * alphas[i + 1]) for i in range(len(alphas) - 1)]
    betas.append(math.inf)

    fold_idx = kfold_indices(train.ids, folds, seed)
    all_rows = np.arange(train.n)
    sse_tot = np.zeros(len(betas))
    for held in fold_idx:
        rest = np.setdiff1d(all_rows, held, assume_unique=True)
        ftree = grow(train.take(rest), controls)
        fpath = prune_path(ftree)
        held_table = train.take(held)
        for bi, beta in enumerate(betas):
            pred = prune_select(fpath, beta).predict(held_table)
            sse_tot[bi] += float(np.sum((y[held] - pred) ** 2))
    cv_mse = sse_tot / train.n
    best = int(np.argmin(cv_mse))
    chosen = prune_select(path, betas[best])
    result = RegressionTree(_clone(chosen.root), full.columns, controls)
    result.cv_alpha = betas[best]
    result.cv_table = list(zip(betas, cv_mse.tolist()))
    return result
