"""Tests for tree growth, prediction, pruning, and CV complexity selection.

The expected values here come from two independent oracles defined below:
a brute-force split scan over every column and midpoint, and an exhaustive
enumeration of pruned subtrees for small trees.
"""

from __future__ import annotations

import json

import numpy as np
import numpy.testing as npt
import pytest

from treeprox.cart import (
    GrowControls,
    RegressionTree,
    fit_cv,
    grow,
    prune_path,
    prune_select,
)
from treeprox.errors import ConfigurationError, InputDataError

from conftest import make_table


def brute_force_best_split(table, min_leaf):
    """Best (gain, column, threshold) by scanning every column and midpoint.

    Ties break the documented way: first column in declaration order, then
    the smaller threshold (strict > while scanning ascending keeps both).
    """
    y = table.outcome
    n = table.n
    base = float(np.sum((y - y.mean()) ** 2))
    best = None
    for name in table.feature_names:
        x = table.column(name)
        levels = np.unique(x)
        for lo, hi in zip(levels[:-1], levels[1:]):
            thr = 0.5 * (lo + hi)
            mask = x < thr
            nl = int(mask.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            yl, yr = y[mask], y[~mask]
            sse = float(np.sum((yl - yl.mean()) ** 2) + np.sum((yr - yr.mean()) ** 2))
            gain = base - sse
            if best is None or gain > best[0]:
                best = (gain, name, thr)
    return best


def enumerate_pruned(node):
    """(n_leaves, total leaf SSE) for every pruned subtree rooted at node."""
    opts = [(1, node.sse)]
    if not node.is_leaf:
        for ln, ls in enumerate_pruned(node.left):
            for rn, rs in enumerate_pruned(node.right):
                opts.append((ln + rn, ls + rs))
    return opts


def internal_positions(node, prefix=()):
    if node.is_leaf:
        return frozenset()
    return (
        frozenset({prefix})
        | internal_positions(node.left, prefix + ("L",))
        | internal_positions(node.right, prefix + ("R",))
    )


def leaves_with_rows(tree, table):
    """Re-route training rows down the tree, yielding (leaf, row_indices)."""
    out = []

    def walk(node, rows):
        if node.is_leaf:
            out.append((node, rows))
            return
        mask = table.column(node.column)[rows] < node.threshold
        walk(node.left, rows[mask])
        walk(node.right, rows[~mask])

    walk(tree.root, np.arange(table.n))
    return out


def scalar_predict(tree, table, i):
    node = tree.root
    hops = 0
    while not node.is_leaf:
        node = node.left if table.column(node.column)[i] < node.threshold else node.right
        hops += 1
        assert hops < 10_000
    return node.mean


def random_signal_table(rng, n, p, noise=1.0):
    cols = {f"x{j}": rng.random(n) for j in range(p)}
    y = 2.0 * cols["x0"] + noise * rng.standard_normal(n)
    return make_table(cols, y=y)


class TestGrowControls:
    def test_defaults(self):
        c = GrowControls()
        assert (c.min_split, c.min_leaf, c.cp, c.max_splits) == (20, 7, 0.01, None)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            GrowControls(min_split=1)
        with pytest.raises(ConfigurationError):
            GrowControls(min_leaf=0)
        with pytest.raises(ConfigurationError):
            GrowControls(cp=-0.1)
        with pytest.raises(ConfigurationError):
            GrowControls(max_splits=-1)


class TestGrow:
    def test_constant_outcome_single_leaf(self):
        t = make_table({"x": np.linspace(0, 1, 25)}, y=np.full(25, 2.0))
        tree = grow(t)
        assert tree.root.is_leaf
        npt.assert_array_equal(tree.predict(t), np.full(25, 2.0))

    def test_binary_step_splits_at_half(self):
        x = np.array([0.0, 1.0] * 10)
        t = make_table({"x": x}, y=x.copy())
        tree = grow(t, GrowControls(min_leaf=5))
        assert tree.n_internal == 1
        assert tree.root.column == "x"
        assert tree.root.threshold == 0.5
        assert tree.root.left.mean == 0.0
        assert tree.root.right.mean == 1.0

    def test_empty_table_rejected(self):
        t = make_table({"x": np.array([])}, y=np.array([]))
        with pytest.raises(InputDataError):
            grow(t)

    def test_root_split_matches_brute_force(self, rng):
        for _ in range(30):
            n = int(rng.integers(14, 31))
            p = int(rng.integers(1, 4))
            min_leaf = int(rng.integers(1, 4))
            cols = {f"x{j}": rng.random(n) for j in range(p)}
            t = make_table(cols, y=rng.standard_normal(n))
            tree = grow(t, GrowControls(min_split=2, min_leaf=min_leaf, cp=0.0, max_splits=1))
            gain, name, thr = brute_force_best_split(t, min_leaf)
            assert gain > 0
            root = tree.root
            assert root.column == name
            assert root.threshold == thr
            implied = root.sse - (root.left.sse + root.right.sse)
            npt.assert_allclose(implied, gain, rtol=1e-9)

    def test_tie_breaks_to_first_declared_column(self, rng):
        x = rng.random(24)
        y = rng.standard_normal(24)
        first = grow(
            make_table({"a": x, "b": x.copy()}, y=y),
            GrowControls(min_split=2, min_leaf=2, cp=0.0, max_splits=1),
        )
        assert first.root.column == "a"
        swapped = grow(
            make_table({"b": x, "a": x.copy()}, y=y),
            GrowControls(min_split=2, min_leaf=2, cp=0.0, max_splits=1),
        )
        assert swapped.root.column == "b"

    def test_tie_breaks_to_smaller_threshold(self):
        # symmetric outcome: splitting off the left or right end is equally
        # good, and every quantity involved is exact in binary
        t = make_table({"x": [0.0, 1.0, 2.0, 3.0]}, y=[0.0, 1.0, 1.0, 0.0])
        tree = grow(t, GrowControls(min_split=2, min_leaf=1, cp=0.0, max_splits=1))
        assert tree.root.threshold == 0.5

    def test_max_splits_budget(self, rng):
        t = random_signal_table(rng, 300, 4)
        controls = GrowControls(min_split=4, min_leaf=2, cp=0.0, max_splits=10)
        tree = grow(t, controls)
        assert tree.n_internal <= 10
        assert tree.n_internal == 10  # plenty of variance left to split
        assert tree.n_leaves == 11

    def test_best_first_budgets_refine_monotonically(self, rng):
        t = random_signal_table(rng, 200, 3)
        prev_sse = np.inf
        for k in range(0, 13, 2):
            tree = grow(t, GrowControls(min_split=4, min_leaf=2, cp=0.0, max_splits=k))
            assert tree.n_internal <= k
            sse = tree.training_sse()
            assert sse <= prev_sse + 1e-9
            prev_sse = sse

    def test_cp_blocks_weak_splits(self, rng):
        t = make_table({"x": rng.random(60)}, y=rng.standard_normal(60))
        # cp=1 demands a single split explain the entire root SSE
        tree = grow(t, GrowControls(min_split=2, min_leaf=1, cp=1.0))
        assert tree.root.is_leaf

    def test_children_sse_never_exceeds_parent(self, rng):
        tree = grow(random_signal_table(rng, 250, 3), GrowControls(min_split=8, min_leaf=3, cp=0.0))

        def walk(node):
            if node.is_leaf:
                return
            assert node.left.sse + node.right.sse <= node.sse + 1e-9
            walk(node.left)
            walk(node.right)

        walk(tree.root)

    def test_leaf_mean_property(self, rng):
        t = random_signal_table(rng, 250, 3)
        tree = grow(t, GrowControls(min_split=8, min_leaf=3, cp=0.0))
        y = t.outcome
        total_n = 0
        for leaf, rows in leaves_with_rows(tree, t):
            assert rows.size == leaf.n
            total_n += leaf.n
            npt.assert_allclose(leaf.mean, y[rows].mean(), rtol=1e-12)
        assert total_n == t.n


class TestPredict:
    def test_matches_scalar_traversal(self, rng):
        t = random_signal_table(rng, 150, 3)
        tree = grow(t, GrowControls(min_split=6, min_leaf=2, cp=0.0))
        fresh = random_signal_table(rng, 40, 3)
        preds = tree.predict(fresh)
        for i in range(fresh.n):
            assert preds[i] == scalar_predict(tree, fresh, i)

    def test_missing_split_column_named(self, rng):
        t = random_signal_table(rng, 100, 2)
        tree = grow(t, GrowControls(min_split=6, min_leaf=2, cp=0.0))
        assert "x0" in tree.used_columns()
        bad = make_table({"x1": np.zeros(3)})
        with pytest.raises(InputDataError, match="'x0'"):
            tree.predict(bad)

    def test_unused_feature_permutation_is_neutral(self, rng):
        x0 = rng.random(120)
        noise_col = rng.random(120)
        t = make_table({"x0": x0, "x1": noise_col}, y=(x0 > 0.5) * 3.0)
        tree = grow(t, GrowControls(min_leaf=5))
        assert tree.used_columns() == ("x0",)
        shuffled = t.with_columns({"x1": noise_col[rng.permutation(120)]})
        npt.assert_array_equal(tree.predict(shuffled), tree.predict(t))


POLITICAL_TREE_JSON = json.dumps(
    {
        "model": "tree",
        "columns": ["dist_near_1", "party=Democrat"],
        "root": {
            "column": "dist_near_1",
            "threshold": 200.0,
            "left": {"mean": 1.1, "n": 40},
            "right": {
                "column": "party=Democrat",
                "threshold": 0.5,
                "left": {"mean": 1.6, "n": 35},
                "right": {"mean": 2.4, "n": 25},
            },
        },
    }
)


class TestSerialization:
    def test_round_trip_is_exact(self, rng):
        t = random_signal_table(rng, 150, 3)
        tree = grow(t, GrowControls(min_split=6, min_leaf=2, cp=0.0))
        text = tree.to_json()
        back = RegressionTree.from_json(text)
        assert back.to_json() == text
        npt.assert_array_equal(back.predict(t), tree.predict(t))
        assert back.controls == tree.controls
        assert back.columns == tree.columns

    def test_minimal_schema_loads(self):
        tree = RegressionTree.from_json(POLITICAL_TREE_JSON)
        assert tree.n_leaves == 3
        assert tree.root.n == 100  # rebuilt from children

    def test_far_democrat_routes_to_largest_leaf(self):
        tree = RegressionTree.from_json(POLITICAL_TREE_JSON)
        rows = make_table(
            {
                "dist_near_1": [250.0, 250.0, 50.0],
                "party=Democrat": [1.0, 0.0, 1.0],
            }
        )
        preds = tree.predict(rows)
        # Democrat beyond the distance split lands in the top leaf
        assert preds[0] == 2.4
        assert preds[0] == max(1.1, 1.6, 2.4)
        assert preds[1] == 1.6
        assert preds[2] == 1.1


class TestPrunePath:
    def test_single_leaf_path(self):
        t = make_table({"x": np.arange(10.0)}, y=np.full(10, 3.0))
        tree = grow(t)
        path = prune_path(tree)
        assert len(path) == 1
        assert path[0][0] == 0.0
        assert path[0][1].root.is_leaf

    def test_one_split_path(self):
        x = np.array([0.0, 1.0] * 10)
        t = make_table({"x": x}, y=x.copy())
        tree = grow(t, GrowControls(min_leaf=5))
        path = prune_path(tree)
        assert len(path) == 2
        assert path[0][0] == 0.0
        assert path[0][1].n_internal == 1
        # collapsing the only split costs the full root SSE: 20 * 0.25
        assert path[1][0] == 5.0
        assert path[1][1].root.is_leaf

    def test_alphas_increase_and_subtrees_nest(self, rng):
        t = random_signal_table(rng, 120, 3)
        tree = grow(t, GrowControls(min_split=6, min_leaf=2, cp=0.0))
        assert tree.n_leaves >= 4
        path = prune_path(tree)
        alphas = [a for a, _ in path]
        assert alphas[0] == 0.0
        assert all(b > a for a, b in zip(alphas, alphas[1:]))
        assert path[0][1].to_json() == tree.to_json()
        assert path[-1][1].root.is_leaf
        sigs = [internal_positions(sub.root) for _, sub in path]
        for bigger, smaller in zip(sigs, sigs[1:]):
            assert smaller < bigger

    def test_every_step_minimizes_penalized_sse(self, rng):
        # exhaustive oracle: enumerate every pruned subtree of a small tree
        # and check each path step wins SSE + alpha * leaves at its alpha
        # and strictly inside its alpha interval
        for _ in range(3):
            t = random_signal_table(rng, 100, 2)
            tree = grow(t, GrowControls(min_split=5, min_leaf=2, cp=0.0, max_splits=5))
            assert 2 <= tree.n_leaves <= 6
            path = prune_path(tree)
            candidates = enumerate_pruned(path[0][1].root)
            alphas = [a for a, _ in path]
            for k, (alpha, sub) in enumerate(path):
                probes = [alpha]
                if k + 1 < len(path):
                    probes.append(0.5 * (alpha + alphas[k + 1]))
                else:
                    probes.append(2.0 * alpha + 1.0)
                for probe in probes:
                    costs = [sse + probe * nl for nl, sse in candidates]
                    best = min(costs)
                    mine = sub.training_sse() + probe * sub.n_leaves
                    assert mine <= best + 1e-9 * max(1.0, abs(best))

    def test_prune_select_picks_interval(self):
        x = np.array([0.0, 1.0] * 10)
        t = make_table({"x": x}, y=x.copy())
        path = prune_path(grow(t, GrowControls(min_leaf=5)))
        assert prune_select(path, 0.0).n_internal == 1
        assert prune_select(path, 4.9).n_internal == 1
        assert prune_select(path, 5.0).root.is_leaf
        assert prune_select(path, np.inf).root.is_leaf


class TestFitCv:
    def test_deterministic_under_seed(self, rng):
        t = random_signal_table(rng, 120, 2, noise=0.3)
        a = fit_cv(t, folds=5, seed=11)
        b = fit_cv(t, folds=5, seed=11)
        assert a.to_json() == b.to_json()
        assert a.cv_alpha == b.cv_alpha
        assert a.cv_table == b.cv_table

    def test_pure_noise_collapses_toward_root(self):
        sizes = []
        for s in range(20):
            gen = np.random.default_rng(1000 + s)
            t = make_table(
                {f"x{j}": gen.random(150) for j in range(3)},
                y=gen.standard_normal(150),
            )
            fitted = fit_cv(t, folds=10, seed=s)
            sizes.append(fitted.n_leaves)
            best_mse = min(m for _, m in fitted.cv_table)
            var = float(np.var(t.outcome))
            assert abs(best_mse - var) <= 0.35 * var
        assert sum(1 for s in sizes if s == 1) >= 15
        assert sum(1 for s in sizes if s <= 2) >= 18

    def test_step_function_threshold_recovered(self):
        gen = np.random.default_rng(42)
        x = gen.random(500)
        y = (x < 0.3).astype(float) + 0.1 * gen.standard_normal(500)
        t = make_table({"x": x}, y=y)
        fitted = fit_cv(t, folds=10, seed=0)
        assert not fitted.root.is_leaf
        assert abs(fitted.root.threshold - 0.3) < 0.05

    def test_selected_tree_is_path_member(self, rng):
        t = random_signal_table(rng, 120, 2, noise=0.3)
        fitted = fit_cv(t, folds=5, seed=2)
        full = grow(t, GrowControls(cp=0.0))
        path = prune_path(full)
        assert fitted.cv_alpha is not None
        chosen = prune_select(path, fitted.cv_alpha)
        assert chosen.to_json() == fitted.to_json()
        assert len(fitted.cv_table) == len(path)
        assert fitted.cv_table[-1][0] == np.inf

    def test_too_few_rows_for_folds(self):
        t = make_table({"x": np.arange(5.0)}, y=np.arange(5.0))
        with pytest.raises(ConfigurationError):
            fit_cv(t, folds=10, seed=0)
